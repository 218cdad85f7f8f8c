"""Dual adversarial learning for paired sequence generation."""
