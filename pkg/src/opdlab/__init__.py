"""Desk-scale lab for on-policy distillation, GRPO and teacher-validated curricula
on a synthetic temporal-grounding task."""

__version__ = "0.1.0"
