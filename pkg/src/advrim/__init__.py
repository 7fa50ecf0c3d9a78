"""Adversarial license-plate rim toolkit: differentiable compositing,
surrogate ALPR victims, patch training, evaluation, and dependence
statistics."""

__version__ = "0.1.0"
