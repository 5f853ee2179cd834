"""Score-distillation guidance worker: TCP service returning image-space gradients."""

__version__ = "0.1.0"
