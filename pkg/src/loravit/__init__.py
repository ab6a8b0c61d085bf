"""Parameter-efficient fine-tuning lab: a tape-autograd core, a small
vision transformer with low-rank attention adapters, a center-based
metric loss, and a synthetic cross-manipulation benchmark harness."""

__version__ = "0.1.0"

from .autograd import Parameter, Tape, Tensor, finite_diff_grad

__all__ = ["Parameter", "Tape", "Tensor", "finite_diff_grad", "__version__"]
