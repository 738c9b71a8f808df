"""Multi-step dual attention engine for visual dialog answer ranking."""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, backward, finite_difference_check

__all__ = ["Graph", "Tensor", "backward", "finite_difference_check", "__version__"]
