"""Static figures from tolldag simulation traces and solver results."""

from .figures import plot_before_after, plot_trajectories
from .io import TraceFrame, load_result

__all__ = ["TraceFrame", "load_result", "plot_before_after", "plot_trajectories"]
