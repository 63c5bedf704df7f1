"""Two-stage 3D box refinement built on a small numpy autodiff engine."""

__version__ = "0.1.0"
