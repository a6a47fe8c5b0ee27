"""Context-assisted single-shot face detection built on a small numpy autodiff engine."""

__version__ = "0.1.0"
