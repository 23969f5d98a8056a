"""Class-conditional context revision for cross-domain hyperspectral
pixel classification, on a small numpy autodiff engine."""

__version__ = "0.1.0"
