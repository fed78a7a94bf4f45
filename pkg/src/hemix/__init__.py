"""Heterogeneous token mixing for click-through-rate prediction, on a small numpy autodiff kernel."""
__version__ = "0.1.0"
