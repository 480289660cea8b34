"""cogworks: a desk-scale conversational control plane for production machines."""

__version__ = "0.1.0"
