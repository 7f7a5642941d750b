"""Multi-label discrete-time survival modelling with MTLR heads and time-event saliency maps."""
__version__ = "0.1.0"
