"""Text VAEs with kernel-regularized planar flows, built on a small numpy autograd."""

__version__ = "0.1.0"
