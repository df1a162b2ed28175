"""Binary CNN patch descriptors: packed XNOR/popcount kernels, the
DidymosNet family, training losses, synthetic data and match evaluation."""

__version__ = "0.1.0"
