"""Object-centric imitation learning with synthetic corrective labels and a BC/k-NN ensemble."""

__version__ = "0.1.0"
