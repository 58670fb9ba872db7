"""Build, train and audit DenseNet-style networks with concatenative skip connections."""

__version__ = "0.1.0"
