"""Graph neural networks over triangular surface meshes, with layer-wise
embedding inspection for label and data-source separability."""

__version__ = "0.1.0"
