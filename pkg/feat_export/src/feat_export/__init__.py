"""Export intermediate convnet activations as FGT1 tensor files."""

__version__ = "0.1.0"
