"""Motion tokenization and multimodal language modelling for egocentric tracking."""
__version__ = "0.1.0"
