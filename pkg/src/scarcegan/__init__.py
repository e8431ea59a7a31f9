"""Semi-supervised GAN for rare-class identification with a leeway (Unknown) class."""

__version__ = "0.1.0"
