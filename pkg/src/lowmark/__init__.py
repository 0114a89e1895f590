"""Low-rank adapter watermarking lab for a toy latent decoder."""

__version__ = "0.1.0"
