"""Cross-domain recommendation with an equivalent (orthogonal) latent transformation."""

__version__ = "0.1.0"
