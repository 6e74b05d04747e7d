"""Anti-aliasing restoration of under-capacity radiance-field renderings with a conditional latent diffusion restorer."""

__version__ = "0.1.0"
