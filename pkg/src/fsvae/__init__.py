"""Factored sequence VAE for video.

Latents of a frame sequence are split into a static factor (clustered
around a per-video anchor) and a temporal factor (first-order Gaussian
random walk). The KL between the per-frame Gaussian posterior and this
sequence prior has a closed form, which is what makes the model trainable;
everything analytic here is cross-checked against Monte-Carlo oracles.
"""

from fsvae.priors import PriorConfig
from fsvae.losses import PosteriorParams, ElboTerms

__all__ = ["PriorConfig", "PosteriorParams", "ElboTerms"]
__version__ = "0.1.0"
