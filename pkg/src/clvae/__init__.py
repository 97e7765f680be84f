"""Anomaly classification with a VAE whose latent space is conditioned on two class priors."""
from clvae.vae import ConditionedVAE, PriorSet, VaeSpec

__version__ = "0.1.0"
__all__ = ["ConditionedVAE", "PriorSet", "VaeSpec", "__version__"]
