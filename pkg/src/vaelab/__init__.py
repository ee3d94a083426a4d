"""From-scratch dense VAEs and latent-sparsity diagnostics."""

__version__ = "0.1.0"

from .datasets import Dataset, TileSpec, gen_tiles, load_mnist_dir, load_mnist_idx, minibatches
from .diagnostics import (
    classify_variables, kl_rho_curve, kl_rho_minimum, latent_stats, noise_injection_experiment,
    reconstruction_gain, stationarity_check,
)
from .model import (
    TrainConfig, VaeModel, decode, encode, kl_term, reparameterize, sample_prior, train, vae_loss,
)
from .model_io import load_model, save_model
from .nn import Rng
