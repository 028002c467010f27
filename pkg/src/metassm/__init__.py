"""Meta-learning families of latent dynamical systems across datasets."""

__version__ = "0.1.0"
