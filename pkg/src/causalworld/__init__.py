"""Factored world models with learnable structural masks, change-factor
conditioning, self-adaptive latent expansion, and numerical checks for
the identifiability theory behind them."""

__version__ = "0.1.0"
