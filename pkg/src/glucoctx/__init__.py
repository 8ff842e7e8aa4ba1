"""Blood-glucose forecasting with context fused through a shared GP latent space."""

__version__ = "0.1.0"
