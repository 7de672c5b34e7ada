from .layers import (ConfigurationError, Layer, LayerSpec, layer_forward, LEAKY_SLOPE,
                     BN_MOMENTUM, BN_EPS, INIT_STD)
from .optim import Adam, NonFiniteGradientError, OptimizerState, adam_step
from .spectral import SpectralState, converge, power_iterate, spectral_normalize, top_singular_value

__all__ = [
    "Adam", "ConfigurationError", "Layer", "LayerSpec", "NonFiniteGradientError",
    "OptimizerState", "SpectralState", "adam_step", "converge", "layer_forward", "power_iterate",
    "spectral_normalize", "top_singular_value", "LEAKY_SLOPE", "BN_MOMENTUM", "BN_EPS", "INIT_STD",
]
