"""Prediction-error estimators for denoising networks: Noise2Noise, SURE,
Noise2Void and Noise2Boosting on an encoder-decoder ReLU network with an
extractable pointwise linear representation."""

__version__ = "0.1.0"
