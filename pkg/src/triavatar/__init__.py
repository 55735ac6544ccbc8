"""Desk-scale animatable head avatars.

Two-stage pipeline: a person-specific tri-plane generative appearance model
trained adversarially from posed images (no expression tracking), then an
expression mapping network that steers the generator's latent space from a
64-dim expression code.
"""

__version__ = "0.1.0"
