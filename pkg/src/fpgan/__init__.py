"""GAN training against frozen multi-scale feature projections.

Real and generated images pass through a frozen backbone's feature pyramid
and fixed random mixing layers; a bank of spectral-normalized
discriminators supervises the projected levels. Includes the evaluation
suite (Fréchet/kernel distances, precision/recall, sliced Wasserstein) and
a desk-scale lab that numerically verifies the projected objective's
consistency property.
"""

__version__ = "0.1.0"
