"""Discrepancy-conditioned diffusion for lesion segmentation.

Two autoencoder ensembles (one trained on every slice, one on healthy slices
only) give pixel-wise inter/intra discrepancy maps; a conditional denoising
diffusion model generates the lesion mask from the image plus those maps.
"""

__version__ = "0.1.0"
