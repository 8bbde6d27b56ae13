"""Learned perturbation sets.

Trains a conditional VAE on pairs of clean and perturbed examples, turns
the decoder image of a latent ball into a perturbation set, and builds on
that set: certified containment bounds, latent-space adversarial training,
and randomized smoothing in latent space.
"""

__version__ = "0.1.0"
