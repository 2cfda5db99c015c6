"""Bayesian hypernetwork meta-learning for few-shot classification.

A self-contained tensor engine (reverse- and forward-mode derivatives) plus
the models built on it: MAML and HyperMAML baselines and their Bayesian
extension where a hypernetwork maps each support set to a posterior over
classifier-head weight updates (diagonal Gaussian or conditional continuous
normalizing flow).
"""

from ._kernels import backend as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
