"""Tensor-feature hallucination for few-shot classification.

Scratch autodiff tensor core with compiled conv kernels, the conditioner /
generator hallucinator networks, feature-dataset tooling, episodic
meta-training, and nearest-prototype evaluation.
"""

from .tensor import Tensor, backward, dtype_for, no_grad, zero_grads
from . import ops

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "dtype_for", "no_grad", "zero_grads", "ops"]
