"""Subnetwork search in frozen random generative networks.

The package trains nothing but a binary mask: per-weight scores are
updated under a moment-matching loss and the top scoring fraction of
each layer is kept.  Dense training, pruning of trained models and
fine-tuning of found subnetworks share the same engine, so results are
directly comparable.  See the README for the experiment harness.
"""

from .tensor import (
    ShapeError,
    Tensor,
    add,
    assert_gradients_close,
    batchnorm,
    conv2d,
    finite_difference_gradient,
    gradients,
    matmul,
    mean,
    multiply,
    relu,
    reshape,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    upsample_nearest2x,
)
from .optim import AdamState, CosineSchedule, NonFiniteGradientError, adam_step, cosine_lr

__version__ = "0.1.0"
