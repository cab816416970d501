"""Pairwise ranking objectives and the MOS-regression baseline.

Scalar functions operate on floats/arrays for direct inspection; the ``*_t``
variants build the same expressions on the autodiff tape.
"""

import numpy as np

from . import autodiff as ad
from .data import ValidationError
from .model import pairwise_probability

P_CLAMP = 1e-7
LOSS_KINDS = ("fidelity", "cross_entropy_binary", "cross_entropy_soft", "mos_regression")
CLI_NAMES = {
    "fidelity": "fidelity",
    "xent-binary": "cross_entropy_binary",
    "xent-soft": "cross_entropy_soft",
    "mos": "mos_regression",
}


def _check_prob(p, what):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValidationError(f"{what} must lie in [0, 1]")
    return p


def _clamp(p_w):
    return np.clip(np.asarray(p_w, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)


def fidelity_loss(p, p_w):
    """Value of the fidelity loss on the closed square [0, 1]^2.

    The value is finite everywhere, so no clamp is needed here; the taped
    version used for training clamps p_w because the square root has an
    unbounded slope at 0.
    """
    p = _check_prob(p, "p")
    q = _check_prob(p_w, "p_w")
    out = 1.0 - np.sqrt(p * q) - np.sqrt((1.0 - p) * (1.0 - q))
    return float(out) if out.ndim == 0 else out


def cross_entropy_loss(label, p_w, binary=False):
    label = _check_prob(label, "label")
    if binary and np.any((label != 0) & (label != 1)):
        raise ValidationError("binary cross entropy needs labels in {0, 1}")
    q = _clamp(p_w)
    out = -(label * np.log(q) + (1.0 - label) * np.log1p(-q))
    return float(out) if out.ndim == 0 else out


def mos_regression_loss(f, target):
    out = (np.asarray(f, dtype=np.float64) - target) ** 2
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------------------------
# tape versions (per-sample vectors)

def fidelity_t(p, p_w):
    """p: ndarray of targets (constants); p_w: Tensor of predicted probabilities."""
    p = np.asarray(p, dtype=p_w.dtype)
    q = ad.clip(p_w, P_CLAMP, 1.0 - P_CLAMP)
    a = ad.mul(ad.sqrt(q), np.sqrt(p))
    b = ad.mul(ad.sqrt(ad.sub(1.0, q)), np.sqrt(1.0 - p))
    return ad.sub(ad.sub(1.0, a), b)


def cross_entropy_t(label, p_w):
    label = np.asarray(label, dtype=p_w.dtype)
    q = ad.clip(p_w, P_CLAMP, 1.0 - P_CLAMP)
    pos = ad.mul(ad.log(q), label)
    neg = ad.mul(ad.log(ad.sub(1.0, q)), 1.0 - label)
    return ad.scale(ad.add(pos, neg), -1.0)


def mos_regression_t(f, target):
    return ad.square(ad.sub(f, np.asarray(target, dtype=f.dtype)))


def pair_loss_t(kind, target, p_w):
    if kind == "fidelity":
        return fidelity_t(target, p_w)
    if kind in ("cross_entropy_binary", "cross_entropy_soft"):
        return cross_entropy_t(target, p_w)
    raise ValidationError(f"{kind!r} is not a pairwise loss")


def batch_loss(net, images, x_index, y_index, targets, kind, training=True, update_stats=True):
    """Mean per-sample loss over one mini-batch.

    ``images`` holds the distinct images of the batch (N, C, H, W); the i-th
    pair is (images[x_index[i]], images[y_index[i]]). For pairwise kinds
    ``targets`` are per-pair probabilities or labels. For ``mos_regression``
    they are per-image re-scaled scores, one per entry of ``images``.
    """
    if kind not in LOSS_KINDS:
        raise ValidationError(f"unknown loss kind {kind!r}")
    if len(x_index) == 0:
        raise ValidationError("empty batch")
    f, sigma = net.forward(images, training=training, update_stats=update_stats)
    if kind == "mos_regression":
        # both members of every pair contribute one regression sample
        members = np.concatenate([x_index, y_index])
        fm = ad.take(f, members)
        return ad.mean(mos_regression_t(fm, np.asarray(targets)[members]))
    p_w = pairwise_probability((ad.take(f, x_index), ad.take(sigma, x_index)),
                               (ad.take(f, y_index), ad.take(sigma, y_index)))
    return ad.mean(pair_loss_t(kind, targets, p_w))
