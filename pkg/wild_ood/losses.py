"""
Losses Module for Wild OOD
Cross-entropy, energy score, sigmoid OOD losses, hinge-head losses and MSP.

Every function accepts a single logit vector or an (N, K) batch. Batched
calls return per-sample values; averaging is left to the caller. All
exponentials go through scipy's shift-stabilized log-sum-exp or the
sign-branched logistic function.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

ArrayLike = Union[float, np.ndarray]


@dataclass
class LossValue:
    """
    Loss value together with its gradients

    Attributes:
        value: Loss per sample (float for a single sample)
        grad_logits: dLoss/dLogits, same shape as the logits (None when the
            loss is not a function of the logits directly)
        grad_w: dLoss/dw for the energy slope, per sample
        grad_e: dLoss/dE for the energy score, per sample
    """
    value: ArrayLike
    grad_logits: Optional[np.ndarray] = None
    grad_w: Optional[ArrayLike] = None
    grad_e: Optional[ArrayLike] = None


def _scalar_or_array(values: np.ndarray, single: bool) -> ArrayLike:
    return float(values[0]) if single else values


def _as_logit_batch(logits) -> Tuple[np.ndarray, bool]:
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    return (logits[None, :] if single else logits), single


def cross_entropy(logits, y) -> LossValue:
    """
    Softmax cross-entropy -log softmax_y(logits)

    Args:
        logits: Length-K vector or (N, K) matrix
        y: Class index (or length-N array of indices)

    Returns:
        LossValue with value >= 0 and grad_logits = softmax - onehot(y)
    """
    batch, single = _as_logit_batch(logits)
    labels = np.atleast_1d(np.asarray(y))
    n_samples, n_classes = batch.shape
    if labels.shape[0] != n_samples:
        raise IndexError(f"expected {n_samples} labels, got {labels.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    labels = labels.astype(np.int64)

    log_probs = log_softmax(batch, axis=1)
    rows = np.arange(n_samples)
    value = -log_probs[rows, labels]
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0

    return LossValue(value=_scalar_or_array(value, single),
                     grad_logits=grad[0] if single else grad)


def energy_score(logits) -> ArrayLike:
    """
    Energy score E = log sum_j exp(logit_j) (the negated free energy)

    Args:
        logits: Length-K vector or (N, K) matrix

    Returns:
        E as a float, or one value per row
    """
    batch, single = _as_logit_batch(logits)
    return _scalar_or_array(logsumexp(batch, axis=1), single)


def energy_gradient(logits) -> np.ndarray:
    """Gradient of energy_score with respect to the logits (the softmax)"""
    logits = np.asarray(logits, dtype=np.float64)
    return softmax(logits, axis=-1)


def sigmoid(z: ArrayLike) -> ArrayLike:
    """Logistic function 1 / (1 + exp(-z)), stable for large |z|"""
    result = expit(np.asarray(z, dtype=np.float64))
    return float(result) if np.ndim(result) == 0 else result


def _sigmoid_pair(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # sigma(t) and sigma(t) * sigma(-t), both without cancellation
    s = expit(t)
    return s, s * expit(-t)


def ood_loss_in(energy: ArrayLike, w: float) -> LossValue:
    """
    Sigmoid loss for labelling a sample as in-distribution: sigma(w * E)

    Applied to wild samples, it is the objective being minimized.

    Args:
        energy: Energy score(s) E
        w: Learnable slope

    Returns:
        LossValue with grad_e = w s(1-s) and grad_w = E s(1-s)
    """
    e = np.asarray(energy, dtype=np.float64)
    value, slope = _sigmoid_pair(w * e)
    return LossValue(value=_unwrap(value), grad_w=_unwrap(e * slope),
                     grad_e=_unwrap(w * slope))


def ood_loss_out(energy: ArrayLike, w: float) -> LossValue:
    """
    Sigmoid loss for labelling a sample as out-of-distribution: sigma(-w * E)

    Applied to ID samples, its mean is the constrained quantity.

    Args:
        energy: Energy score(s) E
        w: Learnable slope

    Returns:
        LossValue with grad_e = -w s(1-s) and grad_w = -E s(1-s)
    """
    e = np.asarray(energy, dtype=np.float64)
    value, slope = _sigmoid_pair(-w * e)
    return LossValue(value=_unwrap(value), grad_w=_unwrap(-e * slope),
                     grad_e=_unwrap(-w * slope))


def _unwrap(values: np.ndarray) -> ArrayLike:
    return float(values) if np.ndim(values) == 0 else values


def hinge_head_losses(g: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """
    Hinge losses on the OOD-head score g

    Args:
        g: Head score(s); large g means "outlier"

    Returns:
        (loss_in, loss_out) = (max(1 - g, 0), max(1 + g, 0))
    """
    g = np.asarray(g, dtype=np.float64)
    return _unwrap(np.maximum(1.0 - g, 0.0)), _unwrap(np.maximum(1.0 + g, 0.0))


def hinge_head_grads(g: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """
    Subgradients of hinge_head_losses with respect to g

    The subgradient at each kink is 0.

    Returns:
        (d loss_in / dg, d loss_out / dg)
    """
    g = np.asarray(g, dtype=np.float64)
    d_in = np.where(g < 1.0, -1.0, 0.0)
    d_out = np.where(g > -1.0, 1.0, 0.0)
    return _unwrap(d_in), _unwrap(d_out)


def msp_score(logits) -> ArrayLike:
    """
    Maximum softmax probability; higher means more in-distribution

    Args:
        logits: Length-K vector or (N, K) matrix

    Returns:
        MSP per sample
    """
    batch, single = _as_logit_batch(logits)
    return _scalar_or_array(softmax(batch, axis=1).max(axis=1), single)
