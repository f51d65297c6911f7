"""Training objectives: MSE, cross-entropy, Tukey biweight with a per-batch
robust scale, the label-augmentation mixture and the multi-task loss.

Gradients are returned with respect to the predictions; the Tukey threshold
``k`` is treated as a constant during backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAR_TO_SIGMA = 0.6745
TUKEY_C = 4.685
K_FLOOR = 1e-6


def _check_k(k):
    if not np.all(np.asarray(k) > 0):
        raise ValueError(f"Tukey threshold must be positive, got {k}")


def tukey(r, k):
    """Tukey biweight: ``k²/6 [1 - (1 - (r/k)²)³]`` inside ``|r| <= k``, ``k²/6`` outside."""
    _check_k(k)
    r = np.asarray(r, dtype=np.float64)
    u = 1.0 - (r / k) ** 2
    inside = np.abs(r) <= k
    return np.where(inside, k * k / 6.0 * (1.0 - u ** 3), k * k / 6.0)


def tukey_grad(r, k):
    """``d tukey / d r``: ``r (1 - (r/k)²)²`` inside, exactly 0 outside."""
    _check_k(k)
    r = np.asarray(r, dtype=np.float64)
    u = 1.0 - (r / k) ** 2
    return np.where(np.abs(r) <= k, r * u * u, 0.0)


@dataclass(frozen=True)
class RobustScale:
    mar: float
    sigma: float
    k: float


def robust_scale(residuals, k_floor: float = K_FLOOR) -> RobustScale:
    """Median absolute residual and the Tukey threshold ``k = 4.685 * MAR / 0.6745``.

    Residuals are taken as already centred, so MAR is the median of ``|r|``
    (not the deviation about the median). ``k`` is floored at ``k_floor``.
    """
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("robust_scale needs at least one residual")
    mar = float(np.median(np.abs(r)))
    sigma = mar / MAR_TO_SIGMA
    return RobustScale(mar, sigma, max(TUKEY_C * sigma, k_floor))


def mse(pred, target, return_grad: bool = False):
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    if diff.size == 0:
        raise ValueError("empty batch")
    value = float(np.mean(diff ** 2))
    if return_grad:
        return value, 2.0 * diff / diff.size
    return value


@dataclass
class BatchLossReport:
    """Loss value and bookkeeping for one label-augmentation batch."""

    total: float
    dft_term: float
    eip_term: float
    alpha: float
    mar: float
    sigma: float
    k: float
    rejected: int
    used: int
    used_mask: np.ndarray
    grad_dft: np.ndarray
    grad_eip: np.ndarray

    @property
    def n_eip(self) -> int:
        return self.rejected + self.used


def la_loss(dft_pred, dft_target, eip_pred, eip_target, alpha: float, *, k: float | None = None,
            eip_loss: str = "tukey", k_floor: float = K_FLOOR) -> BatchLossReport:
    """MSE on DFT-labeled instances plus ``alpha`` times mean Tukey loss on EIP-labeled ones.

    ``k`` comes from :func:`robust_scale` on the union of both batches'
    residuals unless given explicitly. ``eip_loss="mse"`` swaps the Tukey term
    for a squared error (ablation); rejection is still counted against ``k``.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if eip_loss not in ("tukey", "mse"):
        raise ValueError(f"unknown EIP loss {eip_loss!r}")
    dft_pred = np.asarray(dft_pred, dtype=np.float64).ravel()
    eip_pred = np.asarray(eip_pred, dtype=np.float64).ravel()
    r_dft = np.asarray(dft_target, dtype=np.float64).ravel() - dft_pred
    r_eip = np.asarray(eip_target, dtype=np.float64).ravel() - eip_pred
    if r_dft.size == 0 and r_eip.size == 0:
        raise ValueError("la_loss needs at least one DFT or EIP instance")
    scale = robust_scale(np.concatenate([r_dft, r_eip]), k_floor)
    if k is not None:
        _check_k(k)
        scale = RobustScale(scale.mar, scale.sigma, float(k))

    dft_term, grad_dft = 0.0, np.zeros_like(r_dft)
    if r_dft.size:
        dft_term = float(np.mean(r_dft ** 2))
        grad_dft = -2.0 * r_dft / r_dft.size

    eip_term, grad_eip = 0.0, np.zeros_like(r_eip)
    inside = np.abs(r_eip) <= scale.k
    if r_eip.size:
        if eip_loss == "tukey":
            eip_term = float(np.mean(tukey(r_eip, scale.k)))
            grad_eip = -alpha * tukey_grad(r_eip, scale.k) / r_eip.size
            used_mask = inside
        else:
            eip_term = float(np.mean(r_eip ** 2))
            grad_eip = -alpha * 2.0 * r_eip / r_eip.size
            used_mask = np.ones_like(inside)
    else:
        used_mask = inside
    used = int(used_mask.sum())
    return BatchLossReport(
        total=dft_term + alpha * eip_term,
        dft_term=dft_term,
        eip_term=eip_term,
        alpha=float(alpha),
        mar=scale.mar,
        sigma=scale.sigma,
        k=scale.k,
        rejected=int(r_eip.size - used),
        used=used,
        used_mask=used_mask,
        grad_dft=grad_dft,
        grad_eip=grad_eip,
    )


def mp_loss(preds, targets, scale=None, return_grad: bool = False):
    """Mean squared error over an ``n × |P|`` table of per-EIP energies.

    ``scale`` (length ``|P|``) optionally divides each column's residual,
    which standardizes heads with very different energy scales.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2:
        raise ValueError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    w = np.ones(preds.shape[1]) if scale is None else 1.0 / np.asarray(scale, dtype=np.float64)
    diff = (preds - targets) * w
    value = float(np.mean(diff ** 2))
    if return_grad:
        return value, 2.0 * diff * w / diff.size
    return value


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels, return_grad: bool = False):
    """Mean negative log-softmax of the true class (max-subtracted)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if logits.ndim != 2 or len(labels) != len(logits):
        raise ValueError("logits must be (B, K) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1] - 1}]")
    lsm = log_softmax(logits)
    rows = np.arange(len(labels))
    value = float(-lsm[rows, labels].mean())
    if return_grad:
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        return value, grad / len(labels)
    return value
