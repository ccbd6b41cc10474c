"""Categorical and differential training objectives."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericDomainError, Tensor

DIFF_LOSS_KINDS = ("nad", "mse", "mae", "mse+ce_o", "mae+ce_o", "none")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 6.5
    eps: float = 1e-5
    K: int = 3
    diff_loss_kind: str = "nad"

    def __post_init__(self):
        if self.lam < 0:
            raise LossError(f"lambda must be >= 0, got {self.lam}")
        if self.eps <= 0:
            raise LossError(f"eps must be > 0, got {self.eps}")
        if int(self.K) != self.K or self.K < 1:
            raise LossError(f"K must be a positive integer, got {self.K}")
        if self.diff_loss_kind not in DIFF_LOSS_KINDS:
            raise LossError(f"unknown diff_loss_kind {self.diff_loss_kind!r}; "
                            f"choose from {', '.join(DIFF_LOSS_KINDS)}")


def _labels(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1)


def _const(values, like: Tensor) -> Tensor:
    return Tensor(np.asarray(values, dtype=like.data.dtype))


def cross_entropy(labels, probs: Tensor) -> Tensor:
    """Mean negative log-probability of the true class; labels in ``1..N_c``."""
    y = _labels(labels)
    N, C = probs.shape
    if len(y) != N:
        raise LossError(f"{len(y)} labels for {N} probability rows")
    if y.min(initial=1) < 1 or y.max(initial=1) > C:
        raise LossError(f"labels must lie in 1..{C}")
    sums = probs.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise LossError("probability rows must sum to 1")
    picked = probs[np.arange(N), y - 1]
    if np.any(picked.data <= 0):
        raise NumericDomainError("zero or negative probability at the true class")
    return ad.neg(ad.mean(ad.log(picked)))


def cross_entropy_logits(labels, logits: Tensor) -> Tensor:
    """Same value as ``cross_entropy(labels, softmax(logits))`` via log-softmax."""
    y = _labels(labels)
    N, C = logits.shape
    if len(y) != N:
        raise LossError(f"{len(y)} labels for {N} logit rows")
    if y.min(initial=1) < 1 or y.max(initial=1) > C:
        raise LossError(f"labels must lie in 1..{C}")
    return ad.neg(ad.mean(ad.log_softmax(logits, axis=1)[np.arange(N), y - 1]))


def _check_pairs(r: np.ndarray, r_hat: Tensor) -> None:
    if r.size == 0:
        raise LossError("empty pair set")
    if r_hat.shape != r.shape:
        raise LossError(f"{r.size} targets but predictions of shape {r_hat.shape}")


def nad(r, r_hat: Tensor, K: int, eps: float = 1e-5) -> Tensor:
    """Negative absolute-difference log-likelihood, distance clamped at 2K."""
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    _check_pairs(r, r_hat)
    u = ad.clip_max(ad.abs(ad.sub(_const(r, r_hat), r_hat)), 2 * K)
    ratio = ad.scale(u, -1.0 / (2 * K + eps))
    return ad.neg(ad.mean(ad.log(ad.add(ratio, 1.0))))


def regression_loss(r, r_hat: Tensor, kind: str = "mse") -> Tensor:
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    _check_pairs(r, r_hat)
    d = ad.sub(_const(r, r_hat), r_hat)
    if kind == "mse":
        return ad.mean(ad.mul(d, d))
    if kind == "mae":
        return ad.mean(ad.abs(d))
    raise LossError(f"unknown regression loss {kind!r}")


def ordinal_ce(r, r_hat: Tensor, K: int) -> Tensor:
    """Cross-entropy over the 2K+1 integer differences, logits -|r_hat - v|."""
    r = np.asarray(r).reshape(-1)
    if np.any(r != np.round(r)) or np.any(np.abs(r) > K):
        raise LossError(f"differential labels must be integers in [-{K}, {K}]")
    _check_pairs(r.astype(np.float64), r_hat)
    n = r.size
    candidates = np.arange(-K, K + 1, dtype=r_hat.data.dtype)
    spread = ad.broadcast_to(ad.reshape(r_hat, (n, 1)), (n, 2 * K + 1))
    dist = ad.abs(ad.sub(spread, Tensor(np.broadcast_to(candidates, (n, 2 * K + 1)).copy())))
    logp = ad.log_softmax(ad.neg(dist), axis=1)
    target = r.astype(np.int64) + K
    return ad.neg(ad.mean(logp[np.arange(n), target]))


def differential_loss(r, r_hat: Tensor, cfg: LossConfig) -> Tensor | None:
    kind = cfg.diff_loss_kind
    if kind == "none":
        return None
    if kind == "nad":
        return nad(r, r_hat, cfg.K, cfg.eps)
    if kind in ("mse", "mae"):
        return regression_loss(r, r_hat, kind)
    base = regression_loss(r, r_hat, kind.split("+")[0])
    return ad.add(base, ordinal_ce(r, r_hat, cfg.K))


def total_loss(loss_cat, loss_diff, lam: float):
    """``loss_cat + lam * loss_diff``; works on Tensors or plain floats."""
    if loss_diff is None:
        return loss_cat
    if isinstance(loss_cat, Tensor) or isinstance(loss_diff, Tensor):
        return ad.add(loss_cat, ad.scale(ad._as_tensor(loss_diff), lam))
    return loss_cat + lam * loss_diff


# --------------------------------------------------------------- loss curves


def loss_curve_table(K: int = 3, eps: float = 1e-5, step: float = 0.01,
                     d_max: float | None = None) -> np.ndarray:
    """Per-pair losses at r = 0 as a function of d = r - r_hat.

    Returns columns ``d, mse, mae, ce_o, nad`` for d in [-d_max, d_max]
    (default d_max = 2K).
    """
    if step <= 0:
        raise LossError("step must be positive")
    d_max = 2 * K if d_max is None else d_max
    n = int(round(2 * d_max / step)) + 1
    d = np.round(np.linspace(-d_max, d_max, n), 10) + 0.0  # no negative zeros
    rows = np.empty((n, 5))
    rows[:, 0] = d
    zero = np.zeros(1, dtype=np.int64)
    with ad.default_dtype(np.float64):
        for k in range(n):
            r_hat = Tensor([-d[k]])
            rows[k, 1:] = (regression_loss(zero, r_hat, "mse").item(),
                           regression_loss(zero, r_hat, "mae").item(),
                           ordinal_ce(zero, r_hat, K).item(),
                           nad(zero, r_hat, K, eps).item())
    return rows + 0.0


def loss_curve_csv(rows: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("d,mse,mae,ce_o,nad\n")
    for row in rows:
        buf.write(",".join(f"{v:.6f}" for v in row) + "\n")
    return buf.getvalue()
