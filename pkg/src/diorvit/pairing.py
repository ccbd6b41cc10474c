"""Differential labels and the ordered pair set of a batch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SUCCEEDS = "succeeds"
APPROX = "approx"
PRECEDES = "precedes"


class PairingError(ValueError):
    pass


def _check_label(y: int, num_classes: int | None) -> None:
    if y < 1 or (num_classes is not None and y > num_classes):
        raise PairingError(f"label {y} outside 1..{num_classes}")


def differential_label(y_i: int, y_j: int, num_classes: int | None = None) -> int:
    """Ground-truth signed label difference ``y_i - y_j``."""
    _check_label(y_i, num_classes)
    _check_label(y_j, num_classes)
    return int(y_i) - int(y_j)


def ordering_relation(y_i: float, y_j: float, tau: float = 0.5) -> str:
    if tau <= 0:
        raise PairingError(f"tau must be positive, got {tau}")
    d = y_i - y_j
    if d > tau:
        return SUCCEEDS
    if d < -tau:
        return PRECEDES
    return APPROX


@dataclass(frozen=True)
class PairSet:
    """Ordered pairs (i, j), i != j, with r = y_i - y_j."""

    i: np.ndarray
    j: np.ndarray
    r: np.ndarray
    K: int
    tau: float = 0.5

    def __len__(self) -> int:
        return len(self.r)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.i.tolist(), self.j.tolist()))

    def relations(self) -> list[str]:
        return [ordering_relation(v, 0, self.tau) for v in self.r.tolist()]


def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Minuend/subtrahend indices, i ascending then j ascending (j != i)."""
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = ii != jj
    return ii[mask], jj[mask]


def enumerate_pairs(labels: Sequence[int], num_classes: int | None = None,
                    tau: float = 0.5) -> PairSet:
    y = np.asarray(labels, dtype=np.int64)
    if len(y) < 2:
        raise PairingError(f"need at least 2 samples to form pairs, got {len(y)}")
    if num_classes is None:
        num_classes = int(y.max())
    if y.min() < 1 or y.max() > num_classes:
        raise PairingError(f"labels must lie in 1..{num_classes}")
    i, j = pair_indices(len(y))
    return PairSet(i=i, j=j, r=y[i] - y[j], K=num_classes - 1, tau=tau)


def differential_features(F: Tensor, pairs: PairSet) -> Tensor:
    """``[B, D]`` features -> ``[|P|, D]`` rows of f_i - f_j in pair order."""
    n = F.shape[0]
    if len(pairs) and (pairs.i.max() >= n or pairs.j.max() >= n):
        raise PairingError(f"pair index out of range for {n} feature vectors")
    return ad.sub(F[pairs.i], F[pairs.j])
