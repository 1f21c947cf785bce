"""SV smoothing and the regularized two-cluster client selection (ClusFed)."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .aggregation import fedavg
from .errors import EmptySelectionError

# "offset": split iff cost <= N*sigma^2 - lam ; "scaled": cost <= (1 - lam)*N*sigma^2
THRESHOLDS = ("offset", "scaled")


@dataclass(frozen=True)
class SvLedger:
    smoothed: np.ndarray
    alpha: float = 0.3
    beta: float = 0.7

    def __post_init__(self):
        s = np.asarray(self.smoothed, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValueError("smoothed SV must be finite")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ValueError("alpha and beta must lie in [0, 1]")
        object.__setattr__(self, "smoothed", s)

    @classmethod
    def start(cls, n_clients: int, beta: float = 0.7, alpha: float | None = None,
              initial: float = 0.0) -> "SvLedger":
        """Fresh ledger; ``alpha`` defaults to ``1 - beta``."""
        if alpha is None:
            alpha = 1.0 - beta
        return cls(np.full(n_clients, float(initial)), alpha, beta)


def update_ledger(ledger: SvLedger, sv_t) -> SvLedger:
    """sv_bar_t = alpha * sv_bar_{t-1} + beta * sv_t, elementwise."""
    sv_t = np.asarray(sv_t, dtype=np.float64)
    if sv_t.shape != ledger.smoothed.shape:
        raise ValueError(f"SV vector has shape {sv_t.shape}, ledger {ledger.smoothed.shape}")
    return replace(ledger, smoothed=ledger.alpha * ledger.smoothed + ledger.beta * sv_t)


class PrefixCost:
    """O(1) within-segment sum of squared deviations on a sorted vector.

    Positions are 1-based and inclusive, matching C(i, j).
    """

    def __init__(self, sorted_values):
        v = np.asarray(sorted_values, dtype=np.float64)
        self.n = v.size
        self.s1 = np.concatenate([[0.0], np.cumsum(v)])
        self.s2 = np.concatenate([[0.0], np.cumsum(v * v)])

    def __call__(self, i: int, j: int) -> float:
        if not 1 <= i <= j <= self.n:
            raise ValueError(f"invalid segment ({i}, {j}) for n={self.n}")
        k = j - i + 1
        s = self.s1[j] - self.s1[i - 1]
        q = self.s2[j] - self.s2[i - 1]
        return max(q - s * s / k, 0.0)


def cluster_cost(sorted_values, i: int, j: int) -> float:
    return PrefixCost(sorted_values)(i, j)


def sort_clients(sv_bar) -> np.ndarray:
    """Client ids by ascending smoothed SV, ties by lower id."""
    sv_bar = np.asarray(sv_bar, dtype=np.float64)
    return np.lexsort((np.arange(sv_bar.size), sv_bar))


def best_split(sorted_values):
    """(j*, C(1,j*) + C(j*+1,N)) minimizing the two-cluster cost; ties -> smallest j."""
    cost = PrefixCost(sorted_values)
    n = cost.n
    best_j, best = 1, np.inf
    for j in range(1, n):
        c = cost(1, j) + cost(j + 1, n)
        if c < best:
            best_j, best = j, c
    return best_j, best


@dataclass(frozen=True)
class ClusFedSpec:
    lam: float = 0.0
    min_spread: float = 1e-9
    threshold: str = "offset"

    def __post_init__(self):
        if not -1 <= self.lam <= 1:
            raise ValueError("lambda must lie in [-1, 1]")
        if self.min_spread < 0:
            raise ValueError("min_spread must be non-negative")
        if self.threshold not in THRESHOLDS:
            raise ValueError(f"threshold must be one of {THRESHOLDS}")


def split_threshold(sv_bar, spec: ClusFedSpec) -> float:
    sv_bar = np.asarray(sv_bar, dtype=np.float64)
    total = float(np.sum((sv_bar - sv_bar.mean()) ** 2))  # N * sigma^2
    if spec.threshold == "offset":
        return total - spec.lam
    return (1.0 - spec.lam) * total


def clusfed(sv_bar, spec: ClusFedSpec = ClusFedSpec()) -> list[int]:
    """Return the selected client ids (sorted).

    Either everyone, or the high-SV side of the best 1-D two-means split when
    that split beats one cluster by the penalty ``lam``.
    """
    sv_bar = np.asarray(sv_bar, dtype=np.float64)
    n = sv_bar.size
    if n < 2:
        raise ValueError("clusfed needs at least two clients")
    everyone = list(range(n))
    if sv_bar.max() - sv_bar.min() < spec.min_spread:
        return everyone
    order = sort_clients(sv_bar)
    j_star, split_cost = best_split(sv_bar[order])
    if split_cost <= split_threshold(sv_bar, spec):
        return sorted(int(k) for k in order[j_star:])
    return everyone


def selected_global_model(updates, sample_counts, selected) -> np.ndarray:
    """FedAvg restricted to the selected clients."""
    selected = list(selected)
    if not selected:
        raise EmptySelectionError("no client selected")
    counts = np.asarray(sample_counts, dtype=np.float64)
    return fedavg([updates[k] for k in selected], counts[selected])
