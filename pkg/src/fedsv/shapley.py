"""Shapley values of coalition games: exact enumeration and sampling estimators.

Coalitions are encoded as integer bitmasks (bit ``i`` set <=> player ``i`` is a
member). Every estimator only talks to a game through ``value`` /
``value_batch``, so the same code serves toy games in tests and the federated
value function used by the server.

Estimators collect one row of marginals per sampled permutation and reduce in
row order, so results do not depend on evaluation order.
"""
from __future__ import annotations

import itertools
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .aggregation import fedavg
from .errors import CapacityError, ShapeError
from .model_core import accuracy

EXACT_MAX_PLAYERS = 20
MASK_MAX_PLAYERS = 62

METHODS = ("exact", "mc", "antithetic", "antithetic-truncated", "stratified")
ALLOCATIONS = ("uniform", "proportional-to-range")


def coalition_mask(players) -> int:
    mask = 0
    for p in players:
        mask |= 1 << int(p)
    return mask


def coalition_members(mask: int, n_players: int) -> list[int]:
    return [i for i in range(n_players) if mask >> i & 1]


class CoalitionGame(ABC):
    """A value function over subsets of ``range(n_players)``."""

    n_players: int

    @abstractmethod
    def value(self, coalition: int) -> float:
        ...

    def value_batch(self, coalitions) -> np.ndarray:
        return np.array([self.value(int(c)) for c in np.ravel(coalitions)],
                        dtype=np.float64).reshape(np.shape(coalitions))

    @property
    def grand_coalition(self) -> int:
        return (1 << self.n_players) - 1


class TableGame(CoalitionGame):
    """Game given by an explicit table of 2**n values indexed by bitmask."""

    def __init__(self, n_players: int, table):
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (1 << n_players,):
            raise ShapeError(f"table needs {1 << n_players} entries, got {table.shape}")
        self.n_players = n_players
        self.table = table

    def value(self, coalition):
        return float(self.table[coalition])

    def value_batch(self, coalitions):
        return self.table[np.asarray(coalitions, dtype=np.int64)]


class FunctionGame(CoalitionGame):
    """Wraps ``fn(frozenset_of_players) -> float``."""

    def __init__(self, n_players: int, fn):
        self.n_players = n_players
        self.fn = fn

    def value(self, coalition):
        return float(self.fn(frozenset(coalition_members(coalition, self.n_players))))


@dataclass(frozen=True)
class SvEstimate:
    values: np.ndarray
    samples_used: int
    method: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite Shapley estimate")


@dataclass(frozen=True)
class ConfidenceSpec:
    """(epsilon, delta) target plus whichever variance information is known.

    ``variance_bound`` bounds Var[f_i(pi)] (plain MC); ``r_max`` and
    ``strata`` bound the stratified estimator.
    """
    epsilon: float
    delta: float
    variance_bound: float | None = None
    r_max: float | None = None
    strata: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


def _exact(x) -> Fraction:
    # decimal literal of the float, so 0.05 means 1/20 and not its binary neighbour
    return Fraction(repr(float(x)))


def required_samples(spec: ConfidenceSpec, method: str = "mc") -> int:
    """Permutation count that meets (epsilon, delta) via Chebyshev.

    mc:          m >= Var / (delta * eps^2)
    stratified:  m >= d * r_max^2 / (4 * delta * eps^2)
    """
    eps, delta = _exact(spec.epsilon), _exact(spec.delta)
    if method == "mc":
        if spec.variance_bound is None:
            raise ValueError("mc bound needs variance_bound")
        bound = _exact(spec.variance_bound) / (delta * eps * eps)
    elif method == "stratified":
        if spec.r_max is None or spec.strata is None:
            raise ValueError("stratified bound needs r_max and strata")
        bound = spec.strata * _exact(spec.r_max) ** 2 / (4 * delta * eps * eps)
    else:
        raise ValueError(f"no sample-size bound for method {method!r}")
    return max(1, math.ceil(bound))


# -------------------------------------------------------------------- exact

def exact_shapley(game: CoalitionGame) -> SvEstimate:
    """Subset-enumeration Shapley value; O(2^N) value calls."""
    n = game.n_players
    if n > EXACT_MAX_PLAYERS:
        raise CapacityError(f"exact Shapley limited to {EXACT_MAX_PLAYERS} players, got {n}")
    masks = np.arange(1 << n, dtype=np.int64)
    v = game.value_batch(masks)
    sizes = np.zeros(masks.size, dtype=np.int64)
    for i in range(n):
        sizes += (masks >> i) & 1
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = np.array([fact[s] * fact[n - s - 1] / fact[n] if s < n else 0.0
                       for s in range(n + 1)])
    values = np.empty(n)
    for i in range(n):
        without = masks[(masks >> i & 1) == 0]
        values[i] = np.sum(weight[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return SvEstimate(values, samples_used=int(masks.size), method="exact")


# --------------------------------------------------------- permutation scans

def reverse_permutation(perm) -> np.ndarray:
    return np.asarray(perm)[::-1].copy()


def truncated_scan(game: CoalitionGame, perm, tol_trunc: float = 0.0, *,
                   v_empty: float | None = None, v_full: float | None = None,
                   max_positions: int | None = None) -> np.ndarray:
    """Marginals f_i(perm) for every player, walking ``perm`` left to right.

    Once the prefix value is within ``tol_trunc`` (strictly) of the grand
    coalition value, every remaining player gets marginal 0 without any
    further value calls. ``max_positions`` scans only the first d positions.
    """
    if tol_trunc < 0:
        raise ValueError("tol_trunc must be non-negative")
    n = game.n_players
    marg = np.zeros(n)
    prev = game.value(0) if v_empty is None else v_empty
    if tol_trunc > 0 and v_full is None:
        v_full = game.value(game.grand_coalition)
    limit = n if max_positions is None else min(n, max_positions)
    mask = 0
    for pos in range(limit):
        if tol_trunc > 0 and abs(v_full - prev) < tol_trunc:
            break
        p = int(perm[pos])
        mask |= 1 << p
        cur = game.value(mask)
        marg[p] = cur - prev
        prev = cur
    return marg


def _scan_all(game, perms, tol_trunc, max_positions) -> np.ndarray:
    """One row of marginals per permutation; ν(∅) (and ν(S) if truncating) once."""
    v_empty = game.value(0)
    v_full = game.value(game.grand_coalition) if tol_trunc > 0 else None
    rows = np.empty((len(perms), game.n_players))
    for r, perm in enumerate(perms):
        rows[r] = truncated_scan(game, perm, tol_trunc, v_empty=v_empty, v_full=v_full,
                                 max_positions=max_positions)
    return rows


def mc_shapley(game: CoalitionGame, m: int, seed=None, *, tol_trunc: float = 0.0,
               enumerate_all: bool = False, max_positions: int | None = None) -> SvEstimate:
    """Plain Monte Carlo over ``m`` uniform permutations.

    With ``enumerate_all`` every one of the N! orders is scanned once (``m``
    is ignored), which reproduces the exact value.
    """
    n = game.n_players
    if enumerate_all:
        perms = [np.array(p) for p in itertools.permutations(range(n))]
    else:
        if m < 1:
            raise ValueError("m must be >= 1")
        rng = np.random.default_rng(seed)
        perms = [rng.permutation(n) for _ in range(m)]
    rows = _scan_all(game, perms, tol_trunc, max_positions)
    return SvEstimate(rows.mean(axis=0), samples_used=len(perms), method="mc")


def antithetic_shapley(game: CoalitionGame, m: int, seed=None, *, tol_trunc: float = 0.0,
                       max_positions: int | None = None) -> SvEstimate:
    """Monte Carlo with each sampled order paired with its reversal.

    ``m`` counts permutations including the reversed ones, so it must be even.
    A positive ``tol_trunc`` gives the truncated antithetic variant.
    """
    if m < 2 or m % 2:
        raise ValueError(f"antithetic sampling needs an even m >= 2, got {m}")
    n = game.n_players
    rng = np.random.default_rng(seed)
    perms = []
    for _ in range(m // 2):
        p = rng.permutation(n)
        perms.append(p)
        perms.append(reverse_permutation(p))
    rows = _scan_all(game, perms, tol_trunc, max_positions)
    method = "antithetic-truncated" if tol_trunc > 0 else "antithetic"
    return SvEstimate(rows.mean(axis=0), samples_used=m, method=method)


def antithetic_pairs(game: CoalitionGame, m: int, seed=None) -> np.ndarray:
    """Per-pair averages Y = (f(pi) + f(pi')) / 2, shape (m/2, N)."""
    if m < 2 or m % 2:
        raise ValueError("m must be even")
    n = game.n_players
    rng = np.random.default_rng(seed)
    perms = []
    for _ in range(m // 2):
        p = rng.permutation(n)
        perms += [p, reverse_permutation(p)]
    rows = _scan_all(game, perms, 0.0, None)
    return 0.5 * (rows[0::2] + rows[1::2])


# --------------------------------------------------------------- stratified

def _uniform_allocation(m: int, d: int) -> np.ndarray:
    alloc = np.full(d, m // d, dtype=np.int64)
    alloc[: m % d] += 1
    return alloc


def _largest_remainder(total: int, shares) -> np.ndarray:
    shares = np.asarray(shares, dtype=np.float64)
    raw = total * shares / shares.sum()
    alloc = np.floor(raw).astype(np.int64)
    left = total - int(alloc.sum())
    order = np.lexsort((np.arange(len(raw)), -(raw - alloc)))
    alloc[order[:left]] += 1
    return alloc


def _stratum_samples(game, player, position, count, rng) -> np.ndarray:
    n = game.n_players
    others = np.array([j for j in range(n) if j != player], dtype=np.int64)
    bits = np.left_shift(np.int64(1), others)
    if position == 0:
        prefix_masks = np.zeros(count, dtype=np.int64)
    else:
        picks = np.argsort(rng.random((count, n - 1)), axis=1)[:, :position]
        prefix_masks = bits[picks].sum(axis=1)
    with_i = prefix_masks | np.int64(1 << player)
    return game.value_batch(with_i) - game.value_batch(prefix_masks)


def stratified_shapley(game: CoalitionGame, m: int, allocation: str = "uniform",
                       seed=None) -> SvEstimate:
    """Position-stratified estimator: one stratum per position of player i.

    Each player gets ``m`` marginal samples spread over the N positions. The
    per-position means are combined with equal weights 1/N. With
    ``proportional-to-range`` two pilot samples per stratum measure its range
    and the rest of the budget follows those ranges.
    """
    n = game.n_players
    d = n
    if allocation not in ALLOCATIONS:
        raise ValueError(f"unknown allocation {allocation!r}")
    if m < d:
        raise ValueError(f"stratified sampling needs m >= {d} (one per stratum), got {m}")
    if n > MASK_MAX_PLAYERS:
        raise CapacityError(f"stratified sampling supports at most {MASK_MAX_PLAYERS} players")
    rng = np.random.default_rng(seed)
    values = np.empty(n)
    for i in range(n):
        if allocation == "uniform" or m < 2 * d:
            alloc = _uniform_allocation(m, d)
            means = [_stratum_samples(game, i, l, int(alloc[l]), rng).mean() for l in range(d)]
        else:
            pilot = [_stratum_samples(game, i, l, 2, rng) for l in range(d)]
            ranges = np.array([np.ptp(p) for p in pilot])
            extra = (_largest_remainder(m - 2 * d, ranges) if ranges.sum() > 0
                     else _uniform_allocation(m - 2 * d, d))
            means = []
            for l in range(d):
                more = _stratum_samples(game, i, l, int(extra[l]), rng) if extra[l] else []
                means.append(np.concatenate([pilot[l], more]).mean())
        values[i] = np.mean(means)
    return SvEstimate(values, samples_used=m, method="stratified")


# ----------------------------------------------------------- FL value game

class FLValueFunction(CoalitionGame):
    """Validation accuracy of the n_k-weighted average of a coalition's updates.

    The empty coalition is worth the accuracy of the previous global model.
    Values are memoized per coalition bitmask; call ``clear_cache`` between
    rounds (or build a fresh instance).
    """

    def __init__(self, updates, sample_counts, previous_global, arch, validation,
                 memoize: bool = True):
        self.updates = [np.asarray(u, dtype=np.float64) for u in updates]
        self.sample_counts = np.asarray(sample_counts, dtype=np.float64)
        if len(self.updates) != self.sample_counts.size or not self.updates:
            raise ShapeError("need one sample count per update")
        p = self.updates[0].shape
        if any(u.shape != p for u in self.updates) or np.shape(previous_global) != p:
            raise ShapeError("updates and previous global model differ in length")
        if len(validation) == 0:
            raise ValueError("validation set is empty")
        self.n_players = len(self.updates)
        self.previous_global = np.asarray(previous_global, dtype=np.float64)
        self.arch = arch
        self.validation = validation
        self.memoize = memoize
        self._cache: dict[int, float] = {}
        self.evaluations = 0

    def coalition_model(self, coalition: int) -> np.ndarray:
        if coalition == 0:
            return self.previous_global
        members = coalition_members(coalition, self.n_players)
        return fedavg([self.updates[k] for k in members], self.sample_counts[members])

    def value(self, coalition):
        coalition = int(coalition)
        if self.memoize:
            hit = self._cache.get(coalition)
            if hit is not None:
                return hit
        self.evaluations += 1
        v = accuracy(self.coalition_model(coalition), self.arch, self.validation)
        if self.memoize:
            v = self._cache.setdefault(coalition, v)
        return v

    def clear_cache(self):
        self._cache.clear()


def fl_value(value_fn: FLValueFunction, coalition) -> float:
    """ν for a coalition given as a bitmask or an iterable of client ids."""
    if not isinstance(coalition, (int, np.integer)):
        coalition = coalition_mask(coalition)
    return value_fn.value(int(coalition))


# ----------------------------------------------------------------- dispatch

@dataclass(frozen=True)
class SvConfig:
    method: str = "antithetic"
    m: int | None = 20
    confidence: ConfidenceSpec | None = None
    tol_trunc: float = 0.01
    seed: int = 0
    allocation: str = "uniform"
    perm_length: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown Shapley method {self.method!r}")
        if self.m is None and self.confidence is None and self.method != "exact":
            raise ValueError("give either m or a confidence spec")
        if self.tol_trunc < 0:
            raise ValueError("tol_trunc must be non-negative")

    def sample_count(self) -> int:
        if self.confidence is None:
            return int(self.m)
        kind = "stratified" if self.method == "stratified" else "mc"
        return required_samples(self.confidence, kind)


def estimate_sv(game: CoalitionGame, cfg: SvConfig, seed=None) -> SvEstimate:
    """Run the configured estimator. Defaults to truncated antithetic MC.

    ``seed`` overrides ``cfg.seed`` (the orchestrator passes a per-round stream).
    """
    seed = cfg.seed if seed is None else seed
    if cfg.method == "exact":
        return exact_shapley(game)
    m = cfg.sample_count()
    if cfg.method == "mc":
        est = mc_shapley(game, m, seed, tol_trunc=cfg.tol_trunc, max_positions=cfg.perm_length)
        return est
    if cfg.method in ("antithetic", "antithetic-truncated"):
        m += m % 2
        return antithetic_shapley(game, m, seed, tol_trunc=cfg.tol_trunc,
                                  max_positions=cfg.perm_length)
    return stratified_shapley(game, max(m, game.n_players), cfg.allocation, seed)
