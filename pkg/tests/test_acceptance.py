"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The desk-scale runs (criteria 6, 7 and 9) share one module-scoped grid of
10 seeds so every run happens once.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from fedsv.attacks import AttackSpec
from fedsv.cli import execute
from fedsv.model_core import LOGISTIC, MLP, Architecture, loss_and_grad
from fedsv.orchestrator import DefenseConfig, desk_scale_config, detection_report, run
from fedsv.selection import ClusFedSpec, clusfed
from fedsv.shapley import (ConfidenceSpec, FunctionGame, TableGame, antithetic_shapley,
                           exact_shapley, mc_shapley, required_samples, stratified_shapley)

SEEDS = range(10)
THRESHOLD = 0.8


# ----------------------------------------------------------- estimators

def test_criterion_1_shapley_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_enum = 0.0
    hits = total = 0
    for g in range(100):
        n = int(rng.integers(3, 9))
        game = TableGame(n, rng.random(1 << n))
        exact = exact_shapley(game).values
        worst_enum = max(worst_enum, np.max(np.abs(mc_shapley(game, 0, enumerate_all=True).values - exact)))
        for est in (antithetic_shapley(game, 2000, seed=g),
                    stratified_shapley(game, 2000, "uniform", seed=g)):
            err = np.abs(est.values - exact)
            hits += int(np.sum(err <= 0.05))
            total += n
    elapsed = time.perf_counter() - t0
    share = hits / total
    ok = worst_enum <= 1e-9 and share >= 0.95 and elapsed < 60
    verdict(1, ok, f"enum max err {worst_enum:.1e}, within eps {share:.3f}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_variance_reduction(verdict):
    t0 = time.perf_counter()
    game = TableGame(5, FunctionGame(5, lambda s: float(len(s) ** 2)).value_batch(np.arange(32)))
    m = 10
    mc = np.array([mc_shapley(game, m, s).values for s in range(200)]).var(axis=0)
    anti = np.array([antithetic_shapley(game, m, s).values for s in range(200)]).var(axis=0)
    strat = np.array([stratified_shapley(game, m, "uniform", s).values for s in range(200)]).var(axis=0)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(anti <= mc) and np.all(strat <= mc) and elapsed < 30)
    verdict(2, ok, f"var mc {mc.max():.3f} anti {anti.max():.3f} strat {strat.max():.3f}, "
                   f"{elapsed:.1f}s")
    assert ok


def test_criterion_3_sample_size_bounds(verdict):
    a = required_samples(ConfidenceSpec(0.1, 0.05, variance_bound=1.0), "mc")
    b = required_samples(ConfidenceSpec(0.05, 0.05, r_max=0.2, strata=10), "stratified")
    ok = (a, b) == (2000, 800)
    verdict(3, ok, f"mc m={a}, stratified m={b}")
    assert ok


def brute_force_selection(sv, lam):
    n = len(sv)
    order = sorted(range(n), key=lambda k: (sv[k], k))
    vals = [sv[k] for k in order]

    def cost(seg):
        mu = sum(seg) / len(seg)
        return sum((v - mu) ** 2 for v in seg)

    best = min((cost(vals[:j]) + cost(vals[j:]), j) for j in range(1, n))
    if best[0] <= cost(vals) - lam:
        return sorted(order[best[1]:])
    return list(range(n))


def test_criterion_4_clusfed_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(3, 21))
        lam = float(rng.choice([-0.5, 0.0, 0.5]))
        sv = list(rng.normal(scale=rng.choice([0.05, 0.5, 2.0]), size=n))
        mismatches += clusfed(sv, ClusFedSpec(lam=lam)) != brute_force_selection(sv, lam)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    verdict(4, ok, f"{mismatches} mismatches in 1000, {elapsed:.1f}s")
    assert ok


def test_criterion_5_gradient_check(verdict):
    worst = 0.0
    for arch in (Architecture(LOGISTIC, 6, 4), Architecture(MLP, 6, 4, hidden_dim=5)):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            p = rng.normal(scale=0.5, size=arch.num_params)
            x = rng.normal(size=(8, 6))
            y = rng.integers(0, 4, size=8)
            _, g = loss_and_grad(p, arch, x, y)
            fd = np.empty_like(p)
            for k in range(p.size):
                e = np.zeros_like(p)
                e[k] = 1e-5
                fd[k] = (loss_and_grad(p + e, arch, x, y)[0] - loss_and_grad(p - e, arch, x, y)[0]) / 2e-5
            rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
            worst = max(worst, rel.max())
    ok = worst < 1e-4
    verdict(5, ok, f"max relative error {worst:.2e}")
    assert ok


# ------------------------------------------------------- desk-scale grid

FLIP = AttackSpec("sign_flip")


def cell(seed, n_mal, defense, attack=FLIP):
    return replace(desk_scale_config(), master_seed=seed, num_malicious=n_mal, attack=attack,
                   defense=DefenseConfig(defense))


@pytest.fixture(scope="module")
def desk_grid():
    t0 = time.perf_counter()
    out = {"clean": {}, "runs": {}}
    for seed in SEEDS:
        out["clean"][seed] = run(cell(seed, 0, "fedavg", AttackSpec())).final_accuracy
        for key in [(8, "fedsv"), (8, "fedavg"), (11, "fedsv"), (11, "coord_median"),
                    (11, "multi_krum")]:
            out["runs"][key + (seed,)] = run(cell(seed, *key))
        out["runs"][(0, "fedsv", seed)] = run(cell(seed, 0, "fedsv", AttackSpec()))
    out["elapsed"] = time.perf_counter() - t0
    return out


def meets(grid, key, seed):
    return grid["runs"][key + (seed,)].final_accuracy >= THRESHOLD * grid["clean"][seed]


@pytest.mark.slow
def test_criterion_6_desk_scale_robustness(desk_grid, verdict):
    count = {k: sum(meets(desk_grid, k, s) for s in SEEDS)
             for k in [(8, "fedsv"), (8, "fedavg"), (11, "fedsv"), (11, "coord_median"),
                       (11, "multi_krum")]}
    ok = (count[(8, "fedsv")] >= 9 and 10 - count[(8, "fedavg")] >= 9
          and count[(11, "fedsv")] >= 8 and 10 - count[(11, "coord_median")] >= 8
          and 10 - count[(11, "multi_krum")] >= 8 and desk_grid["elapsed"] < 600)
    verdict(6, ok, f"40%: fedsv meets {count[(8, 'fedsv')]}/10, fedavg fails "
                   f"{10 - count[(8, 'fedavg')]}/10; 55%: fedsv meets {count[(11, 'fedsv')]}/10, "
                   f"median fails {10 - count[(11, 'coord_median')]}/10, multi-krum fails "
                   f"{10 - count[(11, 'multi_krum')]}/10; grid {desk_grid['elapsed']:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_detection(desk_grid, verdict):
    good = 0
    for s in SEEDS:
        rep = detection_report(desk_grid["runs"][(8, "fedsv", s)], from_round=10)
        good += rep.recall == 1.0 and rep.precision >= 0.9
    ok = good >= 8
    verdict(7, ok, f"recall 1 and precision >= 0.9 from round 10 in {good}/10 seeds")
    assert ok


@pytest.mark.slow
def test_criterion_8_determinism(tmp_path, verdict):
    same = []
    for i, cfg in enumerate([cell(3, 8, "fedsv"), cell(4, 11, "multi_krum"),
                             cell(5, 0, "fedavg", AttackSpec())]):
        a, b = tmp_path / f"{i}a.csv", tmp_path / f"{i}b.csv"
        execute(cfg, a)
        execute(cfg, b)
        same.append(a.read_bytes() == b.read_bytes())
    ok = all(same)
    verdict(8, ok, f"byte-identical metrics files for {sum(same)}/{len(same)} cells")
    assert ok


@pytest.mark.slow
def test_criterion_9_no_attack_neutrality(desk_grid, verdict):
    diffs = np.array([desk_grid["runs"][(0, "fedsv", s)].final_accuracy - desk_grid["clean"][s]
                      for s in SEEDS])
    ok = bool(np.all(np.abs(diffs) <= 0.02))
    verdict(9, ok, f"fedsv - fedavg per seed: mean {100 * diffs.mean():+.2f}pp, "
                   f"worst {100 * diffs[np.argmax(np.abs(diffs))]:+.2f}pp")
    assert ok
