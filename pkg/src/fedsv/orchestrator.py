"""Round loop for FedSV and the baseline aggregators, plus sweeps and reports.

Every random draw in a run comes from ``master_seed`` through a named
substream (see ``substream``), so client training, attacks, SV sampling and
data partitioning can each be replayed in isolation.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregation import AggregatorSpec, aggregate
from .attacks import AttackSpec, apply_attack
from .data import (PartitionSpec, load_idx, partition_noniid, split_validation,
                   train_test_blobs)
from .errors import DivergenceError, NotApplicableError
from .model_core import LOGISTIC, Architecture, Model, TrainConfig, evaluate, local_train
from .selection import ClusFedSpec, SvLedger, clusfed, selected_global_model, update_ledger
from .shapley import ConfidenceSpec, FLValueFunction, SvConfig, estimate_sv

log = logging.getLogger(__name__)

DEFENSES = ("fedsv", "fedavg", "coord_median", "trimmed_mean", "multi_krum")
SUCCESS_RATIO = 0.8
DATA_DIR_ENV = "FEDSV_DATA_DIR"

STREAMS = {"partition": 1, "init": 2, "client": 3, "attack": 4, "sv": 5, "data": 6}


def substream(master_seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, STREAMS[name], *keys])


def substream_int(master_seed: int, name: str, *keys: int) -> int:
    seq = np.random.SeedSequence([master_seed, STREAMS[name], *keys])
    return int(seq.generate_state(1)[0])


# ------------------------------------------------------------------- config

@dataclass
class DatasetConfig:
    kind: str = "blobs"
    num_classes: int = 10
    samples_per_class: int = 100
    test_samples_per_class: int = 100
    input_dim: int = 20
    spread: float = 1.0
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    validation_fraction: float = 0.1
    classes_per_client: int = 3


@dataclass
class ModelConfig:
    architecture: str = LOGISTIC
    hidden_dim: int = 32


@dataclass
class DefenseConfig:
    kind: str = "fedsv"
    trim_count: int | None = None
    byzantine_count: int | None = None
    selection_size: int | None = None
    knowledge: str = "partial"

    def aggregator(self) -> AggregatorSpec:
        return AggregatorSpec(self.kind, self.trim_count, self.byzantine_count,
                              self.selection_size, self.knowledge)


@dataclass
class FedSVConfig:
    sv_method: str = "antithetic"
    samples: int | None = 20
    epsilon: float | None = None
    delta: float | None = None
    variance_bound: float | None = None
    r_max: float | None = None
    tol_trunc: float = 0.01
    allocation: str = "uniform"
    perm_length: int | None = None
    lam: float = 0.0
    beta: float = 0.7
    alpha: float | None = None
    initial_sv: float = 0.0
    min_spread: float = 1e-9
    threshold: str = "offset"
    sv_frequency: int = 1

    def sv_config(self, n_clients: int) -> SvConfig:
        confidence = None
        if self.epsilon is not None and self.delta is not None:
            confidence = ConfidenceSpec(self.epsilon, self.delta, self.variance_bound,
                                        self.r_max, n_clients)
        return SvConfig(self.sv_method, self.samples, confidence, self.tol_trunc,
                        allocation=self.allocation, perm_length=self.perm_length)

    def clusfed_spec(self) -> ClusFedSpec:
        return ClusFedSpec(self.lam, self.min_spread, self.threshold)


@dataclass
class RunConfig:
    num_clients: int = 20
    num_malicious: int = 0
    rounds: int = 40
    master_seed: int = 0
    baseline_accuracy: float | None = None
    record_wall_time: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    fedsv: FedSVConfig = field(default_factory=FedSVConfig)

    def validate(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0 <= self.num_malicious <= self.num_clients:
            raise ValueError("num_malicious must lie in [0, num_clients]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.fedsv.sv_frequency < 1:
            raise ValueError("sv_frequency must be >= 1")
        if self.defense.kind not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense.kind!r}")
        if self.defense.kind == "fedsv" and self.num_clients < 2:
            raise ValueError("fedsv needs at least two clients")
        if self.dataset.kind not in ("blobs", "mnist"):
            raise ValueError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.defense.kind == "fedsv":
            self.fedsv.sv_config(self.num_clients)
            self.fedsv.clusfed_spec()
        else:
            self.defense.aggregator()
        return self

    @property
    def malicious_fraction(self) -> float:
        return self.num_malicious / self.num_clients

    @property
    def malicious_ids(self) -> list[int]:
        return list(range(self.num_malicious))


def desk_scale_config(**overrides) -> RunConfig:
    """Small blob-based setup used by the comparison experiments and acceptance tests.

    Batch size 32 keeps a 40-round run around half a second on one core.
    """
    cfg = RunConfig(num_clients=20, rounds=40,
                    train=TrainConfig(learning_rate=0.005, epochs=5, batch_size=32))
    return replace(cfg, **overrides)


# ------------------------------------------------------------------ records

@dataclass
class RoundRecord:
    round: int
    loss: float
    accuracy: float
    selected: list[int]
    sv: np.ndarray | None = None
    sv_bar: np.ndarray | None = None
    wall_time: float | None = None


@dataclass
class RunSummary:
    config: RunConfig
    records: list[RoundRecord] = field(default_factory=list)
    baseline_accuracy: float | None = None
    error: str | None = None

    @property
    def final_accuracy(self) -> float | None:
        return self.records[-1].accuracy if self.records else None

    @property
    def final_loss(self) -> float | None:
        return self.records[-1].loss if self.records else None

    @property
    def success(self) -> bool | None:
        if self.baseline_accuracy is None or self.final_accuracy is None:
            return None
        return self.final_accuracy >= SUCCESS_RATIO * self.baseline_accuracy

    def excluded(self, record: RoundRecord) -> list[int]:
        chosen = set(record.selected)
        return [k for k in range(self.config.num_clients) if k not in chosen]


@dataclass(frozen=True)
class DetectionReport:
    precision: float
    recall: float
    rounds_to_full_exclusion: int | None


# -------------------------------------------------------------- environment

@dataclass
class Environment:
    arch: Architecture
    shards: list
    validation: object
    reporting: object


def _resolve(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and base:
        p = Path(base) / p
    return p


def load_datasets(ds: DatasetConfig, master_seed: int):
    if ds.kind == "blobs":
        return train_test_blobs(ds.num_classes, ds.samples_per_class, ds.input_dim, ds.spread,
                                ds.test_samples_per_class,
                                seed=[master_seed, STREAMS["data"]])
    train = load_idx(_resolve(ds.train_images), _resolve(ds.train_labels), ds.num_classes)
    test = load_idx(_resolve(ds.test_images), _resolve(ds.test_labels), ds.num_classes)
    return train, test


def build_environment(config: RunConfig) -> Environment:
    ds = config.dataset
    train, test = load_datasets(ds, config.master_seed)
    validation, reporting = split_validation(
        test, ds.validation_fraction, substream_int(config.master_seed, "partition", 1))
    spec = PartitionSpec(config.num_clients, ds.num_classes, ds.classes_per_client,
                         seed=substream_int(config.master_seed, "partition", 0))
    shards = partition_noniid(train, spec, config.num_malicious)
    arch = Architecture(config.model.architecture, train.input_dim, ds.num_classes,
                        config.model.hidden_dim)
    return Environment(arch, shards, validation, reporting)


# --------------------------------------------------------------------- run

def run(config: RunConfig, on_round=None, env: Environment | None = None) -> RunSummary:
    """Simulate ``config.rounds`` rounds and return every round's metrics.

    ``on_round(record)`` fires after each round. A diverging client raises
    ``DivergenceError`` carrying the round and the records gathered so far.
    """
    config.validate()
    env = env or build_environment(config)
    seed = config.master_seed
    n = config.num_clients
    arch, shards = env.arch, env.shards
    counts = np.array([s.n_k for s in shards], dtype=np.float64)
    defense = config.defense.kind
    w = Model.initialize(arch, substream(seed, "init")).params

    if defense == "fedsv":
        fs = config.fedsv
        sv_cfg = fs.sv_config(n)
        cf_spec = fs.clusfed_spec()
        ledger = SvLedger.start(n, fs.beta, fs.alpha, fs.initial_sv)
    else:
        agg_spec = config.defense.aggregator()
    selected = list(range(n))
    summary = RunSummary(config, baseline_accuracy=config.baseline_accuracy)

    for t in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        start = Model(arch, w)
        updates = []
        for shard in shards:
            cid = shard.client_id
            try:
                u = local_train(start, shard, config.train, rng=substream(seed, "client", cid, t))
                u = apply_attack(shard, u, config.attack, t,
                                 seed=[seed, STREAMS["attack"], cid, t], start_model=start,
                                 train_cfg=config.train,
                                 rng=substream(seed, "attack", cid, t))
            except DivergenceError as exc:
                err = DivergenceError(exc.epoch, round_idx=t, client_id=cid)
                err.records = summary.records
                raise err from exc
            updates.append(u)

        sv = sv_bar = None
        if defense == "fedsv":
            if t % config.fedsv.sv_frequency == 0:
                game = FLValueFunction(updates, counts, w, arch, env.validation)
                est = estimate_sv(game, sv_cfg, seed=[seed, STREAMS["sv"], t])
                ledger = update_ledger(ledger, est.values)
                selected = clusfed(ledger.smoothed, cf_spec)
                sv, sv_bar = est.values, ledger.smoothed
            w = selected_global_model(updates, counts, selected)
        else:
            w, selected = aggregate(agg_spec, updates, counts, config.num_malicious)

        loss, acc = evaluate(w, arch, env.reporting)
        wall = time.perf_counter() - t0 if config.record_wall_time else None
        rec = RoundRecord(t, loss, acc, list(selected), sv, sv_bar, wall)
        summary.records.append(rec)
        if on_round is not None:
            on_round(rec)
        log.debug("round %d defense=%s acc=%.4f selected=%d", t, defense, acc, len(selected))
    return summary


def clean_baseline(config: RunConfig) -> RunConfig:
    """FedAvg, no attackers: the reference every success check compares to."""
    return replace(config, num_malicious=0, attack=AttackSpec(),
                   defense=DefenseConfig("fedavg"), baseline_accuracy=None)


def malicious_count(fraction: float, n_clients: int) -> int:
    return int(round(fraction * n_clients))


def run_sweep(base: RunConfig, malicious_fractions, repetitions: int,
              defenses=None, runner=None, on_result=None) -> list[RunSummary]:
    """Grid over defenses x fractions x repetitions.

    Repetition ``r`` uses ``master_seed + r`` for every cell, so cells are
    paired. Each seed's clean FedAvg run provides the baseline accuracy unless
    ``base.baseline_accuracy`` is set. A failing cell is recorded with its
    error and the sweep carries on. ``runner(cfg, role)`` replaces ``run``,
    with ``role`` either ``"baseline"`` or ``"cell"``.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    runner = runner or (lambda cfg, role: run(cfg))
    defenses = list(defenses) if defenses else [base.defense.kind]
    baselines: dict[int, float | None] = {}
    results = []
    for defense in defenses:
        for frac in malicious_fractions:
            for r in range(repetitions):
                seed = base.master_seed + r
                cfg = replace(base, master_seed=seed,
                              num_malicious=malicious_count(frac, base.num_clients),
                              defense=replace(base.defense, kind=defense))
                if cfg.baseline_accuracy is None:
                    if seed not in baselines:
                        baselines[seed] = _baseline_accuracy(cfg, runner)
                    cfg = replace(cfg, baseline_accuracy=baselines[seed])
                try:
                    summary = runner(cfg, "cell")
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    log.warning("cell defense=%s fraction=%s rep=%d failed: %s",
                                defense, frac, r, exc)
                    summary = RunSummary(cfg, list(getattr(exc, "records", [])),
                                         cfg.baseline_accuracy, error=str(exc))
                results.append(summary)
                if on_result is not None:
                    on_result(summary)
    return results


def _baseline_accuracy(cfg: RunConfig, runner) -> float | None:
    try:
        return runner(clean_baseline(cfg), "baseline").final_accuracy
    except Exception as exc:  # noqa: BLE001
        log.warning("baseline run for seed %d failed: %s", cfg.master_seed, exc)
        return None


def success_rates(summaries) -> dict[tuple[str, float], float]:
    """(defense, malicious fraction) -> share of runs meeting the 0.8 x baseline bar."""
    cells: dict[tuple[str, float], list[bool]] = {}
    for s in summaries:
        key = (s.config.defense.kind, s.config.malicious_fraction)
        cells.setdefault(key, []).append(bool(s.success))
    return {k: float(np.mean(v)) for k, v in cells.items()}


def detection_report(summary: RunSummary, malicious=None, from_round: int = 1) -> DetectionReport:
    """Pooled precision/recall of the exclusion sets over SV rounds >= ``from_round``."""
    if summary.config.defense.kind != "fedsv":
        raise NotApplicableError("detection report only applies to fedsv runs")
    malicious = set(summary.config.malicious_ids if malicious is None else malicious)
    sv_rounds = [r for r in summary.records if r.sv is not None]

    tp = fp = fn = 0
    for rec in sv_rounds:
        if rec.round < from_round:
            continue
        excluded = set(summary.excluded(rec))
        tp += len(excluded & malicious)
        fp += len(excluded - malicious)
        fn += len(malicious - excluded)
    precision = tp / (tp + fp) if tp + fp else (1.0 if not malicious else 0.0)
    recall = tp / (tp + fn) if tp + fn else 1.0

    first = None
    for rec in reversed(sv_rounds):
        if malicious <= set(summary.excluded(rec)):
            first = rec.round
        else:
            break
    return DetectionReport(precision, recall, first)
