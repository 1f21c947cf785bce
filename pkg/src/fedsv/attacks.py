"""Byzantine client behaviours.

All malicious clients in a run share one ``AttackSpec``, which is how
collusion is modelled: they switch on together at ``start_round`` and apply
the same transformation.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import ClientShard, LabeledDataset
from .model_core import local_train

ATTACKS = ("none", "sign_flip", "gaussian_noise", "backdoor_label_flip")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    noise_sigma: float = 0.5
    source_class: int = 0
    target_class: int = 1
    start_round: int = 0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.kind == "gaussian_noise" and not self.noise_sigma > 0:
            raise ValueError("gaussian_noise needs noise_sigma > 0")
        if self.kind == "backdoor_label_flip" and self.source_class == self.target_class:
            raise ValueError("source_class and target_class must differ")
        if self.start_round < 0:
            raise ValueError("start_round must be >= 0")


def sign_flip(update) -> np.ndarray:
    return -np.asarray(update, dtype=np.float64)


def gaussian_noise(update, sigma: float, seed) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    update = np.asarray(update, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return update + sigma * rng.standard_normal(update.shape)


def backdoor_label_flip(shard: ClientShard, source_class: int, target_class: int) -> ClientShard:
    """Relabel every ``source_class`` sample as ``target_class``."""
    data = shard.data
    for c in (source_class, target_class):
        if not 0 <= c < data.num_classes:
            raise ValueError(f"class {c} outside [0, {data.num_classes})")
    labels = data.labels.copy()
    labels[labels == source_class] = target_class
    return replace(shard, data=LabeledDataset(data.features, labels, data.num_classes))


def apply_attack(client: ClientShard, honest_update, spec: AttackSpec, round_idx: int,
                 seed=None, *, start_model=None, train_cfg=None, rng=None) -> np.ndarray:
    """Update the server actually receives from ``client`` this round.

    Honest clients, ``kind == 'none'`` and rounds before ``start_round`` pass
    ``honest_update`` through. The backdoor retrains from ``start_model`` on
    the relabelled shard, so it needs ``start_model`` and ``train_cfg``;
    ``rng`` (or ``seed``) then drives its batch order.
    """
    if not client.is_malicious or spec.kind == "none" or round_idx < spec.start_round:
        return honest_update
    if spec.kind == "sign_flip":
        return sign_flip(honest_update)
    if spec.kind == "gaussian_noise":
        return gaussian_noise(honest_update, spec.noise_sigma, seed)
    if start_model is None or train_cfg is None:
        raise ValueError("backdoor attack needs start_model and train_cfg to retrain")
    poisoned = backdoor_label_flip(client, spec.source_class, spec.target_class)
    if rng is None:
        rng = np.random.default_rng(seed)
    return local_train(start_model, poisoned, train_cfg, rng=rng)
