"""Finetuned-expert pool and angle-aware weight merging.

Two experts finetuned from a shared anchor are merged tensor by tensor::

    merged = anchor + alpha * t * (delta_1 + delta_2) / 2
    t      = 2 <d1, d2> / (|d1| |d2| + <d1, d2>)

``t`` is 1 for parallel displacements and 0 for orthogonal ones. It is
forced to 0 when the raw formula goes negative or its denominator vanishes,
so conflicting experts fall back to the anchor.
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MergeConfig, TrainConfig
from .dataio import EmbeddingPairSet, atomic_write_text
from .errors import ConfigError, FormatError, PoolError, ShapeError, UnsupportedError
from .numerics import Rng
from .projector import (ArchSpec, Checkpoint, Projector, init_random, load_checkpoint,
                        save_checkpoint)
from .training import train_infonce

DENOM_EPS = 1e-12


@dataclass
class ExpertPool:
    anchor: Checkpoint
    experts: dict = field(default_factory=dict)  # expert_id -> [Checkpoint epoch 1..E]
    arch: ArchSpec = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch is None:
            self.arch = self.anchor.projector.arch
        if self.anchor.epoch != 0:
            raise PoolError("anchor checkpoint must have epoch 0")
        for eid, ckpts in self.experts.items():
            for e, c in enumerate(ckpts, start=1):
                if c.epoch != e:
                    raise PoolError(f"expert {eid}: epochs are not contiguous from 1")
                if c.projector.arch.image_dims != self.arch.image_dims or \
                        c.projector.arch.text_dims != self.arch.text_dims:
                    raise PoolError(f"expert {eid} epoch {e}: architecture differs from anchor")

    @property
    def expert_ids(self) -> list:
        return sorted(self.experts)

    @property
    def n_epochs(self) -> int:
        return min((len(v) for v in self.experts.values()), default=0)


def train_expert(data: EmbeddingPairSet, anchor: Checkpoint, epochs: int, lr: float,
                 batch: int, rng: Rng, expert_id: int = 0, tau: float = 0.07) -> list:
    """Finetune from the anchor with SGD on InfoNCE, snapshotting every epoch."""
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    snaps = []

    def keep(epoch, p, _loss):
        snaps.append(Checkpoint(expert_id, epoch, p.copy()))

    _, history = train_infonce(anchor.projector.copy(), data.image, data.text, epochs=epochs,
                               lr=lr, batch=batch, tau=tau, rng=rng, on_epoch=keep)
    for c, loss in zip(snaps, history):
        c.train_loss = loss
    return snaps


def build_pool(data: EmbeddingPairSet, arch: ArchSpec, n_experts: int, train: TrainConfig,
               seed: int = 0) -> ExpertPool:
    """Seeded anchor plus ``n_experts`` experts finetuned on ``data``."""
    if n_experts < 1:
        raise ConfigError("n_experts must be >= 1")
    train.validate()
    if train.lr == 0:
        warnings.warn("lr is 0: every expert checkpoint equals the anchor", stacklevel=2)
    rng = Rng(seed)
    anchor_rng, *expert_rngs = rng.spawn(n_experts + 1)
    anchor = Checkpoint(0, 0, init_random(arch, anchor_rng, train.init_scale))
    experts = {}
    for eid, erng in enumerate(expert_rngs):
        experts[eid] = train_expert(data, anchor, train.epochs, train.lr, train.batch, erng,
                                    expert_id=eid, tau=train.tau)
    meta = {"arch": arch.to_dict(), "n_experts": n_experts, "epochs": train.epochs,
            "seed": seed, "lr": train.lr, "batch": train.batch, "tau": train.tau,
            "init_scale": train.init_scale, "data_fingerprint": data.fingerprint()}
    return ExpertPool(anchor, experts, arch, meta)


def save_pool(directory, pool: ExpertPool) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "anchor.mdmc", pool.anchor)
    for eid, ckpts in pool.experts.items():
        for c in ckpts:
            save_checkpoint(d / f"expert_{eid}" / f"epoch_{c.epoch}.mdmc", c)
    meta = dict(pool.meta)
    meta.update({"arch": pool.arch.to_dict(), "n_experts": len(pool.experts),
                 "epochs": pool.n_epochs, "expert_ids": pool.expert_ids})
    atomic_write_text(d / "pool.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_pool(directory) -> ExpertPool:
    d = Path(directory)
    if not (d / "pool.json").is_file():
        raise FileNotFoundError(f"no pool.json in {d}")
    meta = json.loads((d / "pool.json").read_text())
    try:
        arch = ArchSpec.from_dict(meta["arch"])
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"pool.json has no valid arch: {exc}") from exc
    anchor = load_checkpoint(d / "anchor.mdmc", arch.activation)
    experts = {}
    for sub in sorted(d.glob("expert_*")):
        m = re.fullmatch(r"expert_(\d+)", sub.name)
        if not m:
            continue
        files = {}
        for f in sub.glob("epoch_*.mdmc"):
            em = re.fullmatch(r"epoch_(\d+)\.mdmc", f.name)
            if em:
                files[int(em.group(1))] = f
        experts[int(m.group(1))] = [load_checkpoint(files[e], arch.activation)
                                    for e in sorted(files)]
    return ExpertPool(anchor, experts, arch, meta)


def merge_ratio(delta1, delta2) -> float:
    d1 = np.asarray(delta1, dtype=np.float64).ravel()
    d2 = np.asarray(delta2, dtype=np.float64).ravel()
    if d1.shape != d2.shape:
        raise ShapeError(f"merge_ratio: {np.shape(delta1)} vs {np.shape(delta2)}")
    dot = float(d1 @ d2)
    denom = float(np.linalg.norm(d1) * np.linalg.norm(d2)) + dot
    if denom <= DENOM_EPS:
        return 0.0
    t = 2.0 * dot / denom
    if not t > 0.0:
        return 0.0
    return min(t, 1.0)


def merge_weights(anchor: Checkpoint, picks, alpha: float) -> Projector:
    """Merge two expert checkpoints into the anchor, one tensor at a time."""
    picks = list(picks)
    if len(picks) != 2:
        raise UnsupportedError(f"merging is defined for exactly two experts, got {len(picks)}")
    base = anchor.projector
    others = [dict(c.projector.tensors()) for c in picks]
    for o in others:
        for name, w in base.tensors():
            if name not in o or o[name].shape != w.shape:
                raise ShapeError(f"tensor {name} does not match the anchor")

    def merged(name, w0):
        d1 = others[0][name] - w0
        d2 = others[1][name] - w0
        t = merge_ratio(d1, d2)
        return w0 + alpha * t * 0.5 * (d1 + d2)

    return base.map_tensors(merged)


def sample_experts(pool: ExpertPool, cfg: MergeConfig, rng: Rng) -> list:
    """Draw ``cfg.n_experts`` distinct experts, each at a uniform epoch."""
    ids = pool.expert_ids
    if len(ids) < cfg.n_experts:
        raise PoolError(f"pool has {len(ids)} experts, need {cfg.n_experts}")
    if pool.n_epochs < cfg.max_epoch:
        raise PoolError(f"pool buffers {pool.n_epochs} epochs, need {cfg.max_epoch}")
    chosen = rng.choice(len(ids), cfg.n_experts, replace=False)
    epochs = rng.integers(cfg.min_epoch, cfg.max_epoch + 1, size=cfg.n_experts)
    return [(ids[int(i)], int(e)) for i, e in zip(chosen, epochs)]


def sample_and_merge(pool: ExpertPool, cfg: MergeConfig, rng: Rng):
    """Fresh merged projector. Returns ``(projector, [(expert_id, epoch), ...])``."""
    cfg.validate()
    picks = sample_experts(pool, cfg, rng)
    ckpts = [pool.experts[eid][epoch - 1] for eid, epoch in picks]
    return merge_weights(pool.anchor, ckpts, cfg.alpha), picks
