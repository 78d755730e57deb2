"""The distillation loop: merge a fresh frozen projector, match the real
minibatch, and update the synthetic pairs by clipped momentum SGD."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MdmConfig
from .dataio import EmbeddingPairSet, SyntheticSet, atomic_write_text, save_synthetic
from .errors import NumericError, ShapeError
from .experts import ExpertPool, sample_and_merge
from .losses import LossBreakdown, mdm_loss
from .numerics import Rng, global_l2_norm
from .projector import Projector, backward, encode, forward
from .seeding import SeedSelection, build_synthetic, select
from .sphere import make_joint_batch

log = logging.getLogger(__name__)

PLATEAU_WINDOW = 50
PLATEAU_RTOL = 1e-6


@dataclass
class IterationLog:
    iteration: int
    loss: LossBreakdown
    grad_norm_pre_clip: float
    clipped: bool
    merged_from: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, **self.loss.as_dict(),
                "grad_norm_pre_clip": self.grad_norm_pre_clip, "clipped": self.clipped,
                "merged_from": [list(p) for p in self.merged_from]}


def joint_features(p: Projector, data: EmbeddingPairSet) -> np.ndarray:
    """Concatenated unit image and text embeddings, one row per pair."""
    zv, zt = encode(p, data.image, data.text)
    return np.hstack([zv, zt])


def seed_synthetic(data: EmbeddingPairSet, pool: ExpertPool, k: int, method: str,
                   rng: Rng) -> tuple[SyntheticSet, SeedSelection]:
    feats = joint_features(pool.anchor.projector, data)
    selection = select(method, feats, k, rng)
    return build_synthetic(selection, data), selection


def _sample_real(n: int, batch: int, rng: Rng) -> np.ndarray:
    return rng.choice(n, batch, replace=batch > n)


def distill_step(syn: SyntheticSet, data: EmbeddingPairSet, pool: ExpertPool,
                 cfg: MdmConfig, rng: Rng) -> IterationLog:
    """One iteration; updates ``syn`` in place and returns its log record."""
    arch = pool.arch
    if syn.img_params.shape[1] != arch.image_dims[0] or syn.txt_params.shape[1] != arch.text_dims[0]:
        raise ShapeError("synthetic parameter widths do not match the pool architecture")
    model, picks = sample_and_merge(pool, cfg.merge, rng)
    idx = _sample_real(data.n, cfg.batch_real, rng)
    rzv, rzt = encode(model, data.image[idx], data.text[idx])
    szv, szt, tape = forward(model, syn.img_params, syn.txt_params)
    real_b = make_joint_batch(rzv, rzt, cfg.eps_gap)
    syn_b = make_joint_batch(szv, szt, cfg.eps_gap)
    breakdown, d_zv, d_zt = mdm_loss(real_b, syn_b, cfg)
    grads = backward(model, tape, d_zv, d_zt, wrt="inputs")
    g_img, g_txt = grads.d_img, grads.d_txt
    norm = global_l2_norm([g_img, g_txt])
    if not (math.isfinite(breakdown.total) and math.isfinite(norm)):
        raise NumericError(f"non-finite loss/gradient at iteration {syn.iteration}")
    clipped = norm > cfg.clip_norm
    if clipped:
        scale = cfg.clip_norm / norm
        g_img, g_txt = g_img * scale, g_txt * scale
    syn.vel_img = cfg.momentum * syn.vel_img + g_img
    syn.vel_txt = cfg.momentum * syn.vel_txt + g_txt
    syn.img_params = syn.img_params - cfg.lr * syn.vel_img
    syn.txt_params = syn.txt_params - cfg.lr * syn.vel_txt
    record = IterationLog(syn.iteration, breakdown, norm, bool(clipped), picks)
    syn.iteration += 1
    return record


def _plateaued(totals: list) -> bool:
    if len(totals) < 2 * PLATEAU_WINDOW:
        return False
    prev = float(np.mean(totals[-2 * PLATEAU_WINDOW:-PLATEAU_WINDOW]))
    last = float(np.mean(totals[-PLATEAU_WINDOW:]))
    return abs(last - prev) <= PLATEAU_RTOL * max(abs(prev), 1e-300)


@dataclass
class RunResult:
    syn: SyntheticSet
    logs: list
    rng: Rng
    selection: SeedSelection | None = None
    stopped_early: bool = False


def run(data: EmbeddingPairSet, pool: ExpertPool, cfg: MdmConfig, method: str = "kmeans_joint",
        k: int | None = None, syn: SyntheticSet | None = None, rng: Rng | None = None,
        on_iteration=None) -> RunResult:
    """Seed (unless ``syn`` is given) and iterate up to ``cfg.max_iters`` steps.

    Pass ``syn`` together with a restored ``rng`` to resume a saved run.
    ``on_iteration(log)`` is called after every step.
    """
    cfg.validate()
    rng = rng if rng is not None else Rng(cfg.seed)
    selection = None
    if syn is None:
        if k is None:
            raise ValueError("k is required when no synthetic set is given")
        syn, selection = seed_synthetic(data, pool, k, method, rng)
    if not syn.is_finite():
        raise NumericError("synthetic set contains non-finite values")
    logs, totals = [], []
    stopped = False
    for _ in range(cfg.max_iters):
        try:
            rec = distill_step(syn, data, pool, cfg, rng)
        except NumericError as exc:
            exc.logs = logs
            raise
        logs.append(rec)
        totals.append(rec.loss.total)
        if on_iteration is not None:
            on_iteration(rec)
        if cfg.early_stop and _plateaued(totals):
            log.info("loss plateau at iteration %d", rec.iteration)
            stopped = True
            break
    return RunResult(syn, logs, rng, selection, stopped)


def write_run_artifacts(out_dir, result: RunResult, cfg: MdmConfig, extra: dict | None = None) -> str:
    """Write ``syn_final.mdms``, ``run_log.jsonl`` and ``run_config.json``.

    The synthetic set is stored in float64 with its optimizer and generator
    state so a later run can resume exactly. Returns the fingerprint of
    ``syn_final.mdms``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fp = save_synthetic(out / "syn_final.mdms", result.syn, include_state=True,
                        rng_state=result.rng.get_state(), precision="f64")
    lines = "".join(json.dumps(r.to_dict()) + "\n" for r in result.logs)
    atomic_write_text(out / "run_log.jsonl", lines)
    echo = {"config": cfg.to_dict(), "syn_fingerprint": fp,
            "iterations": len(result.logs), "stopped_early": result.stopped_early}
    if extra:
        echo.update(extra)
    atomic_write_text(out / "run_config.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return fp
