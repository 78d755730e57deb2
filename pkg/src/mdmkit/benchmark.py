"""The desk-scale toy benchmark: distilled pairs vs a random real subset.

Every knob of the experiment lives here so the calibration script, the
acceptance tests and the CLI all run exactly the same thing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import MdmConfig, MergeConfig, TrainConfig
from .dataio import EmbeddingPairSet, ToySpec, gen_toy
from .distill import RunResult, run
from .experts import ExpertPool, build_pool
from .numerics import Rng
from .projector import ArchSpec
from .retrieval import RetrievalReport, evaluate_pairs, evaluate_synthetic

TOY_DIM = 16
TOY_ARCH = ArchSpec((TOY_DIM, 32, 16), (TOY_DIM, 32, 16))
POOL_TRAIN = TrainConfig(epochs=10, lr=0.1, batch=64, tau=0.07)
EVAL_TRAIN = TrainConfig(epochs=100, lr=1.0, batch=64, tau=0.5)
N_EXPERTS = 2
K = 20
MAX_ITERS = 500
MERGE_ALPHA = 1.0
POOL_SEED = 1
RUN_SEED = 0
BASELINE_SEED = 123
EVAL_SEED = 7
REPEATS = 5
WINDOW = 50


def toy_spec(data_seed: int = 0) -> ToySpec:
    return ToySpec(n_pairs=1000, n_clusters=10, d_v_raw=TOY_DIM, d_t_raw=TOY_DIM,
                   intra_noise=0.05, cross_noise=0.05, seed=data_seed, n_test=200)


def toy_config(lr: float | None = None, kernel: str = "geodesic") -> MdmConfig:
    cfg = MdmConfig(kernel=kernel, max_iters=MAX_ITERS, seed=RUN_SEED,
                    merge=MergeConfig(alpha=MERGE_ALPHA))
    if lr is not None:
        cfg.lr = lr
    cfg.validate()
    return cfg


def window_means(totals, window: int = WINDOW) -> np.ndarray:
    """Means of consecutive non-overlapping windows (a ragged tail is dropped)."""
    t = np.asarray(totals, dtype=np.float64)
    n = t.size // window
    return t[:n * window].reshape(n, window).mean(axis=1)


def monotone_fraction(totals, window: int = WINDOW) -> float:
    """Fraction of consecutive window pairs whose mean does not increase."""
    w = window_means(totals, window)
    if w.size < 2:
        return 1.0
    return float(np.mean(np.diff(w) <= 0))


def paired_margin(a: RetrievalReport, b: RetrievalReport) -> tuple[float, float]:
    """Mean and standard error of the per-seed differences ``a - b``."""
    d = a.per_seed_means - b.per_seed_means
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    return float(d.mean()), se


@dataclass
class ToyResult:
    data_seed: int
    kernel: str
    lr: float
    run: RunResult
    totals: list
    distilled: RetrievalReport | None = None
    baseline: RetrievalReport | None = None
    seeded: RetrievalReport | None = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def margin(self) -> tuple[float, float]:
        return paired_margin(self.distilled, self.baseline)

    @property
    def z(self) -> float:
        diff, se = self.margin
        return diff / se if se > 0 else float("inf") * np.sign(diff)

    def summary(self) -> dict:
        out = {"data_seed": self.data_seed, "kernel": self.kernel, "lr": self.lr,
               "iterations": len(self.totals), "loss_0": self.totals[0],
               "loss_200": self.totals[200] if len(self.totals) > 200 else None,
               "window_means": window_means(self.totals).tolist(),
               "monotone_fraction": monotone_fraction(self.totals),
               "seconds": round(self.seconds, 2)}
        for name in ("distilled", "baseline", "seeded"):
            rep = getattr(self, name)
            if rep is not None:
                out[name] = {"mean": rep.mean, "per_seed": rep.per_seed_means.tolist()}
        if self.distilled is not None and self.baseline is not None:
            diff, se = self.margin
            out.update(diff=diff, se=se, z=self.z)
        return out


def toy_setup(data_seed: int = 0) -> tuple[EmbeddingPairSet, EmbeddingPairSet, ExpertPool]:
    train, test = gen_toy(toy_spec(data_seed))
    pool = build_pool(train, TOY_ARCH, N_EXPERTS, POOL_TRAIN, seed=POOL_SEED)
    return train, test, pool


def baseline_indices(n: int) -> np.ndarray:
    return Rng(BASELINE_SEED).choice(n, K, replace=False)


def run_toy(data_seed: int = 0, lr: float | None = None, kernel: str = "geodesic",
            evaluate: bool = True, setup=None) -> ToyResult:
    """Distill the toy set and, if ``evaluate``, score it against the random
    subset and the unrefined k-means seed on identical evaluation seeds."""
    t0 = time.perf_counter()
    train, test, pool = setup if setup is not None else toy_setup(data_seed)
    cfg = toy_config(lr, kernel)
    res = run(train, pool, cfg, method="kmeans_joint", k=K)
    totals = [r.loss.total for r in res.logs]
    out = ToyResult(data_seed, kernel, cfg.lr, res, totals)
    if evaluate:
        idx = baseline_indices(train.n)
        out.baseline = evaluate_pairs(train.image[idx], train.text[idx], test, TOY_ARCH,
                                      EVAL_TRAIN, REPEATS, EVAL_SEED)
        sel = res.selection.indices
        out.seeded = evaluate_pairs(train.image[sel], train.text[sel], test, TOY_ARCH,
                                    EVAL_TRAIN, REPEATS, EVAL_SEED)
        out.distilled = evaluate_synthetic(res.syn, test, TOY_ARCH, EVAL_TRAIN, REPEATS,
                                           EVAL_SEED)
    out.seconds = time.perf_counter() - t0
    return out
