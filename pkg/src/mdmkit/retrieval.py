"""Train-on-synthetic, test-on-real retrieval evaluation (Recall@K)."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .dataio import EmbeddingPairSet, SyntheticSet
from .errors import ShapeError
from .numerics import Rng, as_matrix
from .projector import ArchSpec, encode, init_random
from .training import train_infonce

DEFAULT_KS = (1, 5, 10)
CSV_COLUMNS = ("IR@1", "IR@5", "IR@10", "TR@1", "TR@5", "TR@10", "Mean", "Std-Mean")


def _ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower index."""
    n = sim.shape[0]
    true = np.diag(sim)[:, None]
    better = (sim > true).sum(axis=1)
    cols = np.arange(n)[None, :]
    tied_before = ((sim == true) & (cols < np.arange(n)[:, None])).sum(axis=1)
    return better + tied_before


def recall_at_k(zv, zt, ks=DEFAULT_KS) -> dict:
    """Recall@K both ways with row ``i`` of ``zv`` paired to row ``i`` of ``zt``.

    ``ir`` is text->image (text queries), ``tr`` is image->text.
    """
    zv = as_matrix(zv)
    zt = as_matrix(zt)
    if zv.shape != zt.shape:
        raise ShapeError(f"recall_at_k: {zv.shape} vs {zt.shape}")
    n = zv.shape[0]
    sim = zv @ zt.T
    tr_rank = _ranks(sim)
    ir_rank = _ranks(sim.T)
    out = {"ir": {}, "tr": {}}
    for k in ks:
        kk = k
        if k > n:
            warnings.warn(f"K={k} exceeds N={n}; clamping", stacklevel=2)
            kk = n
        out["ir"][k] = float(np.mean(ir_rank < kk))
        out["tr"][k] = float(np.mean(tr_rank < kk))
    return out


@dataclass
class RetrievalReport:
    ir_at: dict
    tr_at: dict
    mean: float
    repeats: int
    per_seed: list = field(default_factory=list)
    std: dict = field(default_factory=dict)

    @property
    def per_seed_means(self) -> np.ndarray:
        return np.array([r["mean"] for r in self.per_seed])

    def row(self) -> dict:
        row = {f"IR@{k}": self.ir_at[k] for k in sorted(self.ir_at)}
        row.update({f"TR@{k}": self.tr_at[k] for k in sorted(self.tr_at)})
        row["Mean"] = self.mean
        row["Std-Mean"] = self.std.get("mean", 0.0)
        return row

    def to_dict(self) -> dict:
        return {"ir_at": {str(k): v for k, v in self.ir_at.items()},
                "tr_at": {str(k): v for k, v in self.tr_at.items()},
                "mean": self.mean, "repeats": self.repeats, "std": self.std,
                "per_seed": [{"ir": {str(k): v for k, v in r["ir"].items()},
                              "tr": {str(k): v for k, v in r["tr"].items()},
                              "mean": r["mean"]} for r in self.per_seed]}


def _aggregate(runs: list, ks) -> RetrievalReport:
    n = len(runs)
    ddof = 1 if n > 1 else 0

    def col(direction, k):
        return np.array([r[direction][k] for r in runs])

    ir_at = {k: float(col("ir", k).mean()) for k in ks}
    tr_at = {k: float(col("tr", k).mean()) for k in ks}
    std = {f"IR@{k}": float(col("ir", k).std(ddof=ddof)) for k in ks}
    std.update({f"TR@{k}": float(col("tr", k).std(ddof=ddof)) for k in ks})
    means = np.array([r["mean"] for r in runs])
    std["mean"] = float(means.std(ddof=ddof))
    return RetrievalReport(ir_at, tr_at, float(means.mean()), n, runs, std)


def evaluate_pairs(image, text, test: EmbeddingPairSet, arch: ArchSpec, train_cfg: TrainConfig,
                   repeats: int = 5, seed: int = 0, ks=DEFAULT_KS) -> RetrievalReport:
    """Train ``repeats`` freshly initialized projectors on the given pairs and
    score each on ``test``. Repeat ``r`` always uses the same init and
    shuffling stream for a given ``seed``, so different training sets are
    compared on identical initializations."""
    image = as_matrix(image)
    text = as_matrix(text)
    if image.shape[1] != arch.image_dims[0] or text.shape[1] != arch.text_dims[0] \
            or test.dims != (arch.image_dims[0], arch.text_dims[0]):
        raise ShapeError("architecture input widths do not match the data")
    train_cfg.validate()
    batch = min(train_cfg.batch, image.shape[0])
    runs = []
    for r_rng in Rng(seed).spawn(repeats):
        init_rng, shuffle_rng = r_rng.spawn(2)
        p = init_random(arch, init_rng, train_cfg.init_scale)
        p, _ = train_infonce(p, image, text, epochs=train_cfg.epochs, lr=train_cfg.lr,
                             batch=batch, tau=train_cfg.tau, rng=shuffle_rng)
        zv, zt = encode(p, test.image, test.text)
        rec = recall_at_k(zv, zt, ks)
        rec["mean"] = float(np.mean(list(rec["ir"].values()) + list(rec["tr"].values())))
        runs.append(rec)
    return _aggregate(runs, ks)


def evaluate_synthetic(syn: SyntheticSet, test: EmbeddingPairSet, arch: ArchSpec,
                       train_cfg: TrainConfig, repeats: int = 5, seed: int = 0,
                       ks=DEFAULT_KS) -> RetrievalReport:
    return evaluate_pairs(syn.img_params, syn.txt_params, test, arch, train_cfg, repeats, seed, ks)


def cross_arch_sweep(syn: SyntheticSet, test: EmbeddingPairSet, archs, train_cfg: TrainConfig,
                     repeats: int = 5, seed: int = 0, ks=DEFAULT_KS) -> dict:
    """Evaluate one synthetic set under several architectures.

    Returns ``{arch.label: report}`` plus ``"Mean"`` holding the average of
    the per-architecture mean recalls.
    """
    reports = {a.label: evaluate_synthetic(syn, test, a, train_cfg, repeats, seed, ks)
               for a in archs}
    reports["Mean"] = float(np.mean([r.mean for r in reports.values()]))
    return reports


def reports_to_csv(reports: dict) -> str:
    """CSV table, one row per report; recalls as fractions in [0, 1]."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name",) + CSV_COLUMNS)
    for name, rep in reports.items():
        if not isinstance(rep, RetrievalReport):
            continue
        row = rep.row()
        w.writerow([name] + [f"{row[c]:.6f}" for c in CSV_COLUMNS])
    return buf.getvalue()
