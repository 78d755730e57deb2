"""Contrastive and kernel-energy losses with analytic gradients.

All gradients are with respect to the synthetic side only. Real-side
embeddings enter as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import MdmConfig
from .errors import ConfigError, ShapeError, SizeError
from .numerics import as_matrix
from .sphere import JointBatch, KernelSpec, gram_vjp, normalize_vjp, row_norms

# sqrt guard for the energy: below ENERGY_EPS the gradient scale is frozen
ENERGY_EPS = 1e-12
MAX_SQRT_SCALE = 1e6


@dataclass
class LossBreakdown:
    infonce: float
    agr: float
    dis: float
    total: float
    dropped_g_real: int = 0
    dropped_g_syn: int = 0
    dropped_u_real: int = 0
    dropped_u_syn: int = 0
    agr_skipped: bool = False
    dis_skipped: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GkeGrad:
    value: float
    d_syn: np.ndarray
    energy: float = 0.0


def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def infonce(zv, zt, tau: float = 0.07):
    """Symmetric image-text InfoNCE with identity targets.

    Logits are ``zv @ zt.T / tau``. The loss is the mean of the image->text
    and text->image cross-entropies, i.e. the sum of both divided by ``2B``.

    Returns:
        (loss, d_zv, d_zt) with gradients of the loss as written, without
        any renormalization of the inputs.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    zv = as_matrix(zv)
    zt = as_matrix(zt)
    if zv.shape != zt.shape:
        raise ShapeError(f"infonce: {zv.shape} vs {zt.shape}")
    b = zv.shape[0]
    if b < 1:
        raise SizeError("infonce needs at least one pair")
    logits = zv @ zt.T / tau
    diag = np.diag(logits)
    v2t = _logsumexp(logits, axis=1) - diag
    t2v = _logsumexp(logits, axis=0) - diag
    loss = float((v2t.sum() + t2v.sum()) / (2 * b))
    eye = np.eye(b)
    g = (_softmax(logits, 1) + _softmax(logits, 0) - 2 * eye) / (2 * b)
    return loss, g @ zt / tau, g.T @ zv / tau


def _energy_and_grad(real: np.ndarray, syn: np.ndarray, spec: KernelSpec):
    m, n = real.shape[0], syn.shape[0]
    w_rr = np.full((m, m), 1.0 / (m * m))
    w_ss = np.full((n, n), 1.0 / (n * n))
    w_rs = np.full((m, n), 2.0 / (m * n))
    intra_r, _, _ = gram_vjp(spec, real, real, w_rr)
    intra_s, dx, dy = gram_vjp(spec, syn, syn, w_ss)
    inter, _, d_inter = gram_vjp(spec, real, syn, w_rs)
    energy = intra_r + intra_s - inter
    return energy, dx + dy - d_inter


def gke(real_set, syn_set, spec: KernelSpec) -> GkeGrad:
    """Square-rooted kernel energy between a real and a synthetic set.

    ``E = mean k(A, A) + mean k(B, B) - 2 mean k(A, B)``, value ``sqrt(max(E, 0))``.
    Rows are unit-normalized internally, so ``d_syn`` includes the
    normalization Jacobian and is tangent to each synthetic row.
    """
    real_set = as_matrix(real_set)
    syn_set = as_matrix(syn_set)
    if real_set.shape[0] == 0 or syn_set.shape[0] == 0:
        raise SizeError("gke needs non-empty sets")
    if real_set.shape[1] != syn_set.shape[1]:
        raise ShapeError(f"gke: dims {real_set.shape[1]} vs {syn_set.shape[1]}")
    real_u = real_set / row_norms(real_set)[:, None]
    syn_norms = row_norms(syn_set)
    syn_u = syn_set / syn_norms[:, None]
    energy, d_e = _energy_and_grad(real_u, syn_u, spec)
    value = math.sqrt(max(energy, 0.0))
    scale = min(0.5 / math.sqrt(max(energy, ENERGY_EPS)), MAX_SQRT_SCALE)
    d_syn = normalize_vjp(scale * d_e, syn_u, syn_norms)
    return GkeGrad(value=value, d_syn=d_syn, energy=energy)


def mdm_loss(real: JointBatch, syn: JointBatch, cfg: MdmConfig | None = None):
    """Total objective ``InfoNCE + lambda_agr * L_agr + lambda_dis * L_dis``.

    InfoNCE runs over the synthetic pairs, the two energies compare the
    agreement sets and the discrepancy sets of the two batches. Gradients
    are returned w.r.t. the raw synthetic inputs given to ``make_joint_batch``.
    If every discrepancy (or agreement) row on either side was dropped the
    term is 0 and flagged in the breakdown.

    Returns:
        (LossBreakdown, d_zv_raw, d_zt_raw)
    """
    cfg = cfg or MdmConfig()
    lambda_agr, lambda_dis = cfg.lambda_agr, cfg.lambda_dis
    if real.zv.shape[1] != syn.zv.shape[1]:
        raise ShapeError("real and synthetic batches differ in joint dimension")
    nce, gv, gt = infonce(syn.zv, syn.zt, cfg.tau)

    agr = 0.0
    agr_skipped = real.u_kept.size == 0 or syn.u_kept.size == 0
    if not agr_skipped:
        res = gke(real.u, syn.u, cfg.agr_kernel)
        agr = res.value
        rows = syn.u_kept
        # u = n(zv + zt), both arms receive the same pull-back
        d_s = normalize_vjp(lambda_agr * res.d_syn, syn.u, syn.sum_norms[rows])
        gv[rows] += d_s
        gt[rows] += d_s

    dis = 0.0
    dis_skipped = real.g_kept.size == 0 or syn.g_kept.size == 0
    if not dis_skipped:
        res = gke(real.g_rows, syn.g_rows, cfg.dis_kernel)
        dis = res.value
        rows = syn.g_kept
        d_d = normalize_vjp(lambda_dis * res.d_syn, syn.g_rows, syn.diff_norms[rows])
        gv[rows] += d_d
        gt[rows] -= d_d

    d_zv_raw = normalize_vjp(gv, syn.zv, syn.zv_norms)
    d_zt_raw = normalize_vjp(gt, syn.zt, syn.zt_norms)
    total = nce + lambda_agr * agr + lambda_dis * dis
    breakdown = LossBreakdown(
        infonce=nce, agr=agr, dis=dis, total=total,
        dropped_g_real=real.dropped_g, dropped_g_syn=syn.dropped_g,
        dropped_u_real=real.dropped_u, dropped_u_syn=syn.dropped_u,
        agr_skipped=agr_skipped, dis_skipped=dis_skipped,
    )
    return breakdown, d_zv_raw, d_zt_raw
