"""Adversarial-geometry fuzz loop shared by the robustness and acceptance tests."""
import numpy as np

from mdmkit.config import MdmConfig
from mdmkit.experts import merge_weights
from mdmkit.losses import gke, infonce, mdm_loss
from mdmkit.numerics import Rng
from mdmkit.projector import ArchSpec, Checkpoint, init_random
from mdmkit.seeding import kcenter, kmeans_joint
from mdmkit.sphere import KERNELS, KernelSpec, make_joint_batch

ARCH = ArchSpec((4, 5, 3), (4, 5, 3))


def _finite(*arrays):
    return all(np.all(np.isfinite(np.asarray(a, dtype=np.float64))) for a in arrays)


def _pairs_with_extremes(rng, b, d):
    """Random pairs where some rows are coincident and some antipodal."""
    zv = rng.normal((b, d))
    zt = rng.normal((b, d))
    kinds = rng.integers(0, 3, b)
    zt[kinds == 1] = zv[kinds == 1] * (0.5 + rng.uniform())
    zt[kinds == 2] = -zv[kinds == 2] * (0.5 + rng.uniform())
    return zv, zt


def fuzz(iterations: int = 1000, seed: int = 0) -> dict:
    """Run ``iterations`` rounds; returns counts per scenario and a ``bad`` list."""
    rng = Rng(seed)
    anchor = Checkpoint(0, 0, init_random(ARCH, Rng(seed + 1)))
    counts = {"pairs": 0, "degenerate_g": 0, "empty_cluster": 0, "antiparallel_merge": 0}
    bad = []
    for it in range(iterations):
        case = it % 4
        if case == 0:
            b, d = int(rng.integers(1, 7)), int(rng.integers(2, 6))
            real = make_joint_batch(*_pairs_with_extremes(rng, 6, d))
            syn = make_joint_batch(*_pairs_with_extremes(rng, b, d))
            for kind in KERNELS:
                bd, gv, gt = mdm_loss(real, syn, MdmConfig(kernel=kind))
                if not _finite(bd.total, gv, gt):
                    bad.append((it, "pairs", kind))
            counts["pairs"] += 1
        elif case == 1:
            d = int(rng.integers(2, 6))
            z = rng.normal((4, d))
            real = make_joint_batch(*_pairs_with_extremes(rng, 5, d))
            syn = make_joint_batch(z, z * 3.0)  # every g row is degenerate
            bd, gv, gt = mdm_loss(real, syn, MdmConfig(kernel=KERNELS[it % 3]))
            same = gke(z, z.copy(), KernelSpec(KERNELS[it % 3]))
            ok = _finite(bd.total, gv, gt, same.d_syn, same.value) and bd.dis_skipped
            ok &= _finite(*infonce(z / np.linalg.norm(z, axis=1, keepdims=True), -z / np.linalg.norm(z, axis=1, keepdims=True), 0.07)[1:])
            if not ok:
                bad.append((it, "degenerate_g"))
            counts["degenerate_g"] += 1
        elif case == 2:
            distinct = int(rng.integers(1, 4))
            base = rng.normal((distinct, 3))
            x = base[rng.integers(0, distinct, 12)]
            k = int(rng.integers(distinct, 9))
            sel = kmeans_joint(x, k, rng)
            kc = kcenter(x, k, rng)
            ok = len(set(sel.indices.tolist())) == k and _finite(sel.objective, sel.history, kc.objective)
            if not ok:
                bad.append((it, "empty_cluster"))
            counts["empty_cluster"] += 1
        else:
            deltas = {n: rng.normal(w.shape) for n, w in anchor.projector.tensors()}
            scale = float(rng.uniform()) * 2 + 1e-3
            e1 = Checkpoint(0, 1, anchor.projector.map_tensors(lambda n, w: w + deltas[n]))
            e2 = Checkpoint(1, 1, anchor.projector.map_tensors(lambda n, w: w - scale * deltas[n]))
            merged = merge_weights(anchor, [e1, e2], float(0.1 + 0.9 * rng.uniform()))
            for (_, w), (_, w0) in zip(merged.tensors(), anchor.projector.tensors()):
                if not (_finite(w) and np.array_equal(w, w0)):
                    bad.append((it, "antiparallel_merge"))
                    break
            counts["antiparallel_merge"] += 1
    return {"counts": counts, "bad": bad}
