"""Finite-difference checks of every analytic gradient in the package.

Each check draws a small random instance, computes the analytic gradient
and compares it entrywise with central differences using

    rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)

The suite reports the maximum ``rel`` per check family.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import MdmConfig
from .losses import gke, infonce, mdm_loss
from .numerics import Rng, finite_diff_grad
from .projector import ArchSpec, backward, forward, init_random
from .sphere import KERNELS, KernelSpec, make_joint_batch, unit_normalize

REL_FLOOR = 1e-6
DEFAULT_TOL = 1e-4
DEFAULT_H = 1e-5


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@dataclass
class CheckResult:
    family: str
    instance: int
    max_rel_err: float


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    tol: float = DEFAULT_TOL
    seconds: float = 0.0

    @property
    def worst(self) -> dict:
        out = {}
        for r in self.results:
            out[r.family] = max(out.get(r.family, 0.0), r.max_rel_err)
        return out

    @property
    def passed(self) -> bool:
        return all(np.isfinite(r.max_rel_err) and r.max_rel_err < self.tol for r in self.results)

    @property
    def n_instances(self) -> int:
        return len({r.instance for r in self.results})

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tol": self.tol, "instances": self.n_instances,
                "checks": len(self.results), "seconds": round(self.seconds, 3),
                "max_rel_err": self.worst}


def _dims(rng: Rng, max_b: int = 8, max_d: int = 16) -> tuple[int, int]:
    return int(rng.integers(2, max_b + 1)), int(rng.integers(2, max_d + 1))


def check_infonce(rng: Rng, h: float) -> float:
    b, d = _dims(rng)
    # unit rows: the loss only ever sees normalized embeddings, and raw rows
    # at small tau make the central difference itself inaccurate
    zv, zt = unit_normalize(rng.normal((b, d))), unit_normalize(rng.normal((b, d)))
    tau = float(0.07 + 0.93 * rng.uniform())
    _, gv, gt = infonce(zv, zt, tau)
    nv = finite_diff_grad(lambda x: infonce(x, zt, tau)[0], zv, h)
    nt = finite_diff_grad(lambda x: infonce(zv, x, tau)[0], zt, h)
    return max(rel_error(gv, nv), rel_error(gt, nt))


def check_gke(rng: Rng, kind: str, h: float) -> float:
    m, d = _dims(rng)
    n = int(rng.integers(1, 9))
    real, syn = rng.normal((m, d)), rng.normal((n, d))
    spec = KernelSpec(kind, float(0.3 + rng.uniform()))
    ana = gke(real, syn, spec).d_syn
    num = finite_diff_grad(lambda x: gke(real, x, spec).value, syn, h)
    return rel_error(ana, num)


def check_mdm(rng: Rng, kind: str, h: float) -> float:
    b, d = _dims(rng)
    m = int(rng.integers(2, 9))
    real = make_joint_batch(rng.normal((m, d)), rng.normal((m, d)))
    zv, zt = rng.normal((b, d)), rng.normal((b, d))
    cfg = MdmConfig(kernel=kind, tau=float(0.1 + rng.uniform()))

    def total(v, t):
        return mdm_loss(real, make_joint_batch(v, t), cfg)[0].total

    _, gv, gt = mdm_loss(real, make_joint_batch(zv, zt), cfg)
    nv = finite_diff_grad(lambda x: total(x, zt), zv, h)
    nt = finite_diff_grad(lambda x: total(zv, x), zt, h)
    return max(rel_error(gv, nv), rel_error(gt, nt))


def _projector_instance(rng: Rng):
    dv, dt, hid, out = (int(rng.integers(2, 9)) for _ in range(4))
    arch = ArchSpec((dv, hid, out), (dt, hid, out))
    p = init_random(arch, rng)
    b = int(rng.integers(2, 9))
    return p, rng.normal((b, dv)), rng.normal((b, dt))


def _projector_loss(p, xi, xt, tau=0.5) -> float:
    zv, zt, _ = forward(p, xi, xt)
    return infonce(zv, zt, tau)[0]


def check_projector_params(rng: Rng, h: float) -> float:
    p, xi, xt = _projector_instance(rng)
    zv, zt, tape = forward(p, xi, xt)
    _, dv, dt = infonce(zv, zt, 0.5)
    grads = backward(p, tape, dv, dt, wrt="params").params
    worst = 0.0
    for name, w in p.tensors():
        def f(x, name=name):
            q = p.map_tensors(lambda n_, t: x if n_ == name else t)
            return _projector_loss(q, xi, xt)
        worst = max(worst, rel_error(grads[name], finite_diff_grad(f, w, h)))
    return worst


def check_projector_inputs(rng: Rng, h: float) -> float:
    p, xi, xt = _projector_instance(rng)
    zv, zt, tape = forward(p, xi, xt)
    _, dv, dt = infonce(zv, zt, 0.5)
    g = backward(p, tape, dv, dt, wrt="inputs")
    ni = finite_diff_grad(lambda x: _projector_loss(p, x, xt), xi, h)
    nt = finite_diff_grad(lambda x: _projector_loss(p, xi, x), xt, h)
    return max(rel_error(g.d_img, ni), rel_error(g.d_txt, nt))


def families() -> dict:
    fams = {"infonce": check_infonce}
    for kind in KERNELS:
        fams[f"gke.{kind}"] = lambda rng, h, kind=kind: check_gke(rng, kind, h)
    for kind in KERNELS:
        fams[f"mdm_loss.{kind}"] = lambda rng, h, kind=kind: check_mdm(rng, kind, h)
    fams["projector.params"] = check_projector_params
    fams["projector.inputs"] = check_projector_inputs
    return fams


def run_gradcheck(seed: int = 0, instances: int = 20, tol: float = DEFAULT_TOL,
                  h: float = DEFAULT_H) -> GradcheckReport:
    """Run every check family on ``instances`` seeded random instances."""
    t0 = time.perf_counter()
    report = GradcheckReport(tol=tol)
    fams = families()
    for i, inst_rng in enumerate(Rng(seed).spawn(instances)):
        for (name, fn), rng in zip(fams.items(), inst_rng.spawn(len(fams))):
            err = fn(rng, h)
            report.results.append(CheckResult(name, i, err))
    report.seconds = time.perf_counter() - t0
    return report
