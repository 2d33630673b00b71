"""Exact-invariant suite: identities the discrete model satisfies up to roundoff.

Every check compares two independent routes to the same number (spectral vs
brute-force, forward vs backward, one long step vs many short ones) so that a
sign or scaling slip anywhere in the solver shows up as a failed line.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .environment import DomainSpec, NoiseStream, build_mollifier, covariance_from_mollifier
from .observables import malliavin_field, overlap_functional
from .solver import (
    DELTA,
    Recording,
    build_propagator,
    make_model,
    run_backward,
    run_forward,
    run_forward_batch,
)

FAULTS = ("tilt_sign",)


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    note: str = ""


def _check(name, value, tol, note=""):
    value = float(value)
    return Check(name, value, tol, bool(value <= tol), note)


def _domain(cfg: ExperimentConfig, n_steps: int, beta: float | None = None) -> DomainSpec:
    b = cfg.domain
    return DomainSpec(b.d, b.n, b.dx, b.dt, n_steps, cfg.beta if beta is None else beta)


def _kernel(cfg: ExperimentConfig, dom: DomainSpec):
    k = cfg.kernel
    return build_mollifier(k.shape, k.radius, k.amplitude, dom)


def brute_force_overlap(f: np.ndarray, R: np.ndarray, cell: float) -> float:
    """``dx^{2d} sum_x sum_x' f(x) f(x') R(x - x')`` by direct double sum (1-D or 2-D)."""
    n = f.shape[0]
    if f.ndim == 1:
        i = np.arange(n)
        K = R[(i[:, None] - i[None, :]) % n]
        return float(cell ** 2 * f @ K @ f)
    flat = f.ravel()
    idx = np.array(np.unravel_index(np.arange(flat.size), f.shape))
    di = (idx[0][:, None] - idx[0][None, :]) % n
    dj = (idx[1][:, None] - idx[1][None, :]) % n
    return float(cell ** 2 * flat @ R[di, dj] @ flat)


def run_checks(cfg: ExperimentConfig, n_steps: int = 200, fault: str | None = None) -> list[Check]:
    """Run the suite on the configured grid for a horizon of ``n_steps`` steps."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    n_steps = max(2, min(n_steps, cfg.n_steps(min(cfg.domain.T_grid))))
    seed = cfg.ensemble.master_seed
    dom = _domain(cfg, n_steps)
    kern = _kernel(cfg, dom)
    model = make_model(dom, kern, cfg.domain.propagator)
    stream = NoiseStream(seed, 0)
    out = []

    # forward run with every density kept (fault hook applies here)
    steps = tuple(range(n_steps + 1))
    res, _ = run_forward_batch(model, [stream], [DELTA], snapshot_steps=steps, fault=fault)
    dens = np.stack([res.snapshots[i][0] for i in steps])
    mass = dom.cell * dens.reshape(len(steps), -1).sum(axis=1)
    out.append(_check("density_normalization", np.abs(mass - 1).max(), 1e-12, "max over steps of |dx^d sum rho - 1|"))
    lm = np.concatenate([[0.0], np.cumsum(res.increments[0])])

    # forward/backward pairing: dx^d sum fwd_i bwd_i is log Z_T at every step
    bwd = run_backward(dom, model, stream, "constant_one")
    logs = []
    for i in steps:
        st = bwd.state(i)
        p = float((dens[i] * st.weights).sum() * dom.cell)
        logs.append(math.log(p) + lm[i] + st.log_mass + math.log(st.normalizer))
    logs = np.array(logs)
    out.append(_check("pairing_constancy", logs.max() - logs.min(), 1e-10, f"log Z_T={logs[-1]:.17g}"))

    # Malliavin mass and bounds
    for t in cfg.recording.malliavin_targets:
        x0 = np.unravel_index(int(t) % dom.n_sites, dom.shape)
        mf = malliavin_field(dom, model, stream, x0=x0)
        target = dom.beta * kern.l1
        out.append(_check(f"malliavin_mass[x0={int(t)}]", np.abs(mf.mass - target).max(), 1e-10,
                          f"per-slice mass vs beta*|phi|_1 = {target:.17g}"))
        hi = dom.beta * kern.linf
        slack = 1e-12 * max(hi, 1.0)
        excess = max(float(-mf.D.min()), float(mf.D.max() - hi), 0.0)
        out.append(_check(f"malliavin_bounds[x0={int(t)}]", excess, slack, f"D in [0, {hi:.17g}]"))

    # spectral R(f) against the brute-force double sum on a 32-site grid
    small = DomainSpec(cfg.domain.d, 32, cfg.domain.dx, cfg.domain.dt, 1, cfg.beta)
    ks = _kernel(cfg, small)
    Rs = covariance_from_mollifier(ks, small)
    rng = np.random.default_rng(seed & 0xFFFFFFFF)
    f = rng.random(small.shape)
    f /= small.cell * f.sum()
    spectral = overlap_functional(f, Rs, small)
    brute = brute_force_overlap(f, Rs.values, small.cell)
    out.append(_check("overlap_spectral_vs_brute", abs(spectral - brute) / max(abs(brute), 1e-300), 1e-10, "n=32, relative"))
    shifted = np.roll(f, tuple(range(3, 3 + small.d)), axis=tuple(range(small.d)))
    out.append(_check("overlap_shift_invariance", abs(overlap_functional(shifted, Rs, small) - spectral), 1e-12))

    # semigroup identity P_dt P_dt = P_2dt
    p1 = build_propagator(dom, cfg.domain.propagator)
    p2 = build_propagator(dom, cfg.domain.propagator, dt=2 * dom.dt)
    g = dens[min(10, n_steps)]
    a, b = p1.apply(p1.apply(g, dom.d), dom.d), p2.apply(g, dom.d)
    out.append(_check("semigroup_identity", np.abs(a - b).max() / np.abs(b).max(), 1e-12, "relative sup norm"))

    # beta = 0: trajectory is the heat kernel, log Z = 0 and M = 0
    dom0 = _domain(cfg, n_steps, beta=0.0)
    tr = run_forward(dom0, _kernel(cfg, dom0), stream, record=Recording((n_steps,)), propagator=cfg.domain.propagator)
    heat = build_propagator(dom0, cfg.domain.propagator, dt=n_steps * dom.dt).apply(DELTA.density(dom0), dom.d)
    out.append(_check("beta0_heat_kernel", np.abs(tr.final.density - heat).max() / np.abs(heat).max(), 1e-12,
                      "relative sup norm at the horizon"))
    out.append(_check("beta0_log_Z", abs(tr.log_Z), 1e-12))

    # seekable noise: a slice regenerated on its own equals the block copy
    blk = stream.eta_block(0, 5, dom)
    one = stream.eta_block(3, 4, dom)[0]
    out.append(_check("noise_seekable", float(np.abs(blk[3] - one).max()), 0.0))
    return out


def with_horizon(cfg: ExperimentConfig, T: float) -> ExperimentConfig:
    return dataclasses.replace(cfg, domain=dataclasses.replace(cfg.domain, T_grid=(float(T),)))
