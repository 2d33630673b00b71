"""Functionals of a trajectory: overlaps, martingale part, Malliavin fields, local averages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .environment import CovarianceTable, DomainSpec, Mollifier, NoiseStream, mollify_array
from .errors import UsageError
from .solver import (
    CONSTANT,
    DELTA,
    BackwardTrajectory,
    ForwardTrajectory,
    HeatPropagator,
    Model,
    make_model,
    paired_sweep,
)

NORMALIZATION_TOL = 1e-8


def _check_density(f: np.ndarray, domain: DomainSpec) -> None:
    if f.shape[f.ndim - domain.d:] != domain.shape:
        raise UsageError(f"density shape {f.shape} does not match grid {domain.shape}")
    mass = domain.cell * f.reshape(-1, domain.n_sites).sum(axis=1)
    if np.any(np.abs(mass - 1.0) > NORMALIZATION_TOL):
        raise UsageError(f"density is not normalized (dx^d * sum = {mass.ravel()[0]!r})")


def overlap_functional(f: np.ndarray, R: CovarianceTable, domain: DomainSpec) -> float | np.ndarray:
    """``R(f) = dx^{2d} * sum_{x,x'} f(x) f(x') R(x - x')`` evaluated spectrally.

    Accepts one density or a stack of densities (leading axes).
    """
    f = np.asarray(f, dtype=np.float64)
    _check_density(f, domain)
    F = np.fft.rfftn(f, axes=tuple(range(-domain.d, 0)))
    w = R.spectral_weights(domain)
    val = ((F.real ** 2 + F.imag ** 2) * w).reshape(F.shape[: F.ndim - domain.d] + (-1,)).sum(axis=-1)
    return float(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True, eq=False)
class OverlapSeries:
    """``values[i] = R(rho_i)``; ``partial[i] = dt * sum_{j<i} values[j]``; ``qv = beta^2 * partial``."""

    values: np.ndarray = field(repr=False)
    partial: np.ndarray = field(repr=False)
    qv: np.ndarray = field(repr=False)

    @property
    def O_T(self) -> float:
        return float(self.partial[-1])

    @property
    def qv_T(self) -> float:
        return float(self.qv[-1])


def accumulate_overlap(traj: ForwardTrajectory) -> OverlapSeries:
    """Left-endpoint quadrature ``O_T = dt * sum_{i<n} R(rho_i)``."""
    if traj.init.kind != "delta_at_origin":
        raise UsageError("the overlap is defined for a delta-start trajectory")
    dom = traj.domain
    vals = np.asarray(traj.overlap, dtype=np.float64)
    partial = np.concatenate([[0.0], np.cumsum(vals[:-1])]) * dom.dt
    return OverlapSeries(vals, partial, dom.beta ** 2 * partial)


@dataclass(frozen=True, eq=False)
class MartingaleSeries:
    """``M[i]`` partial sums and ``residual[i] = log Z_{t_i} - (M[i] - qv[i] / 2)``."""

    M: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)

    @property
    def M_T(self) -> float:
        return float(self.M[-1])

    @property
    def residual_T(self) -> float:
        return float(self.residual[-1])


def predictable_integrand(
    rho: np.ndarray, xi: np.ndarray, prop: HeatPropagator, domain: DomainSpec
) -> float:
    """``dx^d * sum (P rho) xi`` with ``P rho`` renormalized: the step-``i`` martingale integrand."""
    rt = prop.apply(rho, domain.d)
    return float((rt * xi).sum() / rt.sum())


def accumulate_martingale(
    traj: ForwardTrajectory,
    overlap: OverlapSeries | None = None,
    xi: np.ndarray | None = None,
    propagator: HeatPropagator | None = None,
) -> MartingaleSeries:
    """``M_{t_i} = beta * dt * sum_{j<i} dx^d sum_y rho~_j(y) xi_j(y)`` and the Ito residual.

    Without ``xi`` the integrand recorded by the solver is used.  With ``xi``
    (shape ``(n_steps, *grid)``) the integrand is recomputed from stored
    densities, which requires every step to have been recorded.
    """
    dom = traj.domain
    if overlap is None:
        overlap = accumulate_overlap(traj)
    if xi is None:
        integrand = np.asarray(traj.integrand)
    else:
        if xi.shape[0] != dom.n_steps:
            raise UsageError(f"{xi.shape[0]} noise slices for {dom.n_steps} steps")
        if propagator is None:
            raise UsageError("recomputing the integrand needs the propagator")
        missing = [i for i in range(dom.n_steps) if i not in traj.snapshots]
        if missing:
            raise UsageError(f"density at step {missing[0]} was not recorded")
        integrand = np.array(
            [predictable_integrand(traj.snapshots[i], xi[i], propagator, dom) for i in range(dom.n_steps)]
        )
    M = np.concatenate([[0.0], np.cumsum(integrand)]) * (dom.beta * dom.dt)
    residual = np.asarray(traj.log_mass) - (M - 0.5 * overlap.qv)
    return MartingaleSeries(M, residual)


def fixed_time_overlap(fwd: ForwardTrajectory, bwd: BackwardTrajectory, R: CovarianceTable) -> float:
    """``dt * sum_{i<n} R(mu_i)`` with ``mu_i`` the time-``t_i`` marginal of the length-``T`` polymer.

    Both trajectories must cover every step and share one environment.
    """
    dom = fwd.domain
    total = 0.0
    for i in range(dom.n_steps):
        if i not in fwd.snapshots or i not in bwd.states:
            raise UsageError(f"step {i} missing from the paired trajectories")
        p = fwd.snapshots[i] * bwd.states[i].weights
        mu = p / (dom.cell * p.sum())
        total += overlap_functional(mu, R, dom)
    return total * dom.dt


def fixed_time_overlap_streaming(model: Model, stream: NoiseStream, checkpoint: int | None = None) -> float:
    """Same quantity as :func:`fixed_time_overlap` in ``O(sqrt(n_steps) n^d)`` memory."""
    dom = model.domain
    acc = np.zeros(dom.n_steps + 1)

    def visit(i, rho, W):
        if i < dom.n_steps:
            p = rho * W[0]
            mu = p / (dom.cell * p.sum())
            acc[i] = overlap_functional(mu, model.covariance, dom)

    paired_sweep(model, stream, DELTA, ["constant_one"], visit, checkpoint)
    return float(acc[: dom.n_steps].sum() * dom.dt)


def _reflect(kernel: Mollifier, domain: DomainSpec) -> Mollifier:
    vals = kernel.values
    for ax in range(domain.d):
        vals = np.roll(np.flip(vals, axis=ax), 1, axis=ax)
    return Mollifier(vals, kernel.radius, kernel.l1, kernel.linf, kernel.shape_name)


def derivative_from_marginal(mu: np.ndarray, model: Model) -> np.ndarray:
    """``beta * dx^d * sum_z mu(z) phi(z - y)`` for each ``y`` (rows of ``mu`` handled independently)."""
    dom = model.domain
    return dom.beta * mollify_array(mu, _reflect(model.kernel, dom), dom)


@dataclass(frozen=True, eq=False)
class MalliavinField:
    """``D[r, y]`` is the derivative of ``h(T, x0)`` with respect to the noise slice ``steps[r]``.

    The slice-``s`` row pairs the forward field after slice ``s`` is absorbed
    with the backward field that has absorbed slices ``s+1 ..``, so ``D`` is the
    kernel-smoothed marginal of the ``(T, x0)``-rooted polymer just after ``s``.
    """

    steps: np.ndarray
    D: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    x0: tuple
    log_u: float


def malliavin_field(
    domain: DomainSpec,
    kernel: Mollifier | Model,
    stream: NoiseStream,
    x0: Sequence[int] | int = 0,
    steps: Iterable[int] | None = None,
    propagator: str = "lattice",
    checkpoint: int | None = None,
) -> MalliavinField:
    model = kernel if isinstance(kernel, Model) else make_model(domain, kernel, propagator)
    dom = model.domain
    x0 = tuple(int(v) % dom.n for v in np.atleast_1d(x0))
    if len(x0) != dom.d:
        raise UsageError(f"target site {x0} has the wrong dimension")
    want = np.arange(dom.n_steps) if steps is None else np.array(sorted(set(int(s) for s in steps)))
    if want.size and (want.min() < 0 or want.max() >= dom.n_steps):
        raise UsageError("requested slice outside [0, n_steps)")
    row = {int(s): r for r, s in enumerate(want)}
    D = np.zeros((len(want),) + dom.shape)
    final = {}

    def visit(i, rho, W):
        if i == dom.n_steps:
            final["rho_x0"] = float(rho[x0])
        s = i - 1
        if s in row:
            p = rho * W[0]
            mu = p / (dom.cell * p.sum())
            D[row[s]] = derivative_from_marginal(mu, model)

    log_mean_u = paired_sweep(model, stream, CONSTANT, [x0], visit, checkpoint)
    mass = dom.cell * D.reshape(len(want), -1).sum(axis=1)
    log_u = math.log(final["rho_x0"]) + log_mean_u + math.log(dom.volume)
    return MalliavinField(want, D, mass, x0, log_u)


def local_average(h: np.ndarray, M: int, domain: DomainSpec, center: Sequence[int] | None = None) -> float:
    """Arithmetic mean of ``h`` over the ``(2M+1)^d``-site box around ``center`` (default origin)."""
    if int(M) != M or M < 0:
        raise UsageError(f"box half-width must be a nonnegative integer, got {M}")
    if 2 * M + 1 > domain.n:
        raise UsageError(f"box of {2 * M + 1} sites per axis exceeds the grid ({domain.n})")
    center = (0,) * domain.d if center is None else tuple(center)
    idx = [np.arange(c - M, c + M + 1) % domain.n for c in center]
    return float(h[np.ix_(*idx)].mean())


def box_averages(h: np.ndarray, M: int, domain: DomainSpec) -> np.ndarray:
    """Box averages centred at every site (periodic), for stationarity pooling."""
    out = np.zeros_like(h, dtype=np.float64)
    for ax in range(domain.d):
        src = h if ax == 0 else out
        acc = np.zeros_like(src, dtype=np.float64)
        for k in range(-M, M + 1):
            acc += np.roll(src, k, axis=src.ndim - domain.d + ax)
        out = acc / (2 * M + 1)
    return out


@dataclass(frozen=True, eq=False)
class IncrementMoments:
    lags: np.ndarray
    moment: np.ndarray
    se: np.ndarray
    ratio: np.ndarray
    ratio_se: np.ndarray
    n_samples: int


def increment_moments(
    h_ensemble: np.ndarray, lags: Sequence[int], domain: DomainSpec, beta: float, R: CovarianceTable
) -> IncrementMoments:
    """Second moments of ``h(t, x) - h(t, x + k dx)`` pooled over sites, with SE across realizations.

    Lags are taken along the last grid axis.  ``h_ensemble`` has shape ``(N, *grid)``.
    """
    h = np.asarray(h_ensemble, dtype=np.float64)
    N = h.shape[0]
    if N < 2:
        raise UsageError("increment moments need at least 2 realizations")
    lags = np.asarray(lags, dtype=np.int64)
    per = np.empty((N, len(lags)))
    for j, k in enumerate(lags):
        diff = h - np.roll(h, -int(k), axis=-1)
        per[:, j] = (diff ** 2).reshape(N, -1).mean(axis=1)
    moment = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(N)
    scale = beta ** 2 * R.r0 * (lags * domain.dx) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scale > 0, moment / scale, 0.0)
        ratio_se = np.where(scale > 0, se / scale, 0.0)
    return IncrementMoments(lags, moment, se, ratio, ratio_se, N)


@dataclass(frozen=True)
class GradientOverlapReport:
    f_hat: float
    f_se: float
    g_hat: float
    g_se: float
    defect: float
    defect_se: float
    n_samples: int


def central_gradient_sq(h: np.ndarray, domain: DomainSpec) -> np.ndarray:
    """``|grad h|^2`` by periodic central differences over the trailing grid axes."""
    g2 = np.zeros_like(h, dtype=np.float64)
    for ax in range(h.ndim - domain.d, h.ndim):
        g = (np.roll(h, -1, axis=ax) - np.roll(h, 1, axis=ax)) / (2 * domain.dx)
        g2 += g * g
    return g2


def gradient_overlap_identity(
    h_snaps: np.ndarray,
    rho_snaps: np.ndarray,
    domain: DomainSpec,
    beta: float,
    R: CovarianceTable,
    h_time: float | None = None,
    rho_time: float | None = None,
) -> GradientOverlapReport:
    """``f = E|grad h|^2`` against ``beta^2 (R(0) - g)`` with ``g = E R(rho)`` at the same time."""
    if h_time is not None and rho_time is not None and not math.isclose(h_time, rho_time):
        raise UsageError(f"h snapshot time {h_time} != density snapshot time {rho_time}")
    h = np.asarray(h_snaps, dtype=np.float64)
    rho = np.asarray(rho_snaps, dtype=np.float64)
    f_per = central_gradient_sq(h, domain).reshape(h.shape[0], -1).mean(axis=1)
    g_per = np.atleast_1d(overlap_functional(rho, R, domain))
    nf, ng = len(f_per), len(g_per)
    f_hat, g_hat = float(f_per.mean()), float(g_per.mean())
    f_se = float(f_per.std(ddof=1) / math.sqrt(nf)) if nf > 1 else 0.0
    g_se = float(g_per.std(ddof=1) / math.sqrt(ng)) if ng > 1 else 0.0
    defect = f_hat - beta ** 2 * (R.r0 - g_hat)
    return GradientOverlapReport(
        f_hat, f_se, g_hat, g_se, defect, math.hypot(f_se, beta ** 2 * g_se), min(nf, ng)
    )


def endpoint_mode(rho: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
    """Argmax site (first in row-major order on ties) and the profile shifted to put it at the origin."""
    rho = np.asarray(rho)
    site = np.unravel_index(int(np.argmax(rho)), rho.shape)
    site = tuple(int(s) for s in site)
    centered = np.roll(rho, tuple(-s for s in site), axis=tuple(range(rho.ndim)))
    return site, centered


@dataclass(frozen=True, eq=False)
class BksQuantities:
    """Monte Carlo box-averaged derivative statistics for one time ``T``.

    ``mean_dbar[M]`` is the Monte Carlo mean of the box means
    ``|B_M|^{-1} sum_{x in B_M} D_{s,y} h(T, x) dx^d``, shape ``(len(steps), *grid)``.
    """

    T: float
    steps: np.ndarray
    M_grid: tuple
    h_M: dict = field(repr=False)
    mean_dbar: dict = field(repr=False)
    se_dbar: dict = field(repr=False)
    A: dict = field(repr=False)
    box_volume: dict = field(repr=False)
    n_samples: int = 0

    def ratio(self, M: int) -> np.ndarray:
        """``A / ||D h_M||_1`` where the mean is positive (``inf`` elsewhere)."""
        m = self.mean_dbar[M]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(m > 0, self.A[M] / m, np.inf)


def _bks_layout(dom: DomainSpec, M_grid: Sequence[int], site_budget: int):
    M_grid = tuple(sorted(set(int(M) for M in M_grid)))
    if not M_grid or M_grid[0] < 0:
        raise UsageError("box half-widths must be nonnegative integers")
    Mmax = M_grid[-1]
    nbox = (2 * Mmax + 1) ** dom.d
    if nbox > site_budget:
        raise UsageError(f"box of {nbox} sites exceeds the site budget {site_budget}")
    if 2 * Mmax + 1 > dom.n:
        raise UsageError("box exceeds the grid")
    rng = np.arange(-Mmax, Mmax + 1)
    offs = np.array(np.meshgrid(*([rng] * dom.d), indexing="ij")).reshape(dom.d, -1).T
    sites = [tuple(int(v) % dom.n for v in c) for c in offs]
    cheb = np.abs(offs).max(axis=1)
    masks = {M: cheb <= M for M in M_grid}
    return M_grid, sites, masks


def bks_realization(
    model: Model,
    stream: NoiseStream,
    M_grid: Sequence[int],
    steps: Iterable[int],
    site_budget: int = 64,
    checkpoint: int | None = None,
) -> tuple[dict, dict]:
    """Box means of ``D_{s,y} h(T, x)`` over ``x`` in each box, for one environment.

    Returns ``(dbar, h_M)`` where ``dbar[M]`` has shape ``(len(steps), *grid)``
    and ``h_M[M]`` is the box average of ``h(T, .)``.  One backward pass per
    site of the largest box runs against a shared constant-start forward pass.
    """
    dom = model.domain
    M_grid, sites, masks = _bks_layout(dom, M_grid, site_budget)
    steps = np.array(sorted(set(int(s) for s in steps)))
    if steps.size and (steps[0] < 0 or steps[-1] >= dom.n_steps):
        raise UsageError(f"sampled slices must lie in [0, {dom.n_steps})")
    row = {int(s): r for r, s in enumerate(steps)}
    dbar = {M: np.zeros((len(steps),) + dom.shape) for M in M_grid}
    final = {}

    def visit(i, rho, W):
        if i == dom.n_steps:
            final["rho"] = rho.copy()
        s = i - 1
        if s in row:
            p = rho[None] * W
            mu = p / _expand_cells(dom.cell * p.reshape(len(W), -1).sum(axis=1), dom.d)
            Dx = derivative_from_marginal(mu, model)
            for M in M_grid:
                dbar[M][row[s]] = Dx[masks[M]].mean(axis=0)

    log_mean_u = paired_sweep(model, stream, CONSTANT, sites, visit, checkpoint)
    hT = np.log(final["rho"]) + log_mean_u + math.log(dom.volume)
    return dbar, {M: local_average(hT, M, dom) for M in M_grid}


def combine_bks(model: Model, steps: Iterable[int], per_realization: Sequence[tuple[dict, dict]]) -> BksQuantities:
    """Monte Carlo means, standard errors and ``A`` from per-realization box means."""
    dom = model.domain
    steps = np.array(sorted(set(int(s) for s in steps)))
    N = len(per_realization)
    if N == 0:
        raise UsageError("no realizations to combine")
    M_grid = tuple(sorted(per_realization[0][0]))
    stacks = {M: np.stack([p[0][M] for p in per_realization]) for M in M_grid}
    h_M = {M: np.array([p[1][M] for p in per_realization]) for M in M_grid}
    mean = {M: stacks[M].mean(axis=0) for M in M_grid}
    se = {M: (stacks[M].std(axis=0, ddof=1) / math.sqrt(N) if N > 1 else np.zeros_like(mean[M])) for M in M_grid}
    A = {M: np.sqrt(dom.beta * model.kernel.linf * np.maximum(mean[M], 0.0)) for M in M_grid}
    vol = {M: ((2 * M + 1) * dom.dx) ** dom.d for M in M_grid}
    return BksQuantities(dom.T, steps, M_grid, h_M, mean, se, A, vol, N)


def bks_derivative_average(
    model: Model,
    streams: Sequence[NoiseStream],
    M_grid: Sequence[int],
    steps: Iterable[int],
    site_budget: int = 64,
    checkpoint: int | None = None,
) -> BksQuantities:
    """Box-averaged Malliavin derivative of ``h(T, .)`` estimated over realizations."""
    steps = list(steps)
    per = [bks_realization(model, s, M_grid, steps, site_budget, checkpoint) for s in streams]
    return combine_bks(model, steps, per)


def _expand_cells(v: np.ndarray, d: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * d)
