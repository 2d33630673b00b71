"""Forward and backward Feynman-Kac recursion on the torus.

One step is: diffuse with the spectral heat semigroup, tilt pointwise by
``exp(beta * xi * dt - beta^2 R(0) dt / 2)``, renormalize.  Fields are carried as
a normalized density (``dx^d * sum = 1``) plus an accumulated log-mass so that
``log Z_T`` of order ``-gamma * T`` never under- or overflows.

Tilt ownership: a forward state at step ``i`` has absorbed slices ``0 .. i-1``;
a backward state at step ``i`` has absorbed slices ``i .. n_steps-1``.  The
bracket ``dx^d * sum fwd_i * bwd_i`` is therefore the same number ``Z_T`` for
every ``i``.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .environment import (
    CovarianceTable,
    DomainSpec,
    Mollifier,
    NoiseStream,
    XiSlice,
    covariance_from_mollifier,
)
from ._rng import tilt_and_normalize
from .errors import NumericalFailure, UsageError

SYMBOLS = ("lattice", "continuum")
BLOCK_STEPS = 64


@dataclass(frozen=True, eq=False)
class HeatPropagator:
    """Fourier multipliers of ``exp(dt * L / 2)`` on rfft modes.

    ``symbol="continuum"`` uses ``-|2 pi m / L_phys|^2`` for the Laplacian ``L``;
    ``symbol="lattice"`` uses the nearest-neighbour Laplacian symbol
    ``-(2 / dx^2) * sum_a (1 - cos(2 pi m_a / n))``, whose semigroup is the
    transition kernel of a continuous-time random walk and therefore
    positivity preserving.  Both are exact semigroups in ``dt``.
    """

    multipliers: np.ndarray = field(repr=False)
    dt: float
    symbol: str

    def apply(self, f: np.ndarray, d: int) -> np.ndarray:
        axes = tuple(range(-d, 0))
        shape = f.shape[f.ndim - d:]
        return np.fft.irfftn(np.fft.rfftn(f, axes=axes) * self.multipliers, s=shape, axes=axes)


def _symbol(domain: DomainSpec, symbol: str) -> np.ndarray:
    if symbol not in SYMBOLS:
        raise UsageError(f"unknown propagator symbol {symbol!r}; expected one of {SYMBOLS}")
    m_full = np.fft.fftfreq(domain.n, d=1.0 / domain.n)
    m_half = np.fft.rfftfreq(domain.n, d=1.0 / domain.n)
    axes = [m_full] * (domain.d - 1) + [m_half]
    grids = np.meshgrid(*axes, indexing="ij")
    if symbol == "continuum":
        k = 2 * np.pi / domain.L_phys
        return -sum((k * g) ** 2 for g in grids)
    return -(2.0 / domain.dx ** 2) * sum(1.0 - np.cos(2 * np.pi * g / domain.n) for g in grids)


def build_propagator(domain: DomainSpec, symbol: str = "lattice", dt: float | None = None) -> HeatPropagator:
    dt = domain.dt if dt is None else float(dt)
    mult = np.exp(0.5 * dt * _symbol(domain, symbol))
    mult.flat[0] = 1.0
    return HeatPropagator(multipliers=mult, dt=dt, symbol=symbol)


@dataclass(frozen=True)
class InitialData:
    kind: str = "delta_at_origin"

    def __post_init__(self):
        if self.kind not in ("delta_at_origin", "constant_one"):
            raise UsageError(f"unknown initial data {self.kind!r}")

    def density(self, domain: DomainSpec) -> np.ndarray:
        if self.kind == "constant_one":
            return np.full(domain.shape, 1.0 / domain.volume)
        rho = np.zeros(domain.shape)
        rho[(0,) * domain.d] = 1.0 / domain.cell
        return rho

    def normalizer(self, domain: DomainSpec) -> float:
        return domain.volume if self.kind == "constant_one" else 1.0


DELTA = InitialData("delta_at_origin")
CONSTANT = InitialData("constant_one")


@dataclass(frozen=True, eq=False)
class FieldState:
    """Normalized density with accumulated log-mass.

    The unnormalized field is ``density * exp(log_mass) * normalizer``; for a
    delta start ``log_mass`` is ``log Z`` so far, for a constant start it is the
    log of the spatial mean of ``u`` and ``normalizer = L_phys^d``.
    """

    density: np.ndarray = field(repr=False)
    log_mass: float
    step: int
    normalizer: float = 1.0

    def values(self) -> np.ndarray:
        return self.density * (math.exp(self.log_mass) * self.normalizer)

    def height(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(self.density) + self.log_mass + math.log(self.normalizer)


def initial_state(init: InitialData, domain: DomainSpec) -> FieldState:
    return FieldState(init.density(domain), 0.0, 0, init.normalizer(domain))


@dataclass(frozen=True, eq=False)
class BackwardState:
    """Normalized point-to-terminal weights; true weights are ``weights * exp(log_mass) * normalizer``."""

    weights: np.ndarray = field(repr=False)
    log_mass: float
    step: int
    normalizer: float = 1.0

    def values(self) -> np.ndarray:
        return self.weights * (math.exp(self.log_mass) * self.normalizer)


@dataclass(frozen=True, eq=False)
class Model:
    """Derived, immutable per-configuration data shared by every realization."""

    domain: DomainSpec
    kernel: Mollifier
    covariance: CovarianceTable
    propagator: HeatPropagator
    overlap_weights: np.ndarray = field(repr=False)

    @property
    def tilt_shift(self) -> float:
        b = self.domain.beta
        return 0.5 * b * b * self.covariance.r0 * self.domain.dt


@functools.lru_cache(maxsize=64)
def _cached_model(domain: DomainSpec, kernel: Mollifier, symbol: str) -> Model:
    R = covariance_from_mollifier(kernel, domain)
    return Model(domain, kernel, R, build_propagator(domain, symbol), R.spectral_weights(domain))


def make_model(domain: DomainSpec, kernel: Mollifier, propagator: str | HeatPropagator = "lattice") -> Model:
    if isinstance(propagator, HeatPropagator):
        if propagator.dt != domain.dt:
            raise UsageError("propagator time step does not match domain.dt")
        R = covariance_from_mollifier(kernel, domain)
        return Model(domain, kernel, R, propagator, R.spectral_weights(domain))
    return _cached_model(domain, kernel, propagator)


class _Noise:
    """Mollified noise for a batch of rows; rows may share a stream."""

    def __init__(self, streams: Sequence, row_stream: Sequence[int], model: Model):
        self.streams = list(streams)
        self.row_stream = np.asarray(row_stream, dtype=np.int64)
        self.model = model
        self.identity = len(self.streams) == len(self.row_stream) and np.array_equal(
            self.row_stream, np.arange(len(self.streams))
        )

    def xi(self, start: int, stop: int) -> np.ndarray:
        """Shape ``(stop-start, rows, *grid)``."""
        m = self.model
        blocks = [s.xi_block(start, stop, m.domain, m.kernel) for s in self.streams]
        arr = np.stack(blocks, axis=1)
        return arr if self.identity else arr[:, self.row_stream]


def _rowsum(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1).sum(axis=1)


def _expand(v: np.ndarray, d: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * d)


@dataclass(eq=False)
class _BatchResult:
    rho: np.ndarray
    log_mass: np.ndarray
    overlap: np.ndarray
    integrand: np.ndarray
    increments: np.ndarray
    snapshots: dict
    snapshot_log_mass: dict
    failed_at: np.ndarray


def evolve_forward(
    model: Model,
    rho: np.ndarray,
    log_mass: np.ndarray,
    noise: _Noise,
    start: int,
    stop: int,
    snapshot_steps: Iterable[int] = (),
    strict: bool = True,
    fault: str | None = None,
) -> _BatchResult:
    """Advance a batch of normalized densities from ``start`` to ``stop``.

    Per step ``i`` the batch records ``R(rho_i)`` (pre-step density), the
    predictable pairing ``dx^d * sum rho~_i * xi_i`` with ``rho~_i`` the diffused
    density before tilting, and the log-mass increment.
    """
    dom = model.domain
    d = dom.d
    axes = tuple(range(-d, 0))
    shape = dom.shape
    cell = dom.cell
    mult = model.propagator.multipliers
    w = model.overlap_weights
    bdt = dom.beta * dom.dt
    shift = model.tilt_shift
    if fault == "tilt_sign":
        bdt = -bdt
    rho = np.array(rho, dtype=np.float64, copy=True)
    log_mass = np.array(log_mass, dtype=np.float64, copy=True)
    B = rho.shape[0]
    nst = stop - start
    overlap = np.empty((B, nst))
    integrand = np.empty((B, nst))
    incr = np.empty((B, nst))
    failed_at = np.full(B, -1, dtype=np.int64)
    want = set(int(s) for s in snapshot_steps if start <= s <= stop)
    snaps: dict = {}
    snap_lm: dict = {}
    s0 = np.empty(B)
    s1 = np.empty(B)
    integ = np.empty(B)
    for b0 in range(start, stop, BLOCK_STEPS):
        b1 = min(stop, b0 + BLOCK_STEPS)
        xi = noise.xi(b0, b1)
        tilt = np.exp(bdt * xi - shift)
        for k in range(b1 - b0):
            i = b0 + k
            if i in want:
                snaps[i] = rho.copy()
                snap_lm[i] = log_mass.copy()
            F = np.fft.rfftn(rho, axes=axes)
            overlap[:, i - start] = _rowsum((F.real ** 2 + F.imag ** 2) * w)
            F *= mult
            rt = np.fft.irfftn(F, s=shape, axes=axes).reshape(B, -1)
            u = np.empty_like(rt)
            tilt_and_normalize(rt, xi[k].reshape(B, -1), tilt[k].reshape(B, -1), cell, u, s0, integ, s1)
            integrand[:, i - start] = integ
            ratio = s1 / s0
            bad = ~(np.isfinite(ratio) & (ratio > 0))
            if bad.any():
                if strict:
                    raise NumericalFailure("non-finite or vanishing mass", i)
                newly = bad & (failed_at < 0)
                failed_at[newly] = i
                u[bad] = 1.0 / (cell * u.shape[1])
                ratio = np.where(bad, 1.0, ratio)
            incr[:, i - start] = np.log(ratio)
            log_mass += incr[:, i - start]
            rho = u.reshape((B,) + shape)
    if stop in want:
        snaps[stop] = rho.copy()
        snap_lm[stop] = log_mass.copy()
    return _BatchResult(rho, log_mass, overlap, integrand, incr, snaps, snap_lm, failed_at)


def forward_step(state: FieldState, xi: XiSlice, prop: HeatPropagator, domain: DomainSpec, R: CovarianceTable | None = None) -> FieldState:
    """Single diffuse-tilt-renormalize step (reference path; ``run_forward`` batches this)."""
    if xi.step != state.step:
        raise UsageError(f"noise slice step {xi.step} does not match state step {state.step}")
    if R is None:
        raise UsageError("forward_step needs the covariance table for the Ito shift")
    rt = prop.apply(state.density, domain.d)
    s0 = rt.sum()
    tilt = np.exp(domain.beta * domain.dt * xi.values - 0.5 * domain.beta ** 2 * R.r0 * domain.dt)
    u = rt * tilt
    s1 = u.sum()
    ratio = s1 / s0
    if not (np.isfinite(ratio) and ratio > 0):
        raise NumericalFailure("non-finite or vanishing mass", state.step)
    return FieldState(u / (domain.cell * s1), state.log_mass + math.log(ratio), state.step + 1, state.normalizer)


def default_snapshot_steps(n_steps: int) -> tuple[int, ...]:
    """Steps ``0``, powers of two below ``n_steps``, and ``n_steps``."""
    steps = {0, n_steps}
    p = 1
    while p < n_steps:
        steps.add(p)
        p *= 2
    return tuple(sorted(steps))


@dataclass(frozen=True)
class Recording:
    """Which densities a run keeps: ``snapshot_steps=None`` means the geometric default."""

    snapshot_steps: tuple[int, ...] | None = None

    def steps(self, n_steps: int) -> tuple[int, ...]:
        if self.snapshot_steps is None:
            return default_snapshot_steps(n_steps)
        return tuple(sorted(set(int(s) for s in self.snapshot_steps if 0 <= s <= n_steps)))


@dataclass(frozen=True, eq=False)
class ForwardTrajectory:
    """Per-step scalars of one forward run plus stored density snapshots.

    ``log_mass[i]`` is ``log Z_{t_i}`` for a delta start; ``overlap[i]`` is
    ``R(rho_i)`` for ``i = 0 .. n_steps``; ``integrand[i]`` is
    ``dx^d * sum rho~_i xi_i`` (diffused, untilted density) for ``i < n_steps``.
    """

    domain: DomainSpec
    init: InitialData
    log_mass: np.ndarray = field(repr=False)
    overlap: np.ndarray = field(repr=False)
    integrand: np.ndarray = field(repr=False)
    snapshots: dict = field(repr=False)
    final: FieldState = field(repr=False)

    def state(self, step: int) -> FieldState:
        if step not in self.snapshots:
            raise UsageError(f"step {step} was not recorded")
        return FieldState(self.snapshots[step], float(self.log_mass[step]), step, self.init.normalizer(self.domain))

    def height(self, step: int) -> np.ndarray:
        return self.state(step).height()

    @property
    def log_Z(self) -> float:
        return float(self.log_mass[-1])


def _model_for(domain, kernel, propagator) -> Model:
    if isinstance(kernel, Model):
        return kernel
    return make_model(domain, kernel, propagator)


def _final_overlap(model: Model, rho: np.ndarray) -> np.ndarray:
    d = model.domain.d
    F = np.fft.rfftn(rho, axes=tuple(range(-d, 0)))
    return _rowsum((F.real ** 2 + F.imag ** 2) * model.overlap_weights)


def run_forward_batch(
    model: Model,
    streams: Sequence,
    inits: Sequence[InitialData],
    row_stream: Sequence[int] | None = None,
    snapshot_steps: Iterable[int] = (),
    strict: bool = True,
    fault: str | None = None,
) -> tuple[_BatchResult, np.ndarray]:
    """Run several rows at once; returns the batch result and the final-step overlaps."""
    dom = model.domain
    if row_stream is None:
        row_stream = list(range(len(streams)))
    rho0 = np.stack([ini.density(dom) for ini in inits])
    res = evolve_forward(
        model, rho0, np.zeros(len(inits)), _Noise(streams, row_stream, model),
        0, dom.n_steps, snapshot_steps, strict=strict, fault=fault,
    )
    return res, _final_overlap(model, res.rho)


def run_forward(
    domain: DomainSpec,
    kernel: Mollifier | Model,
    stream: NoiseStream,
    init: InitialData = DELTA,
    record: Recording = Recording(),
    propagator: str | HeatPropagator = "lattice",
) -> ForwardTrajectory:
    model = _model_for(domain, kernel, propagator)
    steps = record.steps(domain.n_steps)
    res, last_ov = run_forward_batch(model, [stream], [init], snapshot_steps=steps)
    log_mass = np.concatenate([[0.0], np.cumsum(res.increments[0])])
    snaps = {s: res.snapshots[s][0] for s in steps}
    final = FieldState(res.rho[0], float(res.log_mass[0]), domain.n_steps, init.normalizer(domain))
    return ForwardTrajectory(
        domain=domain,
        init=init,
        log_mass=log_mass,
        overlap=np.concatenate([res.overlap[0], last_ov]),
        integrand=res.integrand[0],
        snapshots=snaps,
        final=final,
    )


def _terminal_weights(terminal, domain: DomainSpec) -> tuple[np.ndarray, float]:
    if terminal == "constant_one":
        return np.full(domain.shape, 1.0 / domain.volume), domain.volume
    site = tuple(int(s) % domain.n for s in np.atleast_1d(terminal))
    if len(site) != domain.d:
        raise UsageError(f"terminal site {terminal!r} does not have {domain.d} coordinates")
    w = np.zeros(domain.shape)
    w[site] = 1.0 / domain.cell
    return w, 1.0


def _backward_sweep(model: Model, W: np.ndarray, logm: np.ndarray, xi: np.ndarray, steps: range, visit=None):
    """Apply ``W <- P(tilt_i * W)`` for ``i`` in ``steps`` (descending); ``xi`` indexed by ``i - steps.stop + 1 ...``."""
    dom = model.domain
    d = dom.d
    axes = tuple(range(-d, 0))
    mult = model.propagator.multipliers
    bdt = dom.beta * dom.dt
    shift = model.tilt_shift
    base = steps[-1] if len(steps) else 0
    for i in steps:
        t = np.exp(bdt * xi[i - base] - shift)
        F = np.fft.rfftn(W * t, axes=axes)
        F *= mult
        v = np.fft.irfftn(F, s=dom.shape, axes=axes)
        s = _rowsum(v)
        if not np.all(np.isfinite(s) & (s > 0)):
            raise NumericalFailure("non-finite or vanishing backward mass", i)
        W = v / _expand(dom.cell * s, d)
        logm = logm + np.log(dom.cell * s)
        if visit is not None:
            visit(i, W, logm)
    return W, logm


@dataclass(frozen=True, eq=False)
class BackwardTrajectory:
    domain: DomainSpec
    terminal: object
    states: dict = field(repr=False)

    def state(self, step: int) -> BackwardState:
        return self.states[step]


def run_backward(
    domain: DomainSpec,
    kernel: Mollifier | Model,
    stream: NoiseStream,
    terminal="constant_one",
    down_to: int = 0,
    record: Iterable[int] | None = None,
    propagator: str | HeatPropagator = "lattice",
) -> BackwardTrajectory:
    """Time-reversed recursion from ``n_steps`` down to ``down_to``.

    The caller must pass the stream used by the paired forward run; a mismatch
    cannot be detected here.
    """
    model = _model_for(domain, kernel, propagator)
    if not 0 <= down_to <= domain.n_steps:
        raise UsageError(f"down_to={down_to} outside [0, {domain.n_steps}]")
    W0, norm = _terminal_weights(terminal, domain)
    keep = set(range(down_to, domain.n_steps + 1)) if record is None else set(record)
    states = {}
    if domain.n_steps in keep:
        states[domain.n_steps] = BackwardState(W0.copy(), 0.0, domain.n_steps, norm)
    W = W0[None]
    logm = np.zeros(1)
    noise = _Noise([stream], [0], model)

    def visit(i, Wi, lm):
        if i in keep:
            states[i] = BackwardState(Wi[0].copy(), float(lm[0]), i, norm)

    top = domain.n_steps
    while top > down_to:
        lo = max(down_to, top - BLOCK_STEPS)
        xi = noise.xi(lo, top)
        W, logm = _backward_sweep(model, W, logm, xi, range(top - 1, lo - 1, -1), visit)
        top = lo
    return BackwardTrajectory(domain, terminal, states)


def gibbs_marginal(fwd: FieldState, bwd: BackwardState, domain: DomainSpec) -> np.ndarray:
    """Normalized ``fwd * bwd``: the time-``t_i`` marginal of the length-``T`` polymer."""
    if fwd.step != bwd.step:
        raise UsageError(f"forward step {fwd.step} != backward step {bwd.step}")
    p = fwd.density * bwd.weights
    s = p.sum()
    if not (np.isfinite(s) and s > 0):
        raise NumericalFailure("Gibbs marginal has no mass", fwd.step)
    return p / (domain.cell * s)


def paired_sweep(
    model: Model,
    stream: NoiseStream,
    init: InitialData,
    terminals: Sequence,
    visit: Callable[[int, np.ndarray, np.ndarray], None],
    checkpoint: int | None = None,
) -> float:
    """Visit ``(i, fwd_i, bwd_i)`` for ``i = n_steps, ..., 0`` without storing the full forward run.

    ``fwd_i`` is the normalized forward density and ``bwd_i`` the stack of
    normalized backward weights, one row per terminal.  Forward densities are
    kept at checkpoints every ``checkpoint`` steps and recomputed segment by
    segment, so memory is ``O((n_steps / C + C) n^d)``.  Returns the forward
    log-mass at ``n_steps``.
    """
    dom = model.domain
    n = dom.n_steps
    C = checkpoint or max(1, int(math.ceil(math.sqrt(max(n, 1)))))
    noise = _Noise([stream], [0], model)
    marks = list(range(0, n, C))
    res = evolve_forward(model, init.density(dom)[None], np.zeros(1), noise, 0, n, snapshot_steps=marks)
    W = np.stack([_terminal_weights(t, dom)[0] for t in terminals])
    logm = np.zeros(len(terminals))
    visit(n, res.rho[0], W)
    for a in reversed(marks):
        b = min(a + C, n)
        xi = noise.xi(a, b)
        seg = [res.snapshots[a]]
        rho = res.snapshots[a]
        lm = res.snapshot_log_mass[a]
        for k in range(a, b - 1):
            r = evolve_forward(model, rho, lm, _Fixed(xi[k - a: k - a + 1]), k, k + 1)
            rho, lm = r.rho, r.log_mass
            seg.append(rho)

        def _v(i, Wi, _lm, seg=seg, a=a):
            visit(i, seg[i - a][0], Wi)

        W, logm = _backward_sweep(model, W, logm, xi[:, 0], range(b - 1, a - 1, -1), _v)
    return float(res.log_mass[0])


class _Fixed:
    """Noise source replaying a precomputed xi block (already shaped ``(K, rows, *grid)``)."""

    def __init__(self, xi: np.ndarray):
        self._xi = xi

    def xi(self, start: int, stop: int) -> np.ndarray:
        return self._xi[: stop - start]


_HEADER = struct.Struct("<iiqd8x")


def dump_field_binary(path: str | Path, values: np.ndarray, domain: DomainSpec, step: int) -> None:
    """32-byte header ``(int32 d, int32 n, int64 step, float64 dt, 8 pad)`` then LE float64 row-major."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(domain.d, domain.n, int(step), float(domain.dt)))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_field_binary(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    d, n, step, dt = _HEADER.unpack(raw[: _HEADER.size])
    arr = np.frombuffer(raw[_HEADER.size:], dtype="<f8").reshape((n,) * d)
    return arr.copy(), {"d": d, "n": n, "step": step, "dt": dt}


def dump_field_csv(path: str | Path, values: np.ndarray) -> None:
    """CSV rows ``(site index, value)`` with the row-major flat site index."""
    flat = np.asarray(values).ravel()
    with open(path, "w") as fh:
        fh.write("site,value\n")
        for i, v in enumerate(flat):
            fh.write(f"{i},{format(float(v), '.17g')}\n")
