"""Experiment configuration: one JSON document with every default written out.

The configuration is validated in full before any compute starts, round-trips
through :func:`to_json` / :func:`from_json` exactly, and is fingerprinted by
:func:`config_hash` so that outputs can be matched to the settings that
produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .environment import KERNEL_SHAPES, DomainSpec, build_mollifier
from .errors import ConfigurationError
from .solver import SYMBOLS

TOOL_VERSION = "0.1.0"
SWEEP_KINDS = ("T", "beta", "dt")


@dataclass(frozen=True)
class DomainBlock:
    d: int = 1
    n: int = 512
    dx: float = 0.25
    dt: float = 0.01
    T_grid: tuple[float, ...] = (25.0, 50.0, 100.0, 200.0)
    propagator: str = "lattice"


@dataclass(frozen=True)
class KernelBlock:
    shape: str = "triangular"
    radius: int = 1
    amplitude: float = 1.0


@dataclass(frozen=True)
class EnsembleBlock:
    N: int = 2000
    master_seed: int = 20240611
    boundary_mass_threshold: float = 1e-4
    # (T, N) pairs that override N at particular horizons
    N_overrides: tuple[tuple[float, int], ...] = ((200.0, 4000),)
    chunk: int = 32
    fixed_T_overlap: bool = False

    def n_for(self, T: float) -> int:
        for t, n in self.N_overrides:
            if math.isclose(t, T):
                return int(n)
        return int(self.N)


@dataclass(frozen=True)
class RecordingBlock:
    # "geometric" (0, powers of two, n_steps) or an explicit list of steps
    snapshot_policy: str | tuple[int, ...] = "geometric"
    # constant-start height snapshots, recorded in the ensemble at horizon h_T
    h_times: tuple[float, ...] = (25.0, 50.0, 100.0, 200.0)
    bound_times: tuple[float, ...] = (50.0, 200.0)
    h_T: float = 200.0
    h_realizations: int = 1000
    # empty means the full field is stored
    h_sites: tuple[int, ...] = ()
    lags: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    malliavin_targets: tuple[int, ...] = (0,)
    bks_M_grid: tuple[int, ...] = (4, 8, 16)
    bks_times: tuple[float, ...] = (50.0, 200.0)
    bks_N: int = 24
    bks_steps: int = 16
    bks_site_budget: int = 64


@dataclass(frozen=True)
class ToleranceBlock:
    level: float = 0.01
    ci_level: float = 0.95
    n_sigma: float = 3.0
    var_ratio_band: tuple[float, float] = (0.75, 1.25)
    scaling_max_over_min: float = 4.0
    varhM_max_over_min: float = 4.0
    ks_resamples: int = 2000
    bootstrap_resamples: int = 2000
    light_tail_limit: float = 2.0


@dataclass(frozen=True)
class SweepBlock:
    kind: str = "T"
    values: tuple[float, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    domain: DomainBlock = field(default_factory=DomainBlock)
    kernel: KernelBlock = field(default_factory=KernelBlock)
    beta: float = 1.0
    ensemble: EnsembleBlock = field(default_factory=EnsembleBlock)
    recording: RecordingBlock = field(default_factory=RecordingBlock)
    tolerances: ToleranceBlock = field(default_factory=ToleranceBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    out_dir: str | None = None

    def n_steps(self, T: float) -> int:
        return steps_for(T, self.domain.dt)

    def domain_spec(self, T: float | None = None) -> DomainSpec:
        T = max(self.domain.T_grid) if T is None else T
        b = self.domain
        return DomainSpec(b.d, b.n, b.dx, b.dt, self.n_steps(T), self.beta)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, ensemble=dataclasses.replace(self.ensemble, master_seed=int(seed)))

    def with_T_grid(self, T_grid) -> "ExperimentConfig":
        return dataclasses.replace(self, domain=dataclasses.replace(self.domain, T_grid=tuple(float(t) for t in T_grid)))

    def with_beta(self, beta: float) -> "ExperimentConfig":
        return dataclasses.replace(self, beta=float(beta))


def steps_for(T: float, dt: float) -> int:
    n = round(T / dt)
    if not math.isclose(n * dt, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ConfigurationError(f"horizon T={T!r} is not a whole number of steps dt={dt!r}")
    return int(n)


_BLOCKS = {
    "domain": DomainBlock,
    "kernel": KernelBlock,
    "ensemble": EnsembleBlock,
    "recording": RecordingBlock,
    "tolerances": ToleranceBlock,
    "sweep": SweepBlock,
}


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def _coerce(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _BLOCKS and where == "config":
            kwargs[k] = _coerce(_BLOCKS[k], v, k)
        else:
            kwargs[k] = _tupleize(v)
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _coerce(ExperimentConfig, data, "config")
    validate(cfg)
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def from_json(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return from_json(text)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 (first 16 hex digits) of the canonical JSON, output paths excluded."""
    data = to_dict(cfg)
    data.pop("out_dir", None)
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _positive_times(values, name, dt):
    for t in values:
        if not (isinstance(t, (int, float)) and t > 0):
            raise ConfigurationError(f"{name} entries must be positive numbers, got {t!r}")
        steps_for(float(t), dt)


def validate(cfg: ExperimentConfig) -> None:
    """Check every precondition the commands rely on; raises ConfigurationError."""
    b = cfg.domain
    if b.propagator not in SYMBOLS:
        raise ConfigurationError(f"propagator must be one of {SYMBOLS}, got {b.propagator!r}")
    if not b.T_grid:
        raise ConfigurationError("domain.T_grid must not be empty")
    _positive_times(b.T_grid, "domain.T_grid", b.dt)
    if len(set(b.T_grid)) != len(b.T_grid):
        raise ConfigurationError("domain.T_grid has repeated values")
    dom = cfg.domain_spec(b.T_grid[0])
    k = cfg.kernel
    if k.shape not in KERNEL_SHAPES:
        raise ConfigurationError(f"kernel.shape must be one of {KERNEL_SHAPES}, got {k.shape!r}")
    build_mollifier(k.shape, k.radius, k.amplitude, dom)
    e = cfg.ensemble
    if int(e.N) != e.N or e.N < 1:
        raise ConfigurationError("ensemble.N must be an integer >= 1")
    for t, n in e.N_overrides:
        if int(n) != n or n < 1:
            raise ConfigurationError("ensemble.N_overrides counts must be integers >= 1")
    if not 0 <= int(e.master_seed) < 2 ** 64 or int(e.master_seed) != e.master_seed:
        raise ConfigurationError("ensemble.master_seed must be an unsigned 64-bit integer")
    if not 0 <= e.boundary_mass_threshold <= 1:
        raise ConfigurationError("ensemble.boundary_mass_threshold must lie in [0, 1]")
    if int(e.chunk) != e.chunk or e.chunk < 1:
        raise ConfigurationError("ensemble.chunk must be an integer >= 1")
    r = cfg.recording
    if isinstance(r.snapshot_policy, str):
        if r.snapshot_policy != "geometric":
            raise ConfigurationError("recording.snapshot_policy must be 'geometric' or a list of steps")
    elif any(int(s) != s or s < 0 for s in r.snapshot_policy):
        raise ConfigurationError("recording.snapshot_policy steps must be nonnegative integers")
    _positive_times(r.h_times, "recording.h_times", b.dt)
    if r.h_times:
        if r.h_T not in b.T_grid:
            raise ConfigurationError("recording.h_T must be one of domain.T_grid")
        if max(r.h_times) > r.h_T:
            raise ConfigurationError("recording.h_times must not exceed recording.h_T")
        if r.h_realizations < 2:
            raise ConfigurationError("recording.h_realizations must be >= 2")
    if any(not any(math.isclose(t, u) for u in r.h_times) for t in r.bound_times):
        raise ConfigurationError("recording.bound_times must be a subset of recording.h_times")
    if any(int(s) != s or not 0 <= s < b.n ** b.d for s in r.h_sites):
        raise ConfigurationError("recording.h_sites must be site indices in [0, n)")
    if any(int(k_) != k_ or not 0 < k_ < b.n for k_ in r.lags):
        raise ConfigurationError("recording.lags must be integers in (0, n)")
    if any(int(s) != s for s in r.malliavin_targets):
        raise ConfigurationError("recording.malliavin_targets must be integer sites")
    if any(int(M) != M or M < 0 for M in r.bks_M_grid):
        raise ConfigurationError("recording.bks_M_grid must be nonnegative integers")
    if r.bks_M_grid:
        nbox = (2 * max(r.bks_M_grid) + 1) ** b.d
        if nbox > r.bks_site_budget:
            raise ConfigurationError(f"largest BKS box has {nbox} sites, above bks_site_budget={r.bks_site_budget}")
        if 2 * max(r.bks_M_grid) + 1 > b.n:
            raise ConfigurationError("largest BKS box exceeds the grid")
    _positive_times(r.bks_times, "recording.bks_times", b.dt)
    if r.bks_times and (r.bks_N < 2 or r.bks_steps < 1):
        raise ConfigurationError("recording.bks_N must be >= 2 and bks_steps >= 1")
    t = cfg.tolerances
    if not 0 < t.level < 1 or not 0 < t.ci_level < 1:
        raise ConfigurationError("tolerances.level and ci_level must lie in (0, 1)")
    lo, hi = t.var_ratio_band
    if not 0 < lo < hi:
        raise ConfigurationError("tolerances.var_ratio_band must satisfy 0 < lo < hi")
    if t.ks_resamples < 100 or t.bootstrap_resamples < 100:
        raise ConfigurationError("resample counts must be >= 100")
    s = cfg.sweep
    if s.kind not in SWEEP_KINDS:
        raise ConfigurationError(f"sweep.kind must be one of {SWEEP_KINDS}")
    if s.kind == "T":
        _positive_times(s.values, "sweep.values", b.dt)
    elif s.kind == "dt":
        if any(not (isinstance(v, (int, float)) and v > 0) for v in s.values):
            raise ConfigurationError("dt sweep values must be positive")
    elif any(not (isinstance(v, (int, float)) and v >= 0) for v in s.values):
        raise ConfigurationError("beta sweep values must be >= 0")
