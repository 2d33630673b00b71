"""Discrete model: periodic grid, mollifier, covariance table and noise slices.

The grid model is the ground truth.  ``phi`` is defined by its samples on grid
offsets and ``R`` by the exact discrete autocorrelation, so mass identities such
as ``dx^d * sum_y D(s, y) = beta * ||phi||_1`` hold in floating point rather than
approximately.  White noise on a cell has variance ``1 / (dt * dx^d)``, which
makes ``Cov(xi(x), xi(x + k)) = R(k) / dt``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .errors import ConfigurationError, UsageError

KERNEL_SHAPES = ("triangular", "quartic_bump")


@dataclass(frozen=True)
class DomainSpec:
    """Periodic grid with ``n`` sites per axis, spacing ``dx``, and ``n_steps`` steps of ``dt``."""

    d: int
    n: int
    dx: float
    dt: float
    n_steps: int
    beta: float

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ConfigurationError(f"d must be 1 or 2, got {self.d}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError(f"n must be a positive integer, got {self.n}")
        if not self.dx > 0 or not self.dt > 0:
            raise ConfigurationError("dx and dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ConfigurationError(f"n_steps must be a nonnegative integer, got {self.n_steps}")
        if not self.beta >= 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def n_sites(self) -> int:
        return self.n ** self.d

    @property
    def cell(self) -> float:
        """Cell volume ``dx^d``."""
        return self.dx ** self.d

    @property
    def L_phys(self) -> float:
        return self.n * self.dx

    @property
    def volume(self) -> float:
        return self.L_phys ** self.d

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    def with_steps(self, n_steps: int) -> "DomainSpec":
        return DomainSpec(self.d, self.n, self.dx, self.dt, int(n_steps), self.beta)

    def with_beta(self, beta: float) -> "DomainSpec":
        return DomainSpec(self.d, self.n, self.dx, self.dt, self.n_steps, float(beta))

    def signed_offsets(self) -> np.ndarray:
        """Signed site offset of each index along one axis (``-n/2 <= k < n/2``)."""
        k = np.arange(self.n)
        return np.where(k < (self.n + 1) // 2, k, k - self.n)


def _check_wrap(radius: int, domain: DomainSpec) -> None:
    # R has support 2*radius sites; it must stay inside half the torus.
    if 2 * radius * domain.dx >= domain.L_phys / 2:
        raise ConfigurationError(
            f"wrap-safety violated: 2*radius*dx = {2 * radius * domain.dx:g} must be "
            f"< L_phys/2 = {domain.L_phys / 2:g}"
        )


def _taps(values: np.ndarray, domain: DomainSpec):
    """Nonzero entries of a kernel array as (axis-0 offset, axis-1 offset, weight)."""
    off = domain.signed_offsets()
    idx = np.nonzero(values)
    w = values[idx].astype(np.float64)
    if domain.d == 1:
        ti = np.zeros(len(w), dtype=np.int64)
        tj = off[idx[0]].astype(np.int64)
    else:
        ti = off[idx[0]].astype(np.int64)
        tj = off[idx[1]].astype(np.int64)
    return ti, tj, w


@dataclass(frozen=True, eq=False)
class Mollifier:
    """Grid samples of ``phi`` stored on the full periodic grid (offset 0 at index 0)."""

    values: np.ndarray = field(repr=False)
    radius: int
    l1: float
    linf: float
    shape_name: str = "custom"

    def offsets_and_values(self, domain: DomainSpec):
        """(signed offsets, values) of the nonzero samples, row-major order."""
        ti, tj, w = _taps(self.values, domain)
        if domain.d == 1:
            return tj[:, None], w
        return np.stack([ti, tj], axis=1), w

    def taps(self, domain: DomainSpec):
        return _taps(self.values, domain)


def _radial_distance(domain: DomainSpec) -> np.ndarray:
    off = domain.signed_offsets().astype(np.float64)
    grids = np.meshgrid(*([off] * domain.d), indexing="ij")
    return np.sqrt(sum(g * g for g in grids))


def build_mollifier(shape: str, radius: int, amplitude: float, domain: DomainSpec) -> Mollifier:
    """Sample a radial, nonnegative, compactly supported kernel on the grid.

    ``triangular``: ``amplitude * (1 - |k| / (radius + 1))`` for ``|k| <= radius`` (sites).
    ``quartic_bump``: ``amplitude * (1 - (|k| / radius)^2)^2`` for ``|k| < radius``.
    """
    if shape not in KERNEL_SHAPES:
        raise ConfigurationError(f"unknown kernel shape {shape!r}; expected one of {KERNEL_SHAPES}")
    if int(radius) != radius or radius < 1:
        raise ConfigurationError(f"kernel radius must be an integer >= 1, got {radius}")
    if not amplitude > 0:
        raise ConfigurationError(f"kernel amplitude must be > 0, got {amplitude}")
    radius = int(radius)
    _check_wrap(radius, domain)
    r = _radial_distance(domain)
    if shape == "triangular":
        vals = np.where(r <= radius, amplitude * (1.0 - r / (radius + 1)), 0.0)
    else:
        vals = np.where(r < radius, amplitude * (1.0 - (r / radius) ** 2) ** 2, 0.0)
    vals = np.maximum(vals, 0.0)
    return Mollifier(
        values=vals,
        radius=radius,
        l1=float(domain.cell * vals.sum()),
        linf=float(vals.max()),
        shape_name=shape,
    )


def mollifier_from_values(values: np.ndarray, domain: DomainSpec) -> Mollifier:
    """Wrap an explicit kernel array (offset 0 at index 0) as a Mollifier."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != domain.shape:
        raise UsageError(f"kernel shape {values.shape} does not match grid {domain.shape}")
    if np.any(values < 0):
        raise ConfigurationError("kernel values must be nonnegative")
    if not values.any():
        raise ConfigurationError("kernel is identically zero")
    nz = np.nonzero(values)
    off = domain.signed_offsets()
    radius = int(max(np.abs(off[i]).max() for i in nz))
    _check_wrap(radius, domain)
    return Mollifier(values, max(radius, 0), float(domain.cell * values.sum()), float(values.max()))


@dataclass(frozen=True, eq=False)
class CovarianceTable:
    """``R(k) = dx^d * sum_j phi(j + k) phi(j)`` on the periodic grid (offset 0 at index 0)."""

    values: np.ndarray = field(repr=False)
    r0: float

    def at(self, *offset: int) -> float:
        return float(self.values[tuple(o % s for o, s in zip(offset, self.values.shape))])

    def spectral_weights(self, domain: DomainSpec) -> np.ndarray:
        """Weights ``w`` on rfft modes with ``R(f) = sum w * |rfftn(f)|^2``.

        The factor 2 on interior modes of the last axis accounts for the
        conjugate half dropped by the real transform.
        """
        rhat = np.fft.rfftn(self.values).real
        mult = np.full(rhat.shape[-1], 2.0)
        mult[0] = 1.0
        if domain.n % 2 == 0:
            mult[-1] = 1.0
        return domain.cell ** 2 * rhat * mult / domain.n_sites


def covariance_from_mollifier(m: Mollifier, domain: DomainSpec) -> CovarianceTable:
    """Exact discrete autocorrelation of ``phi``, accumulated over its nonzero taps."""
    _check_wrap(m.radius, domain)
    if m.values.shape != domain.shape:
        raise UsageError("mollifier was built for a different grid")
    pos, w = m.offsets_and_values(domain)
    R = np.zeros(domain.shape)
    for a in range(len(w)):
        for b in range(len(w)):
            k = tuple(int(x) % domain.n for x in (pos[a] - pos[b]))
            R[k] += w[a] * w[b]
    R *= domain.cell
    return CovarianceTable(values=R, r0=float(R[(0,) * domain.d]))


@dataclass(frozen=True)
class NoiseStream:
    """Seekable white-noise source keyed by ``(master_seed, realization_id)``."""

    master_seed: int
    realization_id: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ConfigurationError("master_seed must fit in 64 unsigned bits")
        if not 0 <= int(self.realization_id) < 2 ** 64:
            raise ConfigurationError("realization_id must fit in 64 unsigned bits")

    def eta_block(self, start: int, stop: int, domain: DomainSpec) -> np.ndarray:
        """White-noise slices for steps ``start .. stop-1``, shape ``(stop-start, *grid)``."""
        z = _rng.standard_normal_block(
            np.uint64(self.master_seed), np.uint64(self.realization_id),
            int(start), int(stop - start), domain.n_sites,
        )
        z *= 1.0 / math.sqrt(domain.dt * domain.cell)
        return z.reshape((stop - start,) + domain.shape)

    def xi_block(self, start: int, stop: int, domain: DomainSpec, m: Mollifier) -> np.ndarray:
        """Mollified slices for steps ``start .. stop-1``."""
        return mollify_array(self.eta_block(start, stop, domain), m, domain)


@dataclass(frozen=True, eq=False)
class NoiseSlice:
    values: np.ndarray = field(repr=False)
    step: int


@dataclass(frozen=True, eq=False)
class XiSlice:
    values: np.ndarray = field(repr=False)
    step: int


def sample_noise_slice(stream: NoiseStream, step: int, domain: DomainSpec) -> NoiseSlice:
    if not 0 <= step < domain.n_steps:
        raise UsageError(f"step {step} outside [0, {domain.n_steps})")
    return NoiseSlice(stream.eta_block(step, step + 1, domain)[0], int(step))


def mollify_array(eta: np.ndarray, m: Mollifier, domain: DomainSpec) -> np.ndarray:
    """Circular convolution ``dx^d * sum_k phi(k) eta(x - k)`` over the trailing grid axes."""
    lead = eta.shape[: eta.ndim - domain.d]
    if eta.shape[eta.ndim - domain.d:] != domain.shape:
        raise UsageError(f"field shape {eta.shape} does not end with grid {domain.shape}")
    ti, tj, w = m.taps(domain)
    n0 = 1 if domain.d == 1 else domain.n
    flat = np.ascontiguousarray(eta, dtype=np.float64).reshape((-1, n0, domain.n))
    out = _rng.circular_convolve(flat, ti, tj, w * domain.cell)
    return out.reshape(lead + domain.shape)


def mollify_slice(eta: NoiseSlice, m: Mollifier, domain: DomainSpec) -> XiSlice:
    return XiSlice(mollify_array(eta.values, m, domain), eta.step)


def _write_table(path, arr: np.ndarray, domain: DomainSpec) -> None:
    off = domain.signed_offsets()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"offset{a}" for a in range(domain.d)] + ["value"])
        for idx in itertools.product(range(domain.n), repeat=domain.d):
            v = arr[idx]
            if v != 0.0:
                w.writerow([int(off[i]) for i in idx] + [repr(float(v))])


def export_kernel_csv(m: Mollifier, domain: DomainSpec, path: str | Path) -> None:
    """Nonzero kernel samples as CSV rows ``(offset..., value)``."""
    _write_table(path, m.values, domain)


def export_covariance_csv(R: CovarianceTable, domain: DomainSpec, path: str | Path) -> None:
    _write_table(path, R.values, domain)
