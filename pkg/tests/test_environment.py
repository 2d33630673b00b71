import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polymerlab import _rng
from polymerlab.environment import (
    DomainSpec,
    NoiseStream,
    build_mollifier,
    covariance_from_mollifier,
    export_covariance_csv,
    export_kernel_csv,
    mollifier_from_values,
    mollify_array,
    mollify_slice,
    sample_noise_slice,
)
from polymerlab.errors import ConfigurationError, UsageError


def dom1(n=16, dx=1.0, dt=0.1, n_steps=4, beta=1.0):
    return DomainSpec(1, n, dx, dt, n_steps, beta)


def brute_autocorr(phi, cell):
    n = phi.shape[0]
    return np.array([cell * sum(phi[(j + k) % n] * phi[j] for j in range(n)) for k in range(n)])


# ---------------------------------------------------------------- RNG


@pytest.mark.parametrize(
    "counter, key, expected",
    [
        ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
        ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
        ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
         (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
    ],
)
def test_philox_known_answers(counter, key, expected):
    out = _rng.philox4x32_10(np.array(counter, dtype=np.uint64), np.array(key, dtype=np.uint64))
    assert tuple(int(v) for v in out) == expected


def test_standard_normal_block_moments():
    z = _rng.standard_normal_block(np.uint64(7), np.uint64(3), 0, 200, 512).ravel()
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * math.sqrt(2 / z.size)


# ---------------------------------------------------------------- mollifier


def test_triangular_samples():
    d = dom1()
    m = build_mollifier("triangular", 1, 1.0, d)
    assert m.values[[-1, 0, 1]].tolist() == [0.5, 1.0, 0.5]
    assert m.values[2:-1].sum() == 0
    assert m.l1 == 2.0
    assert m.linf == 1.0


def test_zero_amplitude_rejected():
    with pytest.raises(ConfigurationError):
        build_mollifier("triangular", 1, 0.0, dom1())


def test_wrap_safety_rejected():
    with pytest.raises(ConfigurationError, match="wrap-safety"):
        build_mollifier("triangular", 4, 1.0, dom1(n=16))


@pytest.mark.parametrize("radius", [1, 2, 3])
@pytest.mark.parametrize("amp", [0.3, 1.0, 2.5])
def test_quartic_bump_support(radius, amp):
    d = dom1(n=32)
    m = build_mollifier("quartic_bump", radius, amp, d)
    assert np.all(m.values >= 0)
    assert m.values[radius] == 0 and m.values[-radius] == 0
    assert m.values[0] == amp


def test_quartic_bump_2d_radial():
    d = DomainSpec(2, 16, 0.5, 0.01, 1, 1.0)
    m = build_mollifier("quartic_bump", 3, 1.0, d)
    assert np.allclose(m.values, m.values.T)
    assert np.allclose(m.values, np.roll(m.values[::-1], 1, axis=0))


# ---------------------------------------------------------------- covariance


def test_triangular_covariance_values():
    d = dom1()
    R = covariance_from_mollifier(build_mollifier("triangular", 1, 1.0, d), d)
    assert R.r0 == 1.5
    assert R.at(1) == R.at(-1) == 1.0
    assert R.at(2) == R.at(-2) == 0.25
    assert np.all(R.values[3:-2] == 0)


def test_single_site_covariance():
    d = dom1(dx=0.5)
    phi = np.zeros(16)
    phi[0] = 3.0
    R = covariance_from_mollifier(mollifier_from_values(phi, d), d)
    assert R.r0 == pytest.approx(9.0 * 0.5, abs=0)
    assert np.all(R.values[1:] == 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3).filter(lambda v: sum(v) > 0), st.floats(0.1, 2.0))
def test_covariance_matches_brute_force(vals, dx):
    d = dom1(n=16, dx=dx)
    phi = np.zeros(16)
    phi[[-1, 0, 1]] = vals
    R = covariance_from_mollifier(mollifier_from_values(phi, d), d)
    ref = brute_autocorr(phi, d.cell)
    assert np.allclose(R.values, ref, rtol=1e-13, atol=1e-13)
    # symmetric, maximal at 0, positive semidefinite
    assert np.array_equal(R.values, np.roll(R.values[::-1], 1))
    assert np.all(R.r0 >= np.abs(R.values))
    assert np.fft.fft(R.values).real.min() >= -1e-10


def test_covariance_2d_brute_force():
    d = DomainSpec(2, 12, 0.5, 0.01, 1, 1.0)
    m = build_mollifier("triangular", 2, 1.0, d)
    phi = m.values
    R = covariance_from_mollifier(m, d)
    n = 12
    ref = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            ref[a, b] = d.cell * (np.roll(phi, (-a, -b), axis=(0, 1)) * phi).sum()
    assert np.allclose(R.values, ref, atol=1e-13)


def test_mismatched_grid_rejected():
    m = build_mollifier("triangular", 1, 1.0, dom1(n=16))
    with pytest.raises(UsageError):
        covariance_from_mollifier(m, dom1(n=32))


# ---------------------------------------------------------------- noise


def test_noise_slice_deterministic():
    d = dom1(n=64)
    s = NoiseStream(99, 5)
    a = sample_noise_slice(s, 2, d).values
    b = sample_noise_slice(s, 2, d).values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_noise_slice(s, 3, d).values)


def test_noise_slice_step_bounds():
    with pytest.raises(UsageError):
        sample_noise_slice(NoiseStream(1), 4, dom1(n_steps=4))


def test_noise_seekable():
    d = dom1(n=64, n_steps=40)
    s = NoiseStream(3, 11)
    blk = s.eta_block(0, 40, d)
    for i in (0, 17, 39):
        assert np.array_equal(blk[i], s.eta_block(i, i + 1, d)[0])


def test_noise_variance_convention():
    # dt=0.1, dx=1: variance 1/(dt dx) = 10 over 1e5 entries
    d = DomainSpec(1, 1000, 1.0, 0.1, 100, 1.0)
    z = NoiseStream(2024, 0).eta_block(0, 100, d)
    assert abs(z.var() / 10.0 - 1) < 0.02


def test_noise_independent_across_ids():
    d = DomainSpec(1, 1000, 1.0, 0.1, 100, 1.0)
    a = NoiseStream(2024, 0).eta_block(0, 100, d).ravel()
    b = NoiseStream(2024, 1).eta_block(0, 100, d).ravel()
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 3 / math.sqrt(a.size)


def test_noise_independent_across_seeds():
    d = DomainSpec(1, 1000, 1.0, 0.1, 100, 1.0)
    a = NoiseStream(1, 0).eta_block(0, 100, d).ravel()
    b = NoiseStream(2, 0).eta_block(0, 100, d).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 3 / math.sqrt(a.size)


def test_stream_rejects_out_of_range():
    with pytest.raises(ConfigurationError):
        NoiseStream(-1)
    with pytest.raises(ConfigurationError):
        NoiseStream(0, 2 ** 64)


# ---------------------------------------------------------------- mollify


def test_mollify_impulse_returns_kernel():
    d = dom1(n=16, dx=0.5)
    m = build_mollifier("triangular", 1, 1.0, d)
    eta = np.zeros(16)
    eta[0] = 1.0 / d.cell
    assert np.allclose(mollify_array(eta[None], m, d)[0], m.values, atol=1e-15)


def test_mollify_zero():
    d = dom1()
    m = build_mollifier("triangular", 1, 1.0, d)
    assert not mollify_array(np.zeros((1, 16)), m, d).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(-3, 3), st.floats(-3, 3))
def test_mollify_linear(seed, a, b):
    d = dom1(n=32)
    m = build_mollifier("triangular", 2, 1.0, d)
    x = np.random.default_rng(seed).normal(size=(2, 32))
    lhs = mollify_array((a * x[0] + b * x[1])[None], m, d)[0]
    rhs = a * mollify_array(x[:1], m, d)[0] + b * mollify_array(x[1:], m, d)[0]
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_mollify_matches_direct_convolution(rng):
    d = DomainSpec(2, 10, 0.5, 0.01, 1, 1.0)
    m = build_mollifier("triangular", 2, 1.0, d)
    eta = rng.normal(size=(10, 10))
    out = mollify_array(eta[None], m, d)[0]
    ref = np.zeros_like(eta)
    for a in range(10):
        for b in range(10):
            ref += d.cell * m.values[a, b] * np.roll(eta, (a, b), axis=(0, 1))
    assert np.allclose(out, ref, atol=1e-12)


def test_mollify_slice_keeps_step():
    d = dom1(n=32)
    m = build_mollifier("triangular", 1, 1.0, d)
    eta = sample_noise_slice(NoiseStream(1), 2, d)
    xi = mollify_slice(eta, m, d)
    assert xi.step == 2
    assert np.allclose(xi.values, mollify_array(eta.values[None], m, d)[0])


def test_xi_covariance_matches_table():
    # E xi(x) xi(x+k) = R(k)/dt for k in {0, 1, 2}
    d = DomainSpec(1, 100, 1.0, 0.1, 1000, 1.0)
    m = build_mollifier("triangular", 1, 1.0, d)
    R = covariance_from_mollifier(m, d)
    xi = NoiseStream(77, 0).xi_block(0, 1000, d, m)
    for k in (0, 1, 2):
        prod = (xi * np.roll(xi, -k, axis=1)).ravel()
        # neighbouring products are correlated; use slice-level means for the SE
        per = (xi * np.roll(xi, -k, axis=1)).mean(axis=1)
        se = per.std(ddof=1) / math.sqrt(per.size)
        assert abs(prod.mean() - R.at(k) / d.dt) < 3 * se + 1e-12


# ---------------------------------------------------------------- export


def test_exports_round_trip(tmp_path):
    d = dom1(n=16, dx=0.5)
    m = build_mollifier("triangular", 1, 1.0, d)
    R = covariance_from_mollifier(m, d)
    export_kernel_csv(m, d, tmp_path / "k.csv")
    export_covariance_csv(R, d, tmp_path / "r.csv")
    for path, arr in ((tmp_path / "k.csv", m.values), (tmp_path / "r.csv", R.values)):
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        back = np.zeros(16)
        for r in rows:
            back[int(r["offset0"]) % 16] = float(r["value"])
        assert np.array_equal(back, arr)
        assert len(rows) == np.count_nonzero(arr)
