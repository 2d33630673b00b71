import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polymerlab.environment import (
    CovarianceTable,
    DomainSpec,
    Mollifier,
    NoiseStream,
    build_mollifier,
    covariance_from_mollifier,
    mollify_array,
)
from polymerlab.ensemble import a_ratio_reports
from polymerlab.errors import UsageError
from polymerlab.observables import (
    accumulate_martingale,
    accumulate_overlap,
    bks_derivative_average,
    bks_realization,
    box_averages,
    central_gradient_sq,
    combine_bks,
    endpoint_mode,
    fixed_time_overlap,
    fixed_time_overlap_streaming,
    gradient_overlap_identity,
    increment_moments,
    local_average,
    malliavin_field,
    overlap_functional,
)
from polymerlab.solver import (
    CONSTANT,
    DELTA,
    Model,
    Recording,
    _Fixed,
    build_propagator,
    evolve_forward,
    run_backward,
    run_forward,
    run_forward_batch,
)
from polymerlab.verify import brute_force_overlap

from .conftest import small_domain, small_model
from .test_solver import heat_kernel_series


def tri(dom):
    m = build_mollifier("triangular", 1, 1.0, dom)
    return m, covariance_from_mollifier(m, dom)


# ---------------------------------------------------------------- overlap functional


def test_point_mass_overlap():
    dom = DomainSpec(1, 16, 1.0, 0.1, 1, 1.0)
    _, R = tri(dom)
    f = np.zeros(16)
    f[3] = 1.0
    assert overlap_functional(f, R, dom) == pytest.approx(1.5, abs=1e-13)
    assert brute_force_overlap(f, R.values, dom.cell) == 1.5


def test_uniform_overlap():
    dom = DomainSpec(1, 8, 1.0, 0.1, 1, 1.0)
    _, R = tri(dom)
    f = np.full(8, 1 / 8)
    assert overlap_functional(f, R, dom) == pytest.approx(0.5, abs=1e-14)
    assert brute_force_overlap(f, R.values, dom.cell) == pytest.approx(0.5, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32), st.sampled_from([(1, 32), (1, 33), (2, 8), (2, 9)]), st.floats(0.2, 1.5))
def test_overlap_matches_brute_force(seed, shape, dx):
    d, n = shape
    dom = DomainSpec(d, n, dx, 0.1, 1, 1.0)
    _, R = tri(dom)
    f = np.random.default_rng(seed).random(dom.shape) ** 3
    f /= dom.cell * f.sum()
    spectral = overlap_functional(f, R, dom)
    brute = brute_force_overlap(f, R.values, dom.cell)
    assert spectral == pytest.approx(brute, rel=1e-10)
    assert -1e-12 <= spectral <= R.r0 * (1 + 1e-12)
    assert overlap_functional(endpoint_mode(f)[1], R, dom) == pytest.approx(spectral, abs=1e-12)


def test_overlap_stack():
    dom = DomainSpec(1, 16, 0.5, 0.1, 1, 1.0)
    _, R = tri(dom)
    f = np.random.default_rng(0).random((3, 16))
    f /= dom.cell * f.sum(axis=1, keepdims=True)
    out = overlap_functional(f, R, dom)
    assert out.shape == (3,)
    assert out[1] == pytest.approx(overlap_functional(f[1], R, dom), rel=1e-14)


def test_overlap_rejects_unnormalized():
    dom = DomainSpec(1, 16, 0.5, 0.1, 1, 1.0)
    _, R = tri(dom)
    with pytest.raises(UsageError):
        overlap_functional(np.ones(16), R, dom)


# ---------------------------------------------------------------- overlap series / martingale


def test_overlap_beta0_deterministic():
    model = small_model(n_steps=40, beta=0.0)
    a = accumulate_overlap(run_forward(model.domain, model, NoiseStream(1, 0)))
    b = accumulate_overlap(run_forward(model.domain, model, NoiseStream(1, 1)))
    assert a.O_T == b.O_T
    # oracle: left-endpoint sum over heat kernels
    dom = model.domain
    hk = [np.eye(1, 64, 0)[0] / dom.cell] + [heat_kernel_series(dom, i * dom.dt) for i in range(1, 40)]
    ref = dom.dt * sum(brute_force_overlap(h, model.covariance.values, dom.cell) for h in hk)
    assert a.O_T == pytest.approx(ref, rel=1e-11)
    assert a.qv_T == 0.0


def test_overlap_single_site():
    dom = DomainSpec(1, 1, 0.5, 0.01, 30, 0.7)
    R = CovarianceTable(np.array([0.8]), 0.8)
    k = Mollifier(np.array([1.0]), 0, 0.5, 1.0)
    model = Model(dom, k, R, build_propagator(dom), R.spectral_weights(dom))
    tr = run_forward(dom, model, NoiseStream(1))
    assert accumulate_overlap(tr).O_T == pytest.approx(0.8 * 0.3, rel=1e-13)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_overlap_bounded(seed):
    model = small_model(n_steps=60, beta=1.5)
    o = accumulate_overlap(run_forward(model.domain, model, NoiseStream(seed)))
    assert 0 <= o.O_T <= model.covariance.r0 * model.domain.T * (1 + 1e-12)
    assert np.all(np.diff(o.partial) >= 0)


def test_martingale_beta0():
    model = small_model(n_steps=40, beta=0.0)
    tr = run_forward(model.domain, model, NoiseStream(3))
    ms = accumulate_martingale(tr)
    assert not ms.M.any() and not ms.residual.any()


def test_martingale_recomputed_integrand_matches_solver():
    model = small_model(n_steps=25)
    dom = model.domain
    stream = NoiseStream(8, 1)
    tr = run_forward(dom, model, stream, record=Recording(tuple(range(26))))
    xi = stream.xi_block(0, 25, dom, model.kernel)
    a = accumulate_martingale(tr)
    b = accumulate_martingale(tr, xi=xi, propagator=model.propagator)
    assert np.allclose(a.M, b.M, rtol=1e-12, atol=1e-14)


def test_martingale_needs_all_steps():
    model = small_model(n_steps=10)
    stream = NoiseStream(8, 1)
    tr = run_forward(model.domain, model, stream)
    xi = stream.xi_block(0, 10, model.domain, model.kernel)
    with pytest.raises(UsageError):
        accumulate_martingale(tr, xi=xi, propagator=model.propagator)


def test_martingale_mean_zero():
    model = small_model(n=64, n_steps=100)
    N = 400
    res, _ = run_forward_batch(model, [NoiseStream(31, r) for r in range(N)], [DELTA] * N)
    M = res.integrand.sum(axis=1) * model.domain.beta * model.domain.dt
    assert abs(M.mean()) < 3 * M.std(ddof=1) / math.sqrt(N)


def test_residual_shrinks_with_dt():
    # independent noise per level; fixed T = 1
    out = []
    for dt in (0.04, 0.02, 0.01):
        model = small_model(n=64, dt=dt, n_steps=round(1.0 / dt))
        N = 200
        res, _ = run_forward_batch(model, [NoiseStream(5, (round(1 / dt) << 32) | r) for r in range(N)], [DELTA] * N)
        dom = model.domain
        O = res.overlap.sum(axis=1) * dom.dt
        M = res.integrand.sum(axis=1) * dom.beta * dom.dt
        out.append(np.abs(res.log_mass - (M - 0.5 * O)).mean())
    assert out[0] > out[1] > out[2]


# ---------------------------------------------------------------- fixed-time overlap


def test_fixed_time_overlap_beta0_equals_overlap():
    model = small_model(n_steps=30, beta=0.0)
    dom = model.domain
    stream = NoiseStream(1)
    tr = run_forward(dom, model, stream, record=Recording(tuple(range(31))))
    bwd = run_backward(dom, model, stream, "constant_one")
    a = fixed_time_overlap(tr, bwd, model.covariance)
    assert a == pytest.approx(accumulate_overlap(tr).O_T, rel=1e-12)


def test_fixed_time_overlap_streaming_matches_stored():
    model = small_model(n_steps=37)
    dom = model.domain
    stream = NoiseStream(4, 4)
    tr = run_forward(dom, model, stream, record=Recording(tuple(range(38))))
    bwd = run_backward(dom, model, stream, "constant_one")
    a = fixed_time_overlap(tr, bwd, model.covariance)
    for c in (None, 1, 5, 37):
        assert fixed_time_overlap_streaming(model, stream, c) == pytest.approx(a, rel=1e-12)
    assert 0 <= a <= model.covariance.r0 * dom.T


# ---------------------------------------------------------------- Malliavin field


@pytest.mark.parametrize("beta", [0.0, 0.6, 1.4])
def test_malliavin_mass_and_bounds(beta):
    model = small_model(n_steps=40, beta=beta)
    mf = malliavin_field(model.domain, model, NoiseStream(2), x0=5)
    assert np.abs(mf.mass - beta * model.kernel.l1).max() <= 1e-10
    hi = beta * model.kernel.linf
    assert mf.D.min() >= -1e-14 and mf.D.max() <= hi * (1 + 1e-12)
    if beta == 0:
        assert not mf.D.any()


def test_malliavin_checkpoint_invariant():
    model = small_model(n_steps=33)
    a = malliavin_field(model.domain, model, NoiseStream(2), x0=3, steps=(0, 10, 32))
    b = malliavin_field(model.domain, model, NoiseStream(2), x0=3, steps=(0, 10, 32), checkpoint=4)
    assert np.allclose(a.D, b.D, rtol=1e-12, atol=1e-15)
    assert a.log_u == pytest.approx(b.log_u, abs=1e-12)


def test_malliavin_log_u_matches_constant_start():
    model = small_model(n_steps=30)
    dom = model.domain
    stream = NoiseStream(6)
    mf = malliavin_field(dom, model, stream, x0=7)
    tr = run_forward(dom, model, stream, init=CONSTANT, record=Recording((30,)))
    assert mf.log_u == pytest.approx(tr.height(30)[7], abs=1e-11)


def test_malliavin_finite_difference():
    # D_{s,y} h(T, x0) is the derivative of h along eta(s, y) scaled by 1/(dt dx^d)
    model = small_model(n=32, n_steps=12, beta=0.9)
    dom = model.domain
    stream = NoiseStream(13)
    mf = malliavin_field(dom, model, stream, x0=4, steps=(5,))
    eta = stream.eta_block(0, 12, dom)

    def h(eta_):
        xi = mollify_array(eta_, model.kernel, dom)[:, None]
        r = evolve_forward(model, CONSTANT.density(dom)[None], np.zeros(1), _Fixed(xi), 0, 12)
        return math.log(r.rho[0, 4]) + r.log_mass[0] + math.log(dom.volume)

    eps = 1e-4
    for y in (2, 4, 9):
        e = eta.copy()
        e[5, y] += eps
        e2 = eta.copy()
        e2[5, y] -= eps
        fd = (h(e) - h(e2)) / (2 * eps) / (dom.dt * dom.cell)
        assert fd == pytest.approx(mf.D[0, y], rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------- local averages


def test_local_average_one_site_and_constant(rng):
    dom = small_domain(n=32)
    h = rng.normal(size=32)
    assert local_average(h, 0, dom) == h[0]
    assert local_average(np.full(32, 2.5), 3, dom) == 2.5
    assert local_average(h, 2, dom) == pytest.approx(h[[-2, -1, 0, 1, 2]].mean(), rel=1e-15)


def test_local_average_rejects_big_box():
    with pytest.raises(UsageError):
        local_average(np.zeros(8), 4, small_domain(n=8))


@pytest.mark.parametrize("d", [1, 2])
def test_box_averages_matches_local(d, rng):
    dom = DomainSpec(d, 12, 0.5, 0.1, 1, 1.0)
    h = rng.normal(size=dom.shape)
    b = box_averages(h, 2, dom)
    c = (3,) * d
    assert b[c] == pytest.approx(local_average(h, 2, dom, c), rel=1e-13)
    assert b[(0,) * d] == pytest.approx(local_average(h, 2, dom), rel=1e-13)


# ---------------------------------------------------------------- increments and gradient identity


def test_increment_moments_oracle(rng):
    dom = small_domain(n=16)
    _, R = tri(dom)
    h = rng.normal(size=(5, 16))
    inc = increment_moments(h, [1, 3], dom, 1.0, R)
    ref = np.mean([(h[:, x] - h[:, (x + 3) % 16]) ** 2 for x in range(16)])
    assert inc.moment[1] == pytest.approx(ref, rel=1e-13)
    assert inc.ratio[1] == pytest.approx(ref / (R.r0 * (3 * dom.dx) ** 2), rel=1e-13)


def test_increment_lag0_and_beta0(rng):
    dom = small_domain(n=16)
    _, R = tri(dom)
    inc = increment_moments(rng.normal(size=(4, 16)), [0], dom, 1.0, R)
    assert inc.moment[0] == 0.0
    inc0 = increment_moments(np.zeros((4, 16)), [1, 2], dom, 0.0, R)
    assert not inc0.moment.any() and not inc0.ratio.any()


def test_increment_needs_two():
    dom = small_domain(n=16)
    with pytest.raises(UsageError):
        increment_moments(np.zeros((1, 16)), [1], dom, 1.0, tri(dom)[1])


def test_central_gradient():
    dom = small_domain(n=64, dx=0.1)
    x = np.arange(64) * dom.dx
    h = np.sin(2 * np.pi * x / dom.L_phys)
    g = central_gradient_sq(h, dom)
    k = 2 * np.pi / dom.L_phys
    assert np.allclose(g, (k * np.cos(k * x) * np.sin(k * dom.dx) / (k * dom.dx)) ** 2, atol=1e-12)


def test_gradient_identity_beta0():
    model = small_model(n_steps=20, beta=0.0)
    dom = model.domain
    tr = run_forward(dom, model, NoiseStream(1), record=Recording((20,)))
    hc = np.zeros((3, 64))
    rho = np.stack([tr.snapshots[20]] * 3)
    rep = gradient_overlap_identity(hc, rho, dom, 0.0, model.covariance)
    assert rep.f_hat == 0 and rep.defect == 0
    assert rep.g_hat == pytest.approx(overlap_functional(tr.snapshots[20], model.covariance, dom))


def test_gradient_identity_time_mismatch():
    dom = small_domain(n=16)
    with pytest.raises(UsageError):
        gradient_overlap_identity(np.zeros((2, 16)), np.full((2, 16), 1 / 4), dom, 1.0, tri(dom)[1], 1.0, 2.0)


def test_gradient_bounded_in_ensemble():
    model = small_model(n=64, n_steps=100)
    dom = model.domain
    N = 60
    res, _ = run_forward_batch(model, [NoiseStream(3, r) for r in range(N)], [CONSTANT] * N, snapshot_steps=(100,))
    h = np.log(res.snapshots[100]) + res.snapshot_log_mass[100][:, None]
    f = central_gradient_sq(h, dom).mean(axis=1)
    assert 0 <= f.mean() <= model.covariance.r0 + 3 * f.std(ddof=1) / math.sqrt(N)


# ---------------------------------------------------------------- endpoint mode


def test_endpoint_mode():
    rho = np.zeros(16)
    rho[5] = 2.0
    site, c = endpoint_mode(rho)
    assert site == (5,) and c[0] == 2.0 and c.sum() == 2.0
    assert endpoint_mode(np.full(16, 0.1))[0] == (0,)
    r2 = np.zeros((4, 4))
    r2[1, 3] = r2[2, 0] = 1.0
    assert endpoint_mode(r2)[0] == (1, 3)


# ---------------------------------------------------------------- BKS


def test_bks_single_site_box_is_malliavin():
    model = small_model(n_steps=24)
    stream = NoiseStream(7)
    dbar, hM = bks_realization(model, stream, [0], range(24))
    mf = malliavin_field(model.domain, model, stream, x0=0)
    assert np.allclose(dbar[0], mf.D, rtol=1e-12, atol=1e-15)
    assert hM[0] == pytest.approx(mf.log_u, abs=1e-12)


def test_bks_box_mean_is_average_of_sites():
    model = small_model(n_steps=16)
    stream = NoiseStream(9)
    dbar, _ = bks_realization(model, stream, [1], (3, 15))
    ref = np.mean([malliavin_field(model.domain, model, stream, x0=x, steps=(3, 15)).D for x in (-1, 0, 1)], axis=0)
    assert np.allclose(dbar[1], ref, rtol=1e-12, atol=1e-15)


def test_bks_a_ratio_and_square_total():
    model = small_model(n_steps=20, beta=0.8)
    dom = model.domain
    steps = list(range(20))
    q = bks_derivative_average(model, [NoiseStream(4, r) for r in range(6)], [0, 1, 2], steps)
    k = model.kernel
    for M in q.M_grid:
        # mass identity per slice
        assert np.allclose(dom.cell * q.mean_dbar[M].sum(axis=1), dom.beta * k.l1, rtol=1e-10)
        total = (q.A[M] ** 2).sum() * dom.dt * dom.cell
        assert total == pytest.approx(dom.beta ** 2 * k.linf * k.l1 * dom.T, rel=1e-10)
    # the lower bound holds in expectation; Monte Carlo means meet it within 3 sigma
    reps = a_ratio_reports(q, k, dom.beta, dom.dt, dom.cell, 3.0, 0)
    assert [r.decision for r in reps] == ["pass"] * len(reps)


def test_bks_layout_errors():
    model = small_model(n_steps=4)
    with pytest.raises(UsageError):
        bks_realization(model, NoiseStream(1), [40], [0])
    with pytest.raises(UsageError):
        bks_realization(model, NoiseStream(1), [1], [4])
    with pytest.raises(UsageError):
        combine_bks(model, [0], [])
