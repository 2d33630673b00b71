import numpy as np
import pytest

from polymerlab.config import (
    DomainBlock,
    EnsembleBlock,
    ExperimentConfig,
    RecordingBlock,
)
from polymerlab.environment import DomainSpec, build_mollifier
from polymerlab.solver import make_model


def small_domain(n=64, dx=0.25, dt=0.01, n_steps=50, beta=1.0, d=1):
    return DomainSpec(d, n, dx, dt, n_steps, beta)


def small_model(n=64, dx=0.25, dt=0.01, n_steps=50, beta=1.0, d=1, radius=1, propagator="lattice"):
    dom = small_domain(n, dx, dt, n_steps, beta, d)
    return make_model(dom, build_mollifier("triangular", radius, 1.0, dom), propagator)


def tiny_config(**over) -> ExperimentConfig:
    """64-site grid, four short horizons, everything recorded cheaply."""
    cfg = ExperimentConfig(
        domain=DomainBlock(n=64, T_grid=(0.5, 1.0, 2.0, 4.0)),
        ensemble=EnsembleBlock(N=24, N_overrides=(), chunk=8),
        recording=RecordingBlock(
            h_times=(1.0, 2.0, 4.0), bound_times=(2.0, 4.0), h_T=4.0, h_realizations=12,
            lags=(1, 2, 4), bks_M_grid=(0, 1, 2), bks_times=(2.0,), bks_N=4, bks_steps=4,
        ),
    )
    for k, v in over.items():
        cfg = cfg.__class__(**{**cfg.__dict__, k: v})
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(LINES, key=lambda c: int(c[1:])):
            terminalreporter.write_line(LINES[cid])
