"""Monte Carlo over disorder realizations, mergeable moments, and the statistical tests.

Realization ``r`` at horizon ``T`` draws its noise from the stream
``(master_seed, stream_id(n_steps, r))``, so distinct horizons and time steps
see independent environments while a given ``(T, r)`` is always reproduced
exactly.  Work is split into fixed chunks of ids; results are reassembled in id
order before any reduction, which makes every output independent of the
number of workers.
"""

from __future__ import annotations

import concurrent.futures as cf
import math
import multiprocessing
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .config import ExperimentConfig, ToleranceBlock, steps_for
from .environment import DomainSpec, NoiseStream, build_mollifier
from .errors import UsageError
from .observables import (
    bks_realization,
    box_averages,
    combine_bks,
    fixed_time_overlap_streaming,
    gradient_overlap_identity,
    increment_moments,
)
from .solver import CONSTANT, DELTA, Model, default_snapshot_steps, make_model, run_forward_batch

RECORD_FIELDS = (
    "realization_id",
    "T",
    "beta",
    "log_Z_T",
    "O_T",
    "M_T",
    "qv_T",
    "residual_T",
    "fixed_T_overlap",
    "boundary_mass",
    "failed",
)
OBSERVABLES = ("log_Z_T", "O_T", "M_T", "qv_T", "residual_T", "boundary_mass")


def stream_id(n_steps: int, realization_id: int) -> int:
    """64-bit stream id: horizon step count in the high word, realization in the low word."""
    if not 0 <= realization_id < 2 ** 32:
        raise UsageError("realization ids must fit in 32 bits")
    if not 0 <= n_steps < 2 ** 32:
        raise UsageError("n_steps must fit in 32 bits")
    return (int(n_steps) << 32) | int(realization_id)


def fmt_float(x) -> str:
    """17 significant digits; non-finite values become JSON null."""
    if x is None or not math.isfinite(x):
        return "null"
    return format(float(x), ".17g")


@dataclass(frozen=True)
class RunRecord:
    """Per-realization observables at horizon ``T``.

    ``failed`` is ``None`` for a completed run and the step index of the first
    non-finite or vanishing mass otherwise (all observables are then ``None``).
    """

    realization_id: int
    T: float
    beta: float
    log_Z_T: float | None
    O_T: float | None
    M_T: float | None
    qv_T: float | None
    residual_T: float | None
    fixed_T_overlap: float | None
    boundary_mass: float | None
    failed: int | None = None

    def accepted(self, threshold: float) -> bool:
        return self.failed is None and self.boundary_mass is not None and self.boundary_mass <= threshold

    def to_json(self) -> str:
        parts = []
        for name in RECORD_FIELDS:
            v = getattr(self, name)
            if name in ("realization_id", "failed"):
                s = "null" if v is None else str(int(v))
            else:
                s = fmt_float(v)
            parts.append(f'"{name}": {s}')
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunRecord":
        if set(data) != set(RECORD_FIELDS):
            missing = set(RECORD_FIELDS) - set(data)
            extra = set(data) - set(RECORD_FIELDS)
            raise UsageError(f"record fields mismatch (missing {sorted(missing)}, extra {sorted(extra)})")

        def f(v):
            return None if v is None else float(v)

        return cls(
            realization_id=int(data["realization_id"]),
            T=float(data["T"]),
            beta=float(data["beta"]),
            log_Z_T=f(data["log_Z_T"]),
            O_T=f(data["O_T"]),
            M_T=f(data["M_T"]),
            qv_T=f(data["qv_T"]),
            residual_T=f(data["residual_T"]),
            fixed_T_overlap=f(data["fixed_T_overlap"]),
            boundary_mass=f(data["boundary_mass"]),
            failed=None if data["failed"] is None else int(data["failed"]),
        )


@dataclass(frozen=True)
class Accumulator:
    """Count, mean, sum of squared deviations, min and max of one observable."""

    count: int = 0
    mean: float = 0.0
    M2: float = 0.0
    min: float = math.inf
    max: float = -math.inf

    @classmethod
    def of(cls, x: float) -> "Accumulator":
        x = float(x)
        return cls(1, x, 0.0, x, x)

    def merge(self, other: "Accumulator") -> "Accumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        M2 = self.M2 + other.M2 + delta * delta * (self.count * other.count / n)
        return Accumulator(n, mean, M2, min(self.min, other.min), max(self.max, other.max))

    @classmethod
    def tree(cls, values: Iterable[float]) -> "Accumulator":
        """Merge single-value accumulators pairwise, level by level, in the given order."""
        level = [cls.of(v) for v in values]
        if not level:
            return cls()
        while len(level) > 1:
            nxt = [level[i].merge(level[i + 1]) for i in range(0, len(level) - 1, 2)]
            if len(level) % 2:
                nxt.append(level[-1])
            level = nxt
        return level[0]

    @property
    def variance(self) -> float:
        return self.M2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else 0.0


# ---------------------------------------------------------------- simulation


def seam_band(domain: DomainSpec, width: int) -> np.ndarray:
    """Mask of sites within ``width`` sites of the wrap seam (antipode of the origin) on any axis."""
    off = np.abs(domain.signed_offsets())
    dist = domain.n // 2 - off
    near = dist <= width
    if domain.d == 1:
        return near
    return near[:, None] | near[None, :]


def snapshot_steps_for(cfg: ExperimentConfig, n_steps: int) -> tuple[int, ...]:
    pol = cfg.recording.snapshot_policy
    if isinstance(pol, str):
        return default_snapshot_steps(n_steps)
    return tuple(sorted(set(int(s) for s in pol if 0 <= s <= n_steps) | {0, n_steps}))


def _model(cfg: ExperimentConfig, T: float) -> Model:
    dom = cfg.domain_spec(T)
    k = cfg.kernel
    m = build_mollifier(k.shape, k.radius, k.amplitude, dom)
    return make_model(dom, m, cfg.domain.propagator)


def _h_steps(cfg: ExperimentConfig, T: float) -> tuple[int, ...]:
    r = cfg.recording
    if not r.h_times or not math.isclose(T, r.h_T):
        return ()
    return tuple(steps_for(t, cfg.domain.dt) for t in r.h_times)


@dataclass(eq=False)
class ChunkResult:
    records: list
    h_ids: np.ndarray
    h: np.ndarray | None = None
    rho: np.ndarray | None = None


def simulate_chunk(cfg: ExperimentConfig, T: float, ids: Sequence[int], h_ids: Sequence[int] = (), fault: str | None = None) -> ChunkResult:
    """Run the delta-start realizations ``ids`` (and constant-start rows for ``h_ids``) as one batch."""
    model = _model(cfg, T)
    dom = model.domain
    n = dom.n_steps
    ids = [int(i) for i in ids]
    h_ids = [int(i) for i in h_ids]
    pos = {r: j for j, r in enumerate(ids)}
    if any(i not in pos for i in h_ids):
        raise UsageError("height rows must belong to the chunk")
    streams = [NoiseStream(cfg.ensemble.master_seed, stream_id(n, r)) for r in ids]
    h_steps = _h_steps(cfg, T) if h_ids else ()
    snaps = sorted(set(snapshot_steps_for(cfg, n)) | set(h_steps))
    row_stream = list(range(len(ids))) + [pos[r] for r in h_ids]
    inits = [DELTA] * len(ids) + [CONSTANT] * len(h_ids)
    res, _ = run_forward_batch(model, streams, inits, row_stream, snaps, strict=False, fault=fault)
    band = seam_band(dom, 2 * model.kernel.radius)
    nd = len(ids)
    bmass = np.zeros(nd)
    for s in snaps:
        rho = res.snapshots[s][:nd]
        bmass = np.maximum(bmass, dom.cell * rho[:, band].reshape(nd, -1).sum(axis=1))
    bmass = np.clip(bmass, 0.0, 1.0)
    b = dom.beta
    records = []
    for j, r in enumerate(ids):
        if res.failed_at[j] >= 0:
            records.append(RunRecord(r, dom.T, b, None, None, None, None, None, None, None, int(res.failed_at[j])))
            continue
        log_Z = float(res.log_mass[j])
        O = float(res.overlap[j].sum() * dom.dt)
        M = float(res.integrand[j].sum() * (b * dom.dt))
        qv = b * b * O
        fixed = fixed_time_overlap_streaming(model, streams[j]) if cfg.ensemble.fixed_T_overlap else None
        records.append(RunRecord(r, dom.T, b, log_Z, O, M, qv, log_Z - (M - 0.5 * qv), fixed, float(bmass[j]), None))
    out = ChunkResult(records, np.array(h_ids, dtype=np.int64))
    if h_ids:
        rows = np.arange(nd, nd + len(h_ids))
        hfail = res.failed_at[rows] >= 0
        lv = math.log(dom.volume)
        h = np.stack([np.log(res.snapshots[s][rows]) + (res.snapshot_log_mass[s][rows] + lv).reshape((-1,) + (1,) * dom.d) for s in h_steps], axis=1)
        rho = np.stack([res.snapshots[s][[pos[r] for r in h_ids]] for s in h_steps], axis=1)
        h[hfail] = np.nan
        sites = cfg.recording.h_sites
        if sites:
            h = h[..., list(sites)] if dom.d == 1 else h.reshape(h.shape[:2] + (-1,))[..., list(sites)]
        out.h, out.rho = h, rho
    return out


def run_realization(cfg: ExperimentConfig, realization_id: int, T: float | None = None) -> RunRecord:
    """One delta-start realization at horizon ``T`` (default: largest grid value)."""
    T = max(cfg.domain.T_grid) if T is None else T
    return simulate_chunk(cfg, T, [realization_id]).records[0]


@dataclass(eq=False)
class EnsembleResult:
    T: float
    records: list
    accumulators: dict
    n_total: int
    n_accepted: int
    n_failed_numerical: int
    n_rejected_boundary: int
    partial: bool = False
    missing_ids: tuple = ()
    h_ids: np.ndarray | None = None
    h: np.ndarray | None = None
    rho: np.ndarray | None = None
    h_times: tuple = ()

    @property
    def n_failed(self) -> int:
        """Numerical failures plus boundary rejections, so that accepted + failed = N."""
        return self.n_failed_numerical + self.n_rejected_boundary + len(self.missing_ids)


def _chunk_task(args):
    cfg, T, ids, h_ids = args
    return simulate_chunk(cfg, T, ids, h_ids)


def _executor(jobs: int):
    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        ctx = multiprocessing.get_context("spawn")
    return cf.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx)


def _map(fn, tasks, jobs: int):
    """Ordered results; a failed task yields its exception instead of a result."""
    if jobs <= 1 or len(tasks) <= 1:
        out = []
        for t in tasks:
            try:
                out.append(fn(t))
            except Exception as exc:  # noqa: BLE001 - surfaced as a partial result
                out.append(exc)
        return out
    with _executor(jobs) as ex:
        futs = [ex.submit(fn, t) for t in tasks]
        out = []
        for f in futs:
            try:
                out.append(f.result())
            except Exception as exc:  # noqa: BLE001
                out.append(exc)
        return out


def summarize(records: Sequence[RunRecord], threshold: float) -> dict:
    """Tree-merged accumulators over accepted records, in realization-id order."""
    acc = sorted((r for r in records if r.accepted(threshold)), key=lambda r: r.realization_id)
    return {name: Accumulator.tree(getattr(r, name) for r in acc) for name in OBSERVABLES}


def run_ensemble(cfg: ExperimentConfig, T: float, N: int | None = None, jobs: int = 1) -> EnsembleResult:
    """Run realizations ``0 .. N-1`` at horizon ``T``; output does not depend on ``jobs``."""
    N = cfg.ensemble.n_for(T) if N is None else int(N)
    if N < 1:
        raise UsageError("N must be >= 1")
    chunk = cfg.ensemble.chunk
    h_steps = _h_steps(cfg, T)
    n_h = min(N, cfg.recording.h_realizations) if h_steps else 0
    tasks = []
    for c0 in range(0, N, chunk):
        ids = list(range(c0, min(N, c0 + chunk)))
        tasks.append((cfg, T, ids, [i for i in ids if i < n_h]))
    results = _map(_chunk_task, tasks, jobs)
    records, missing, hs, rhos, hids = [], [], [], [], []
    for task, res in zip(tasks, results):
        if isinstance(res, Exception):
            missing.extend(task[2])
            continue
        records.extend(res.records)
        if res.h is not None:
            hs.append(res.h)
            rhos.append(res.rho)
            hids.append(res.h_ids)
    thr = cfg.ensemble.boundary_mass_threshold
    n_num = sum(r.failed is not None for r in records)
    n_acc = sum(r.accepted(thr) for r in records)
    out = EnsembleResult(
        T=float(cfg.domain_spec(T).T),
        records=records,
        accumulators=summarize(records, thr),
        n_total=N,
        n_accepted=n_acc,
        n_failed_numerical=n_num,
        n_rejected_boundary=len(records) - n_acc - n_num,
        partial=bool(missing),
        missing_ids=tuple(missing),
    )
    if hs:
        out.h_ids = np.concatenate(hids)
        out.h = np.concatenate(hs)
        out.rho = np.concatenate(rhos)
        out.h_times = tuple(cfg.recording.h_times)
    return out


def _bks_task(args):
    cfg, T, rid, steps = args
    model = _model(cfg, T)
    stream = NoiseStream(cfg.ensemble.master_seed, stream_id(model.domain.n_steps, rid))
    r = cfg.recording
    return bks_realization(model, stream, r.bks_M_grid, steps, r.bks_site_budget)


def bks_steps(cfg: ExperimentConfig, T: float) -> np.ndarray:
    """Evenly spaced sampled slices, always including the last one."""
    n = steps_for(T, cfg.domain.dt)
    k = min(cfg.recording.bks_steps, n)
    return np.unique(np.linspace(0, n - 1, k).round().astype(np.int64))


def run_bks(cfg: ExperimentConfig, T: float, jobs: int = 1):
    """Box-averaged Malliavin statistics over ``bks_N`` realizations at horizon ``T``."""
    steps = bks_steps(cfg, T)
    tasks = [(cfg, T, r, steps) for r in range(cfg.recording.bks_N)]
    per = _map(_bks_task, tasks, jobs)
    bad = [t[2] for t, p in zip(tasks, per) if isinstance(p, Exception)]
    if bad:
        raise UsageError(f"BKS realizations failed: {bad[:5]}")
    return combine_bks(_model(cfg, T), steps, per)


# ---------------------------------------------------------------- statistics


@dataclass(frozen=True)
class TestReport:
    """One hypothesis test or bound check.

    ``decision`` is ``pass``, ``fail`` or ``degenerate``.  Non-gating reports
    are diagnostics and never change an exit status.
    """

    __test__ = False

    name: str
    T: float | None
    statistic: float
    lower: float | None
    upper: float | None
    decision: str
    n: int
    seed: int
    note: str = ""
    ci_lo: float | None = None
    ci_hi: float | None = None
    gating: bool = True

    @property
    def passed(self) -> bool:
        return self.decision != "fail"


def _decide(ok: bool) -> str:
    return "pass" if ok else "fail"


def derive_seed(master_seed: int, name: str, T: float | None = None) -> int:
    """Deterministic per-test seed from the master seed and the test's identity."""
    tag = zlib.crc32(f"{name}@{T!r}".encode())
    return int(np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, int(master_seed) >> 32, tag]).generate_state(1, np.uint64)[0])


def z_value(ci_level: float) -> float:
    return float(stats.norm.ppf(0.5 + ci_level / 2))


@dataclass(frozen=True)
class GammaEstimate:
    gamma_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    intercept: float
    intercept_se: float
    T: tuple
    mean_logZ: tuple
    se_logZ: tuple
    standardized_residuals: tuple
    method: str


def estimate_gamma(T_values: Sequence[float], samples: Sequence[np.ndarray], ci_level: float = 0.95) -> GammaEstimate:
    """Slope of ``-mean(log Z_T)`` on ``T``, weighted by inverse squared standard errors.

    Falls back to ordinary least squares when some per-T standard error is zero
    (e.g. ``beta = 0``).
    """
    T = np.asarray(T_values, dtype=np.float64)
    if len(np.unique(T)) < 3:
        raise UsageError("estimating gamma needs at least 3 distinct horizons")
    means, ses = [], []
    for s in samples:
        s = np.asarray(s, dtype=np.float64)
        if s.size < 2:
            raise UsageError("each horizon needs at least 2 samples")
        means.append(s.mean())
        ses.append(s.std(ddof=1) / math.sqrt(s.size))
    y = -np.array(means)
    se = np.array(ses)
    if np.all(se > 0):
        w = 1.0 / se ** 2
        method = "wls"
    else:
        w = np.ones_like(T)
        method = "ols"
    Sw = w.sum()
    Tb = (w * T).sum() / Sw
    yb = (w * y).sum() / Sw
    Sxx = (w * (T - Tb) ** 2).sum()
    slope = float((w * (T - Tb) * (y - yb)).sum() / Sxx)
    icpt = float(yb - slope * Tb)
    if method == "wls":
        slope_se = math.sqrt(1.0 / Sxx)
        icpt_se = math.sqrt(1.0 / Sw + Tb ** 2 / Sxx)
    else:
        # OLS with per-point standard errors propagated
        c = (T - Tb) / Sxx
        slope_se = float(math.sqrt((c ** 2 * se ** 2).sum()))
        icpt_se = float(math.sqrt((((1.0 / len(T)) - Tb * c) ** 2 * se ** 2).sum()))
    fit = icpt + slope * T
    with np.errstate(divide="ignore", invalid="ignore"):
        resid = np.where(se > 0, (y - fit) / se, 0.0)
    z = z_value(ci_level)
    return GammaEstimate(
        slope, slope_se, slope - z * slope_se, slope + z * slope_se, icpt, icpt_se,
        tuple(T.tolist()), tuple(means), tuple(ses), tuple(resid.tolist()), method,
    )


def _degenerate(x: np.ndarray) -> bool:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3:
        return True
    spread = x.max() - x.min()
    return not spread > 1e-12 * max(1.0, float(np.abs(x).max()))


def normality_reports(S: np.ndarray, label: str, T: float | None, tol: ToleranceBlock, master_seed: int) -> list[TestReport]:
    """Skewness and excess-kurtosis z-tests plus a parametric-bootstrap KS test, each at ``tol.level``."""
    S = np.asarray(S, dtype=np.float64)
    n = S.size
    if _degenerate(S):
        return [
            TestReport(f"{label}_{k}", T, 0.0, None, None, "degenerate", n, master_seed, "zero variance")
            for k in ("skewness", "kurtosis", "ks")
        ]
    out = []
    z, p = stats.skewtest(S)
    out.append(TestReport(f"{label}_skewness", T, float(z), tol.level, None, _decide(p >= tol.level), n, master_seed,
                          f"p={p:.6g}; sample skewness={stats.skew(S):.6g}"))
    z, p = stats.kurtosistest(S)
    out.append(TestReport(f"{label}_kurtosis", T, float(z), tol.level, None, _decide(p >= tol.level), n, master_seed,
                          f"p={p:.6g}; sample excess kurtosis={stats.kurtosis(S):.6g}"))
    seed = derive_seed(master_seed, f"{label}_ks", T)
    g = stats.goodness_of_fit(stats.norm, S, statistic="ks", n_mc_samples=tol.ks_resamples, rng=np.random.default_rng(seed))
    out.append(TestReport(f"{label}_ks", T, float(g.statistic), tol.level, None, _decide(g.pvalue >= tol.level), n, seed,
                          f"p={g.pvalue:.6g}; parametric bootstrap with {tol.ks_resamples} resamples"))
    return out


def _var_se(x: np.ndarray) -> float:
    """Large-sample standard error of the sample variance."""
    n = x.size
    c = x - x.mean()
    m4 = float((c ** 4).mean())
    v = float(c.var())
    return math.sqrt(max(m4 - v * v, 0.0) / n)


def _ratio_report(name, T, x, denom, denom_rel_se, tol, seed, note) -> TestReport:
    v = float(np.var(x, ddof=1))
    lo, hi = tol.var_ratio_band
    if not denom > 0:
        return TestReport(name, T, math.nan, lo, hi, "fail", x.size, seed, f"reference scale {denom!r} is not positive; {note}")
    r = v / denom
    rel = math.hypot(_var_se(x) / v if v > 0 else 0.0, denom_rel_se)
    z = z_value(tol.ci_level)
    return TestReport(name, T, r, lo, hi, _decide(lo <= r <= hi), x.size, seed, note, r * (1 - z * rel), r * (1 + z * rel))


def clt_report(O: np.ndarray, T: float, gamma: GammaEstimate, beta: float, tol: ToleranceBlock, master_seed: int) -> list[TestReport]:
    """Normality of ``(O_T - mean)/sqrt(T)`` and the variance ratio against ``8 gamma / beta^4``."""
    O = np.asarray(O, dtype=np.float64)
    if _degenerate(O) or beta == 0:
        return [TestReport(f"overlap_clt_{k}", T, 0.0, None, None, "degenerate", O.size, master_seed, "Var(O_T) = 0")
                for k in ("skewness", "kurtosis", "ks", "variance_ratio")]
    S = (O - O.mean()) / math.sqrt(T)
    out = normality_reports(S, "overlap_clt", T, tol, master_seed)
    denom = T * 8.0 * gamma.gamma_hat / beta ** 4
    rel = gamma.se / gamma.gamma_hat if gamma.gamma_hat > 0 else math.inf
    out.append(_ratio_report("overlap_clt_variance_ratio", T, O, denom, rel, tol, master_seed,
                             f"Var(O_T)/(T*8*gamma_hat/beta^4), gamma_hat={gamma.gamma_hat:.6g}"))
    return out


def m_checks(
    samples: Mapping[float, tuple[np.ndarray, np.ndarray]],
    gamma: GammaEstimate | None,
    tol: ToleranceBlock,
    master_seed: int,
) -> list[TestReport]:
    """``samples[T] = (M_T, log_Z_T)`` over accepted realizations.

    Without ``gamma`` only the second-moment identity is checked.
    """
    out = []
    for T in sorted(samples):
        M, lz = (np.asarray(a, dtype=np.float64) for a in samples[T])
        n = M.size
        lhs = float((M ** 2).mean())
        rhs = float(-2.0 * lz.mean())
        se = math.hypot((M ** 2).std(ddof=1), 2.0 * lz.std(ddof=1)) / math.sqrt(n)
        diff = lhs - rhs
        out.append(TestReport("martingale_second_moment", T, diff, -tol.n_sigma * se, tol.n_sigma * se,
                              _decide(abs(diff) <= tol.n_sigma * se), n, master_seed,
                              f"mean(M^2)={lhs:.9g}; -2 mean(log Z)={rhs:.9g}; combined SE={se:.3g}"))
    Tmax = max(samples)
    M = np.asarray(samples[Tmax][0], dtype=np.float64)
    if gamma is None:
        return out
    if _degenerate(M):
        out.append(TestReport("martingale_variance_ratio", Tmax, 0.0, None, None, "degenerate", M.size, master_seed, "Var(M_T) = 0"))
        return out
    rel = gamma.se / gamma.gamma_hat if gamma.gamma_hat > 0 else math.inf
    out.append(_ratio_report("martingale_variance_ratio", Tmax, M, 2.0 * gamma.gamma_hat * Tmax, rel, tol, master_seed,
                             f"Var(M_T)/(2*gamma_hat*T), gamma_hat={gamma.gamma_hat:.6g}"))
    out.extend(normality_reports(M / math.sqrt(Tmax), "martingale_clt", Tmax, tol, master_seed))
    return out


def overlap_growth(O_by_T: Mapping[float, np.ndarray], gamma: GammaEstimate, beta: float, tol: ToleranceBlock,
                   master_seed: int, n_largest: int = 2) -> list[TestReport]:
    """``mean(O_T) beta^2 / (2T)`` against ``gamma_hat`` within the combined CI at the largest horizons."""
    z = z_value(tol.ci_level)
    out = []
    for T in sorted(O_by_T)[-n_largest:]:
        O = np.asarray(O_by_T[T], dtype=np.float64)
        a = float(O.mean() * beta ** 2 / (2 * T))
        se = float(O.std(ddof=1) / math.sqrt(O.size) * beta ** 2 / (2 * T))
        half = z * math.hypot(se, gamma.se)
        out.append(TestReport("overlap_mean_rate", T, a - gamma.gamma_hat, -half, half,
                              _decide(abs(a - gamma.gamma_hat) <= half), O.size, master_seed,
                              f"mean(O_T) beta^2/(2T)={a:.9g}; gamma_hat={gamma.gamma_hat:.9g}"))
    return out


def gamma_reports(gamma: GammaEstimate, master_seed: int) -> list[TestReport]:
    degenerate = gamma.se == 0 and gamma.gamma_hat == 0
    return [TestReport("gamma_positive", None, gamma.gamma_hat, 0.0, None,
                       "degenerate" if degenerate else _decide(gamma.ci_lo > 0), sum(1 for _ in gamma.T), master_seed,
                       f"{gamma.method} slope; SE={gamma.se:.6g}; intercept={gamma.intercept:.6g}",
                       gamma.ci_lo, gamma.ci_hi)]


def normalization_check(log_Z: np.ndarray, T: float, beta: float, r0: float, tol: ToleranceBlock, master_seed: int) -> TestReport:
    """``mean(exp(log Z_T))`` within ``n_sigma`` standard errors of 1 (light-tail regime only)."""
    Z = np.exp(np.asarray(log_Z, dtype=np.float64))
    m = float(Z.mean())
    se = float(Z.std(ddof=1) / math.sqrt(Z.size))
    tail = beta ** 2 * r0 * T
    gating = tail <= tol.light_tail_limit
    if se == 0:
        return TestReport("partition_normalization", T, m - 1.0, 0.0, 0.0, _decide(abs(m - 1.0) < 1e-12), Z.size, master_seed,
                          f"beta^2 R(0) T={tail:.4g}", gating=gating)
    return TestReport("partition_normalization", T, (m - 1.0) / se, -tol.n_sigma, tol.n_sigma,
                      _decide(abs(m - 1.0) <= tol.n_sigma * se), Z.size, master_seed,
                      f"mean Z={m:.9g}; SE={se:.3g}; beta^2 R(0) T={tail:.4g}" + ("" if gating else " (outside light-tail regime)"),
                      gating=gating)


def ito_convergence(levels: Mapping[float, np.ndarray], T: float, master_seed: int) -> TestReport:
    """Mean absolute Ito residual must decrease strictly as ``dt`` shrinks."""
    dts = sorted(levels, reverse=True)
    means = [float(np.abs(np.asarray(levels[dt])).mean()) for dt in dts]
    ok = all(b < a for a, b in zip(means, means[1:]))
    note = "; ".join(f"dt={dt:g}: {m:.6g}" for dt, m in zip(dts, means))
    return TestReport("ito_residual_decreasing", T, means[-1], None, None, _decide(ok), min(len(levels[d]) for d in dts), master_seed, note)


@dataclass(frozen=True)
class VarianceSeries:
    T: tuple
    var: tuple
    ci_lo: tuple
    ci_hi: tuple
    scaled: tuple  # Var * log T / T

    @property
    def C_hat(self) -> float:
        return max(self.scaled)


def _bootstrap_var_ci(x: np.ndarray, B: int, ci_level: float, seed: int) -> tuple[float, float]:
    res = stats.bootstrap((x,), lambda a, axis: np.var(a, axis=axis, ddof=1), n_resamples=B,
                          confidence_level=ci_level, method="percentile", rng=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def variance_scaling(logZ_by_T: Mapping[float, np.ndarray], tol: ToleranceBlock, master_seed: int) -> tuple[list[TestReport], VarianceSeries]:
    """Bootstrap CIs for ``Var(log Z_T)``, the ``Var/T`` trend, and ``Var log T / T`` boundedness."""
    Ts = sorted(logZ_by_T)
    if len(Ts) < 4 or Ts[-1] / Ts[0] < 8:
        raise UsageError("variance scaling needs >= 4 horizons spanning a factor of 8")
    var, lo, hi, sc = [], [], [], []
    for T in Ts:
        x = np.asarray(logZ_by_T[T], dtype=np.float64)
        v = float(np.var(x, ddof=1))
        if _degenerate(x):
            a = b = v
        else:
            a, b = _bootstrap_var_ci(x, tol.bootstrap_resamples, tol.ci_level, derive_seed(master_seed, "var_logZ", T))
        var.append(v)
        lo.append(a)
        hi.append(b)
        sc.append(v * math.log(T) / T)
    series = VarianceSeries(tuple(Ts), tuple(var), tuple(lo), tuple(hi), tuple(sc))
    n = min(len(logZ_by_T[T]) for T in Ts)
    if all(v == 0 for v in var):
        return [TestReport(k, None, 0.0, None, None, "degenerate", n, master_seed, "all variances are 0")
                for k in ("var_over_T_nonincreasing", "var_over_T_sublinear", "scaled_variance_bounded")], series
    per = [(v / T, a / T, b / T) for T, v, a, b in zip(Ts, var, lo, hi)]
    # allow CI overlap: fail only when a later interval sits wholly above an earlier one
    viol = [(Ts[j], Ts[j + 1]) for j in range(len(Ts) - 1) if per[j + 1][1] > per[j][2]]
    out = [TestReport("var_over_T_nonincreasing", None, float(len(viol)), None, 0.0, _decide(not viol), n, master_seed,
                      "; ".join(f"T={T:g}: Var/T={p[0]:.6g} [{p[1]:.6g}, {p[2]:.6g}]" for T, p in zip(Ts, per)))]
    out.append(TestReport("var_over_T_sublinear", Ts[-1], per[-1][0], None, per[0][1], _decide(per[-1][2] < per[0][1]), n,
                          master_seed, f"upper CI at T={Ts[-1]:g} is {per[-1][2]:.6g}; lower CI at T={Ts[0]:g} is {per[0][1]:.6g}",
                          per[-1][1], per[-1][2]))
    pos = [s for s in sc if s > 0]
    ratio = max(pos) / min(pos) if pos else math.inf
    out.append(TestReport("scaled_variance_bounded", None, ratio, None, tol.scaling_max_over_min,
                          _decide(ratio <= tol.scaling_max_over_min), n, master_seed,
                          f"C_hat={series.C_hat:.6g}; Var log T / T = " + ", ".join(f"{s:.6g}" for s in sc)))
    return out, series


@dataclass(eq=False)
class HeightData:
    """Constant-start height snapshots ``h[r, t, ...]`` with matching delta-start densities."""

    times: tuple
    h: np.ndarray
    rho: np.ndarray | None = None
    ids: np.ndarray | None = None

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray | None]:
        j = [k for k, s in enumerate(self.times) if math.isclose(s, t)]
        if not j:
            raise UsageError(f"no height snapshot at t={t}")
        keep = np.all(np.isfinite(self.h[:, j[0]].reshape(len(self.h), -1)), axis=1)
        rho = None if self.rho is None else self.rho[keep, j[0]]
        return self.h[keep, j[0]], rho


def bound_suite(cfg: ExperimentConfig, heights: HeightData | None, bks: Mapping | None = None,
                times: Sequence[float] | None = None) -> list[TestReport]:
    """Subroughness, box-average and ``A``-ratio checks from stored snapshots and BKS runs."""
    if heights is None:
        raise UsageError("the bound suite needs constant-start height snapshots")
    tol = cfg.tolerances
    seed = cfg.ensemble.master_seed
    dom = cfg.domain_spec()
    k = cfg.kernel
    m = build_mollifier(k.shape, k.radius, k.amplitude, dom)
    model = make_model(dom, m, cfg.domain.propagator)
    R = model.covariance
    beta = cfg.beta
    ns = tol.n_sigma
    times = tuple(cfg.recording.bound_times) if times is None else tuple(times)
    out = []
    cvals = []
    for t in times:
        h, rho = heights.at(t)
        N = h.shape[0]
        if beta == 0:
            out.append(TestReport("subroughness", t, 0.0, None, 1.0, "degenerate", N, seed, "beta = 0: h is identically 0"))
            continue
        inc = increment_moments(h, cfg.recording.lags, dom, beta, R)
        for lag, r, se in zip(inc.lags, inc.ratio, inc.ratio_se):
            out.append(TestReport("subroughness", t, float(r), None, 1.0 + ns * float(se), _decide(r <= 1.0 + ns * se), N, seed,
                                  f"lag={int(lag)} sites ({lag * dom.dx:g}); SE={se:.3g}"))
        for M in cfg.recording.bks_M_grid:
            hM = box_averages(h, M, dom)
            per = ((h - hM) ** 2).reshape(N, -1).mean(axis=1)
            bound = R.r0 * beta ** 2 * dom.d * (M * dom.dx) ** 2
            if bound > 0:
                r = float(per.mean() / bound)
                se = float(per.std(ddof=1) / math.sqrt(N) / bound)
                out.append(TestReport("box_average_deviation", t, r, None, 1.0 + ns * se, _decide(r <= 1.0 + ns * se), N, seed,
                                      f"M={M} sites ({M * dom.dx:g}); SE={se:.3g}"))
            if M == 0:
                continue
            varhM = float(np.var(hM.reshape(N, -1), axis=0, ddof=1).mean())
            c = varhM * (2 + math.log(2 ** dom.d * m.linf / m.l1) + dom.d * math.log(M * dom.dx)) / (
                2 * beta ** 2 * m.linf * m.l1 * t)
            cvals.append(c)
            out.append(TestReport("box_average_variance_constant", t, c, None, None, "pass", N, seed,
                                  f"M={M} sites; Var h_M={varhM:.6g}", gating=False))
        if rho is not None and len(rho) > 1:
            g = gradient_overlap_identity(h[: len(rho)], rho, dom, beta, R)
            out.append(TestReport("gradient_overlap_identity", t, g.defect, -ns * g.defect_se, ns * g.defect_se,
                                  _decide(abs(g.defect) <= ns * g.defect_se), g.n_samples, seed,
                                  f"E|grad h|^2={g.f_hat:.6g}; beta^2(R(0)-E R(rho))={beta ** 2 * (R.r0 - g.g_hat):.6g}",
                                  gating=False))
    if cvals:
        pos = [c for c in cvals if c > 0]
        ratio = max(pos) / min(pos) if pos else math.inf
        out.append(TestReport("box_average_variance_bounded", None, ratio, None, tol.varhM_max_over_min,
                              _decide(ratio <= tol.varhM_max_over_min), heights.h.shape[0], seed,
                              "max/min of the fitted constant over (t, M)"))
    for t, q in sorted((bks or {}).items()):
        out.extend(a_ratio_reports(q, m, beta, dom.dt, dom.cell, ns, seed))
    return out


def a_ratio_reports(q, kernel, beta: float, dt: float, cell: float, n_sigma: float, seed: int) -> list[TestReport]:
    """``A / ||D h_M||_1`` lower bound at every sampled ``(s, y)`` and the ``sum A^2`` identity."""
    out = []
    n_steps = steps_for(q.T, dt)
    target = beta ** 2 * kernel.linf * kernel.l1 * q.T
    for M in q.M_grid:
        m = q.mean_dbar[M]
        se = q.se_dbar[M]
        bound = math.sqrt(kernel.linf * q.box_volume[M] / kernel.l1)
        pos = m > 0
        ratio = q.ratio(M)
        # d ratio = ratio / 2 * d m / m; a 1e-9 relative slack absorbs roundoff at equality points
        with np.errstate(invalid="ignore"):
            sig = np.where(pos, 0.5 * ratio * se / np.where(pos, m, 1.0), 0.0)
        short = np.where(pos, bound - ratio - n_sigma * sig - 1e-9 * bound, -np.inf)
        worst = float(short.max())
        # z only where the shortfall exceeds the roundoff slack; equality points carry sig ~ 1e-17
        beyond = pos & (sig > 0) & (ratio < bound * (1 - 1e-9))
        zs = np.where(beyond, (ratio - bound) / np.where(sig > 0, sig, 1.0), np.inf)
        gap = float(((ratio[pos] - bound) / bound).min()) if pos.any() else math.inf
        out.append(TestReport("a_ratio_lower_bound", q.T, float(ratio[pos].min()) if pos.any() else math.inf, bound, None,
                              _decide(worst <= 0), q.n_samples, seed,
                              f"M={M} sites; {int(pos.sum())} sampled (s, y); min relative gap={gap:.3g}; "
                              f"{int(beyond.sum())} below beyond roundoff, min z={float(zs.min()) if beyond.any() else math.inf:.3g}"))
        total = float((q.A[M] ** 2).sum() * dt * cell * n_steps / len(q.steps))
        slack = 1e-9 * max(1.0, target)
        out.append(TestReport("a_square_total", q.T, total, target - slack, target + slack,
                              _decide(abs(total - target) <= slack), q.n_samples, seed,
                              f"M={M}; extrapolated dt dx^d sum A^2 against beta^2 |phi|_inf |phi|_1 T"))
    return out


def height_gamma(heights: HeightData, master_seed: int, ci_level: float = 0.95) -> GammaEstimate | None:
    """Slope of ``-mean h(t, x)`` (pooled over sites) across the height snapshot times."""
    if len(heights.times) < 3:
        return None
    samples = []
    for t in heights.times:
        h = heights.at(t)[0]
        samples.append(h.reshape(len(h), -1).mean(axis=1))
    return estimate_gamma(heights.times, samples, ci_level)
