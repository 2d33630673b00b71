"""Command line: ``polymerlab {verify,simulate,scan,analyze}``.

Exit codes: 0 success, 1 a check failed (or a worker died), 2 bad configuration
or config-hash mismatch, 3 I/O failure or corrupt records.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bundle as bd
from .config import ExperimentConfig, config_hash, load, to_dict, validate
from .ensemble import (
    HeightData,
    TestReport,
    clt_report,
    estimate_gamma,
    gamma_reports,
    height_gamma,
    m_checks,
    normalization_check,
    overlap_growth,
    run_bks,
    run_ensemble,
    variance_scaling,
    bound_suite,
    z_value,
)
from .environment import build_mollifier, covariance_from_mollifier
from .errors import ConfigurationError, PolymerLabError, UsageError
from .verify import FAULTS, run_checks

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

REPORT_COLUMNS = ("name", "T", "statistic", "lower", "upper", "decision", "gating", "n", "seed", "ci_lo", "ci_hi", "note")
SUMMARY_OBS = ("log_Z_T", "O_T", "M_T", "residual_T", "boundary_mass")


def resolve_out(cli_out: str | None, cfg: ExperimentConfig) -> Path:
    """``--out`` wins, then the environment variable, then the config, then a default."""
    out = cli_out or os.environ.get(bd.OUT_ENV) or cfg.out_dir or bd.DEFAULT_OUT
    return Path(out)


def _header(cfg: ExperimentConfig) -> bd.Header:
    return bd.make_header(config_hash(cfg), cfg.ensemble.master_seed)


def write_config(cfg: ExperimentConfig, out: Path) -> None:
    (out / "config.json").write_text(bd.dumps17(to_dict(cfg)) + "\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ------------------------------------------------------------------ verify


def cmd_verify(cfg: ExperimentConfig, out: Path | None = None, fault: str | None = None) -> int:
    checks = run_checks(cfg, fault=fault)
    for c in checks:
        _say(f"{'pass' if c.passed else 'FAIL'} {c.name} value={c.value:.3e} tol={c.tolerance:.1e} {c.note}".rstrip())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        bd.write_csv(out / "verify.csv", _header(cfg), ("check", "value", "tolerance", "decision", "note"),
                     [(c.name, c.value, c.tolerance, "pass" if c.passed else "fail", c.note) for c in checks])
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


# ---------------------------------------------------------------- simulate


@dataclass
class Bundle:
    out: Path
    records: Path
    summary: Path
    heights: Path | None
    bks: Path | None
    config_hash: str
    partial: bool = False
    results: dict = field(default_factory=dict, repr=False)


def _summary_rows(results: dict, threshold: float):
    for T in sorted(results):
        r = results[T]
        row = [T, r.n_total, r.n_accepted, r.n_failed, r.n_failed_numerical, r.n_rejected_boundary, threshold, r.partial]
        for name in SUMMARY_OBS:
            a = r.accumulators[name]
            row += [a.mean if a.count else None, a.variance if a.count else None, a.std_error if a.count else None,
                    a.min if a.count else None, a.max if a.count else None]
        yield row


def _summary_columns():
    cols = ["T", "N", "n_accepted", "n_failed", "n_failed_numerical", "n_rejected_boundary", "boundary_threshold", "partial"]
    for name in SUMMARY_OBS:
        cols += [f"{name}_{k}" for k in ("mean", "var", "se", "min", "max")]
    return cols


def cmd_simulate(cfg: ExperimentConfig, out: Path, jobs: int = 1, with_bks: bool = True) -> tuple[int, Bundle]:
    """Run every configured horizon, then the BKS runs; write the bundle into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out)
    head = _header(cfg)
    results = {}
    for T in sorted(cfg.domain.T_grid):
        res = run_ensemble(cfg, T, jobs=jobs)
        results[res.T] = res
        a = res.accumulators["log_Z_T"]
        _say(f"T={T:g}: N={res.n_total} accepted={res.n_accepted} failed={res.n_failed_numerical} "
             f"rejected={res.n_rejected_boundary} mean log Z={a.mean:.6g}" + (" PARTIAL" if res.partial else ""))
    records = [rec for T in sorted(results) for rec in results[T].records]
    b = Bundle(out, out / "records.jsonl", out / "summary.csv", None, None, head.config_hash,
               any(r.partial for r in results.values()), results)
    bd.write_records(b.records, records, head)
    bd.write_csv(b.summary, head, _summary_columns(), _summary_rows(results, cfg.ensemble.boundary_mass_threshold))
    hres = [r for r in results.values() if r.h is not None]
    if hres:
        r = hres[0]
        b.heights = out / "heights.npz"
        bd.save_heights(b.heights, HeightData(r.h_times, r.h, r.rho, r.h_ids), head)
    rec = cfg.recording
    if with_bks and rec.bks_times and rec.bks_M_grid:
        bks = {}
        for t in rec.bks_times:
            bks[float(t)] = run_bks(cfg, t, jobs=jobs)
            _say(f"BKS t={t:g}: {rec.bks_N} realizations, M grid {list(rec.bks_M_grid)}")
        b.bks = out / "bks.npz"
        bd.save_bks(b.bks, bks, head)
    manifest = {
        "config_hash": head.config_hash,
        "master_seed": head.master_seed,
        "tool_version": head.tool_version,
        "records": b.records.name,
        "summary": b.summary.name,
        "heights": b.heights.name if b.heights else None,
        "bks": b.bks.name if b.bks else None,
        "partial": b.partial,
    }
    (out / "bundle.json").write_text(bd.dumps17(manifest) + "\n")
    return (EXIT_FAIL if b.partial else EXIT_OK), b


# ----------------------------------------------------------------- analyze


def _arrays(records, threshold):
    by_T = {}
    for r in records:
        by_T.setdefault(r.T, []).append(r)
    acc = {}
    for T, rs in by_T.items():
        rs = sorted((r for r in rs if r.accepted(threshold)), key=lambda r: r.realization_id)
        acc[T] = {k: np.array([getattr(r, k) for r in rs], dtype=np.float64) for k in ("log_Z_T", "O_T", "M_T", "residual_T")}
    return by_T, acc


def analyze_records(cfg: ExperimentConfig, records, heights: HeightData | None = None, bks: dict | None = None) -> tuple[list[TestReport], dict]:
    """All applicable reports for a record set plus tidy series for CSV output."""
    tol = cfg.tolerances
    seed = cfg.ensemble.master_seed
    thr = cfg.ensemble.boundary_mass_threshold
    by_T, acc = _arrays(records, thr)
    reports: list[TestReport] = []
    series: dict = {}
    dom = cfg.domain_spec()
    k = cfg.kernel
    r0 = covariance_from_mollifier(build_mollifier(k.shape, k.radius, k.amplitude, dom), dom).r0
    beta = cfg.beta
    Ts = sorted(T for T in acc if acc[T]["log_Z_T"].size >= 2)
    for T in sorted(by_T):
        rs = by_T[T]
        n_acc = sum(r.accepted(thr) for r in rs)
        n_fail = len(rs) - n_acc
        expected = cfg.ensemble.n_for(T)
        reports.append(TestReport("failure_accounting", T, float(n_acc + n_fail), float(expected), float(expected),
                                  "pass" if n_acc + n_fail == expected else "fail", len(rs), seed,
                                  f"accepted={n_acc}; failed={sum(r.failed is not None for r in rs)}; "
                                  f"rejected at boundary_mass>{thr:g}: {n_fail - sum(r.failed is not None for r in rs)}"))
    for T in Ts:
        if beta ** 2 * r0 * T <= tol.light_tail_limit:
            reports.append(normalization_check(acc[T]["log_Z_T"], T, beta, r0, tol, seed))
        reports.append(TestReport("ito_residual_mean_abs", T, float(np.abs(acc[T]["residual_T"]).mean()), None, None, "pass",
                                  acc[T]["residual_T"].size, seed, "discretization defect of log Z = M - <M>/2", gating=False))
    gamma = None
    if len(Ts) >= 3:
        gamma = estimate_gamma(Ts, [acc[T]["log_Z_T"] for T in Ts], tol.ci_level)
        reports += gamma_reports(gamma, seed)
        series["gamma"] = gamma
    if Ts:
        reports += m_checks({T: (acc[T]["M_T"], acc[T]["log_Z_T"]) for T in Ts}, gamma, tol, seed)
    if gamma is not None:
        reports += overlap_growth({T: acc[T]["O_T"] for T in Ts}, gamma, beta, tol, seed)
        reports += clt_report(acc[Ts[-1]]["O_T"], Ts[-1], gamma, beta, tol, seed)
    if len(Ts) >= 4 and Ts[-1] / Ts[0] >= 8:
        vr, vs = variance_scaling({T: acc[T]["log_Z_T"] for T in Ts}, tol, seed)
        reports += vr
        series["variance"] = vs
    if heights is not None:
        reports += bound_suite(cfg, heights, bks)
        hg = height_gamma(heights, seed, tol.ci_level)
        if hg is not None and gamma is not None:
            half = z_value(tol.ci_level) * math.hypot(gamma.se, hg.se)
            diff = gamma.gamma_hat - hg.gamma_hat
            reports.append(TestReport("gamma_height_crosscheck", None, diff, -half, half, "pass" if abs(diff) <= half else "fail",
                                      heights.h.shape[0], seed, f"height-based slope {hg.gamma_hat:.6g} (SE {hg.se:.3g})",
                                      gating=False))
    series["acc"] = acc
    return reports, series


def _report_rows(reports):
    for r in reports:
        yield (r.name, r.T, r.statistic, r.lower, r.upper, r.decision, r.gating, r.n, r.seed, r.ci_lo, r.ci_hi, r.note)


def _write_series(out: Path, head: bd.Header, series: dict, cfg: ExperimentConfig) -> None:
    acc = series["acc"]
    Ts = sorted(acc)
    vs = series.get("variance")
    rows = []
    for T in Ts:
        lz, O = acc[T]["log_Z_T"], acc[T]["O_T"]
        n = lz.size
        v = float(np.var(lz, ddof=1)) if n > 1 else None
        ci = (None, None)
        if vs is not None and T in vs.T:
            j = vs.T.index(T)
            ci = (vs.ci_lo[j], vs.ci_hi[j])
        rows.append((T, n, float(lz.mean()) if n else None, v, ci[0], ci[1], None if v is None else v / T,
                     None if v is None else v * math.log(T) / T, float(np.var(O, ddof=1)) / T if n > 1 else None))
    bd.write_csv(out / "variance_series.csv", head,
                 ("T", "n", "mean_logZ", "var_logZ", "var_ci_lo", "var_ci_hi", "var_over_T", "var_logT_over_T", "var_O_over_T"), rows)
    if Ts and acc[Ts[-1]]["O_T"].size > 2:
        O = acc[Ts[-1]]["O_T"]
        S = (O - O.mean()) / math.sqrt(Ts[-1])
        sd = S.std(ddof=1)
        if sd > 0:
            from scipy import stats

            edges = np.linspace(-4 * sd, 4 * sd, 33)
            counts, _ = np.histogram(S, bins=edges)
            expect = S.size * np.diff(stats.norm.cdf(edges, scale=sd))
            bd.write_csv(out / "overlap_histogram.csv", head, ("T", "bin_lo", "bin_hi", "count", "normal_expected"),
                         [(Ts[-1], a, b, int(c), e) for a, b, c, e in zip(edges[:-1], edges[1:], counts, expect)])


def _side_file(paths: Sequence[Path], name: str) -> Path | None:
    for p in paths:
        cand = p.parent / name
        if cand.exists():
            return cand
    return None


def cmd_analyze(cfg: ExperimentConfig, records_paths: Sequence[Path], out: Path, allow_hash_mismatch: bool = False) -> tuple[int, list[TestReport]]:
    want = config_hash(cfg)
    records = []
    for p in records_paths:
        try:
            head, recs = bd.read_records(p)
        except bd.CorruptRecords as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO, []
        except OSError as exc:
            print(f"error: cannot read records {p}: {exc}", file=sys.stderr)
            return EXIT_IO, []
        got = head.config_hash if head else None
        if got != want:
            msg = f"config hash mismatch for {p}: records {got}, config {want}"
            if not allow_hash_mismatch:
                print(f"error: {msg} (pass --allow-hash-mismatch to proceed)", file=sys.stderr)
                return EXIT_CONFIG, []
            print(f"warning: {msg}", file=sys.stderr)
        records.extend(recs)
    heights = bks = None
    try:
        hp = _side_file(records_paths, "heights.npz")
        if hp is not None:
            heights, _ = bd.load_heights(hp)
        bp = _side_file(records_paths, "bks.npz")
        if bp is not None:
            bks, _ = bd.load_bks(bp)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: corrupt side file: {exc}", file=sys.stderr)
        return EXIT_IO, []
    reports, series = analyze_records(cfg, records, heights, bks)
    out.mkdir(parents=True, exist_ok=True)
    head = _header(cfg)
    bd.write_csv(out / "reports.csv", head, REPORT_COLUMNS, _report_rows(reports))
    _write_series(out, head, series, cfg)
    for r in reports:
        tag = r.decision if r.gating else f"{r.decision} (diagnostic)"
        t = "" if r.T is None else f" T={r.T:g}"
        _say(f"{tag} {r.name}{t} statistic={r.statistic:.6g} {r.note}")
    failed = [r for r in reports if r.gating and r.decision == "fail"]
    return (EXIT_FAIL if failed else EXIT_OK), reports


# -------------------------------------------------------------------- scan


def sweep_configs(cfg: ExperimentConfig) -> list[tuple[float, ExperimentConfig]]:
    s = cfg.sweep
    if not s.values:
        raise ConfigurationError("sweep.values is empty")
    # scans are ensemble-only: height snapshots and BKS runs are switched off
    base = dataclasses.replace(cfg, recording=dataclasses.replace(cfg.recording, h_times=(), bound_times=(), bks_times=()))
    out = []
    for v in s.values:
        if s.kind == "T":
            c = base.with_T_grid((v,))
        elif s.kind == "beta":
            c = base.with_beta(v)
        else:
            c = dataclasses.replace(base, domain=dataclasses.replace(base.domain, dt=float(v)))
        validate(c)
        out.append((float(v), c))
    return out


def cmd_scan(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> tuple[int, list]:
    points = sweep_configs(cfg)
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg.sweep.kind
    code = EXIT_OK
    bundles = []
    for v, c in points:
        sub = out / f"{kind}_{bd.fmt_float(v)}"
        rc, b = cmd_simulate(c, sub, jobs=jobs, with_bks=False)
        code = max(code, rc)
        bundles.append((v, c, b))
    rows = []
    pooled = None
    if kind == "T":
        lz = {v: _accepted(b, c, v)["log_Z_T"] for v, c, b in bundles}
        if len(lz) >= 3:
            pooled = estimate_gamma(sorted(lz), [lz[T] for T in sorted(lz)], cfg.tolerances.ci_level)
    gam = []
    for v, c, b in bundles:
        Ts = sorted(b.results)
        g = pooled
        if kind != "T" and len(Ts) >= 3:
            g = estimate_gamma(Ts, [_accepted(b, c, T)["log_Z_T"] for T in Ts], cfg.tolerances.ci_level)
        gam.append((v, g))
        for T in Ts:
            a = _accepted(b, c, T)
            n = a["log_Z_T"].size
            rows.append((kind, v, T, n, g.gamma_hat if g else None, g.se if g else None,
                         float(np.var(a["log_Z_T"], ddof=1)) if n > 1 else None,
                         float(np.var(a["O_T"], ddof=1)) / T if n > 1 else None,
                         float(np.abs(a["residual_T"]).mean()) if n else None))
    head = _header(cfg)
    bd.write_csv(out / "scan.csv", head, ("sweep_kind", "sweep_value", "T", "n_accepted", "gamma_hat", "gamma_se",
                                          "var_logZ", "var_O_over_T", "mean_abs_residual"), rows)
    if kind == "beta":
        seq = [(v, g) for v, g in gam if g is not None]
        viol = [(a[0], b[0]) for a, b in zip(seq, seq[1:])
                if b[1].gamma_hat + z_value(cfg.tolerances.ci_level) * math.hypot(a[1].se, b[1].se) < a[1].gamma_hat]
        note = "gamma_hat nondecreasing in beta within CI" if not viol else f"decreases between beta pairs {viol}"
        _say(f"monotonicity (reported, not enforced): {note}")
        bd.write_csv(out / "scan_reports.csv", head, ("name", "decision", "note"),
                     [("gamma_monotone_in_beta", "pass" if not viol else "fail", note)])
    return code, bundles


def _accepted(b: Bundle, cfg: ExperimentConfig, T: float) -> dict:
    _, acc = _arrays(b.results[T].records, cfg.ensemble.boundary_mass_threshold)
    return acc.get(T, {k: np.zeros(0) for k in ("log_Z_T", "O_T", "M_T", "residual_T")})


# -------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (default: the reference desk config)")
    common.add_argument("--seed", metavar="U64", type=int, help="override ensemble.master_seed")
    common.add_argument("--jobs", metavar="N", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default: ${bd.OUT_ENV} or {bd.DEFAULT_OUT})")
    common.add_argument("--allow-hash-mismatch", action="store_true", help="analyze records whose config hash differs")
    p = argparse.ArgumentParser(prog="polymerlab", description="Directed polymer simulation laboratory.")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="run the exact-invariant suite")
    v.add_argument("--inject-fault", choices=FAULTS, help="test hook: flip the sign of the noise term in the forward tilt")
    sub.add_parser("simulate", parents=[common], help="run the ensembles and write a results bundle")
    sub.add_parser("scan", parents=[common], help="one bundle per sweep value plus a combined CSV")
    a = sub.add_parser("analyze", parents=[common], help="statistical reports from records")
    a.add_argument("records", nargs="*", help="records files (default: <out>/records.jsonl)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigurationError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        validate(cfg)
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        if args.command == "scan":
            sweep_configs(cfg)
    except ConfigurationError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = resolve_out(args.out, cfg)
    try:
        if args.command == "verify":
            return cmd_verify(cfg, out, args.inject_fault)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.jobs)[0]
        if args.command == "scan":
            return cmd_scan(cfg, out, args.jobs)[0]
        paths = [Path(p) for p in args.records] or [out / "records.jsonl"]
        return cmd_analyze(cfg, paths, out, args.allow_hash_mismatch)[0]
    except ConfigurationError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PolymerLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
