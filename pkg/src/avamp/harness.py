"""
harness.py: experiment configs, Monte-Carlo runs, SE comparison and the CLI.

Config files are JSON with a ``schema_version`` header.  A run writes

    report.csv     one row per (mode, iteration): median/quartile NMSE of
                   xhat1 over successful trials, the SE prediction, mean
                   parameter estimates and the failure count
    summary.json   config echo, SE gates, failures and timings
    trace_<t>.csv  per-iteration raw state of trial t (with --dump-traces)

Every trial draws from its own SeedSequence([master_seed, trial]) stream,
so results do not depend on the worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .model import BgParams, InvalidConfig, geometric_spectrum, noise_precision_for_snr, synthesize_instance
from .state_evolution import se_config_for_mode, se_run
from .vamp import MODES, VampConfig, VampFailure, mode_config, run

SCHEMA_VERSION = 1

REPORT_HEADER = (
    "mode,iter,nmse_db_median,nmse_db_q25,nmse_db_q75,se_nmse_db,beta_hat,mu_hat,"
    "taux_hat,theta2_hat,gamma1,eta1,gamma2,eta2,failures"
).split(",")

TRACE_HEADER = (
    "mode,iter,nmse1_db,nmse2_db,gamma1,eta1,gamma2,eta2,beta_hat,mu_hat,tau_hat,"
    "theta2_hat,tau1_emp,tau2_emp,kurt1,flags"
).split(",")

EXIT_OK, EXIT_GATE, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ProblemSpec:
    m: int
    n: int
    kappa: float
    snr_db: float | None
    theta1_true: BgParams

    def __post_init__(self):
        if not (1 <= self.m <= self.n):
            raise InvalidConfig(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if not self.kappa >= 1:
            raise InvalidConfig("kappa must be >= 1")


@dataclass(frozen=True)
class GateSpec:
    max_dev_db: float = 1.0
    modes: tuple = ("oracle", "em")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    problem: ProblemSpec
    n_trials: int = 100
    master_seed: int = 0
    n_iters: int = 40
    damping: float = 1.0
    ml_bins: int = 8
    modes: tuple = ("oracle", "em", "autotune")
    gate: GateSpec = GateSpec()
    theta1_candidates: tuple = ()
    output_dir: str = "out"
    notes: str = ""

    def __post_init__(self):
        if self.n_trials < 1:
            raise InvalidConfig("n_trials must be >= 1")
        if not self.modes:
            raise InvalidConfig("at least one mode is required")
        for mode in self.modes:
            if mode not in MODES:
                raise InvalidConfig(f"unknown mode {mode!r}; valid modes are {MODES}")
        if len(set(self.modes)) != len(self.modes):
            raise InvalidConfig("modes must be distinct")
        for mode in self.gate.modes:
            if mode not in self.modes:
                raise InvalidConfig(f"gated mode {mode!r} is not in modes")
        if "grid" in self.modes and not self.theta1_candidates:
            raise InvalidConfig("grid mode needs theta1_candidates")
        # build once so solver-level validation errors surface at load time
        self.vamp_config("oracle")

    def vamp_config(self, mode):
        base = VampConfig(n_iters=self.n_iters, damping=self.damping, ml_bins=self.ml_bins,
                          record_se_inputs=False)
        return mode_config(mode, base, theta1_candidates=self.theta1_candidates or None)

    # -- JSON ---------------------------------------------------------------

    def to_dict(self):
        d = asdict(self)
        d["modes"] = list(self.modes)
        d["gate"]["modes"] = list(self.gate.modes)
        d["theta1_candidates"] = [asdict(c) for c in self.theta1_candidates]
        return {"schema_version": SCHEMA_VERSION, **d}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        try:
            prob = dict(d.pop("problem"))
            prob["theta1_true"] = BgParams(**prob["theta1_true"])
            problem = ProblemSpec(**prob)
            gate = d.pop("gate", None)
            gate = GateSpec() if gate is None else GateSpec(
                max_dev_db=float(gate.get("max_dev_db", 1.0)), modes=tuple(gate.get("modes", ()))
            )
            cands = tuple(BgParams(**c) for c in d.pop("theta1_candidates", ()))
            if "modes" in d:
                d["modes"] = tuple(d["modes"])
            return cls(problem=problem, gate=gate, theta1_candidates=cands, **d)
        except (KeyError, TypeError) as exc:
            raise InvalidConfig(f"malformed config: {exc}") from exc

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def preset(name):
    """The two large-system experiments: M=512, N=1024, BG(0.1, 0, 1), 40 dB."""
    kappas = {"appendix-g-k100": 100.0, "appendix-g-k10": 10.0}
    if name not in kappas:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(kappas)}")
    return ExperimentConfig(
        name=name,
        problem=ProblemSpec(m=512, n=1024, kappa=kappas[name], snr_db=40.0,
                            theta1_true=BgParams(0.1, 0.0, 1.0)),
        n_trials=100,
        n_iters=40,
        output_dir=f"out/{name}",
        notes="Iteration count is not fixed by the experiment description; 40 is enough to reach the fixed point.",
    )


PRESETS = ("appendix-g-k100", "appendix-g-k10")


# ---------------------------------------------------------------------------
# trials


def trial_rng(master_seed, trial):
    return np.random.default_rng(np.random.SeedSequence([master_seed, trial]))


@dataclass
class TrialResult:
    trial: int
    traces: dict  # mode -> list of IterationRecord (partial on failure)
    failed: dict  # mode -> error message or None
    seconds: dict


def run_trial(cfg: ExperimentConfig, trial: int, record_se_inputs=False):
    """One instance shared by all modes."""
    with threadpool_limits(1):
        inst = synthesize_instance(cfg.problem, trial_rng(cfg.master_seed, trial))
        traces, failed, seconds = {}, {}, {}
        for mode in cfg.modes:
            vc = replace(cfg.vamp_config(mode), record_se_inputs=record_se_inputs)
            t0 = time.perf_counter()
            try:
                traces[mode] = run(inst, vc)
                failed[mode] = None
            except VampFailure as exc:
                traces[mode] = exc.trace
                failed[mode] = str(exc)
            seconds[mode] = time.perf_counter() - t0
    return TrialResult(trial, traces, failed, seconds)


def _run_trial_star(args):
    return run_trial(*args)


def run_trials(cfg, threads=1, record_se_inputs=False, progress=None):
    """All trials, returned in trial order whatever the worker count."""
    jobs = [(cfg, t, record_se_inputs) for t in range(cfg.n_trials)]
    results = []
    if threads <= 1:
        for job in jobs:
            results.append(run_trial(*job))
            if progress:
                progress(len(results), cfg.n_trials)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for res in pool.map(_run_trial_star, jobs, chunksize=1):
                results.append(res)
                if progress:
                    progress(len(results), cfg.n_trials)
    results.sort(key=lambda r: r.trial)
    return results


# ---------------------------------------------------------------------------
# state evolution


def se_curves(cfg: ExperimentConfig):
    """SE-predicted NMSE (dB) of xhat1 per mode; NaN past an invalid SE step."""
    p = cfg.problem
    out = {}
    if p.snr_db is None:
        return {mode: [math.nan] * cfg.n_iters for mode in cfg.modes}
    spec = geometric_spectrum(p.m, p.n, p.kappa)
    s = np.zeros(p.n)
    s[: p.m] = spec.values
    theta2 = noise_precision_for_snr(s, p.m, p.theta1_true, p.snr_db)
    for mode in cfg.modes:
        sc = se_config_for_mode(mode, p.theta1_true, theta2, s, p.m, cfg.n_iters,
                                theta1_candidates=cfg.theta1_candidates or None)
        states = se_run(sc)
        curve = [st.nmse1_db if st.valid else math.nan for st in states]
        out[mode] = curve + [math.nan] * (cfg.n_iters - len(curve))
    return out


# ---------------------------------------------------------------------------
# aggregation and files


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".10g")


def aggregate(cfg, results, se):
    """Report rows: medians and quartiles over trials that reached the iteration."""
    rows = []
    for mode in cfg.modes:
        for k in range(cfg.n_iters):
            recs = [r.traces[mode][k] for r in results if len(r.traces[mode]) > k]
            fails = len(results) - len(recs)
            row = {"mode": mode, "iter": k, "se_nmse_db": se[mode][k], "failures": fails}
            if recs:
                nm = np.array([x.nmse1_db for x in recs])
                q25, med, q75 = np.percentile(nm, [25, 50, 75])
                row.update(nmse_db_median=med, nmse_db_q25=q25, nmse_db_q75=q75)
                for col, attr in [("beta_hat", "beta_hat"), ("mu_hat", "mu_hat"), ("taux_hat", "tau_hat"),
                                  ("theta2_hat", "theta2_hat"), ("gamma1", "gamma1"), ("eta1", "eta1"),
                                  ("gamma2", "gamma2"), ("eta2", "eta2")]:
                    row[col] = float(np.mean([getattr(x, attr) for x in recs]))
            rows.append(row)
    return rows


def se_only_rows(cfg, se):
    return [{"mode": m, "iter": k, "se_nmse_db": se[m][k], "failures": 0}
            for m in cfg.modes for k in range(cfg.n_iters)]


def write_report(rows, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for row in rows:
        w.writerow([_fmt(row.get(c, math.nan)) if c != "mode" else row["mode"] for c in REPORT_HEADER])
    Path(path).write_text(buf.getvalue())


def read_report(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise InvalidConfig(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            row = {"mode": r["mode"], "iter": int(r["iter"]), "failures": int(r["failures"])}
            for c in REPORT_HEADER[2:-1]:
                row[c] = float(r[c])
            rows.append(row)
    return rows


def write_trace(result, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for mode, recs in result.traces.items():
        for x in recs:
            w.writerow([mode, x.k] + [_fmt(v) for v in (
                x.nmse1_db, x.nmse2_db, x.gamma1, x.eta1, x.gamma2, x.eta2, x.beta_hat, x.mu_hat,
                x.tau_hat, x.theta2_hat, x.tau1_emp, x.tau2_emp, x.kurt1)] + [";".join(x.flags)])
    Path(path).write_text(buf.getvalue())


def compare_rows(rows):
    """Per-mode |median - SE| in dB: {mode: (deviations, max)}; None when no SE curve."""
    out = {}
    for mode in dict.fromkeys(r["mode"] for r in rows):
        sel = [r for r in rows if r["mode"] == mode]
        dev = [abs(r["nmse_db_median"] - r["se_nmse_db"]) for r in sel]
        finite = [d for d in dev if math.isfinite(d)]
        out[mode] = (dev, max(finite) if finite else None)
    return out


def evaluate_gates(rows, gate: GateSpec):
    """Gate results per gated mode; raises InvalidConfig when a gated mode has no SE curve."""
    cmp = compare_rows(rows)
    gates = {}
    for mode in gate.modes:
        if mode not in cmp:
            raise InvalidConfig(f"report has no rows for gated mode {mode!r}")
        dev, mx = cmp[mode]
        if mx is None:
            raise InvalidConfig(f"mode {mode!r} has no SE curve to compare against")
        gates[mode] = {"max_dev_db": mx, "limit_db": gate.max_dev_db, "pass": bool(mx <= gate.max_dev_db)}
    return gates


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads=1, dump_traces=False, log=None):
    """Run all trials, write report.csv / summary.json (and traces); returns (rows, summary)."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    progress = None
    if log:
        def progress(done, total):
            if done == total or done % max(1, total // 10) == 0:
                log(f"trials {done}/{total}")
    results = run_trials(cfg, threads=threads, record_se_inputs=dump_traces, progress=progress)
    t_sim = time.perf_counter() - t0
    t1 = time.perf_counter()
    se = se_curves(cfg)
    t_se = time.perf_counter() - t1
    rows = aggregate(cfg, results, se)
    write_report(rows, out / "report.csv")
    if dump_traces:
        for r in results:
            write_trace(r, out / f"trace_{r.trial}.csv")
    try:
        gates = evaluate_gates(rows, cfg.gate)
    except InvalidConfig as exc:
        gates = {"error": str(exc)}
    summary = {
        "config": cfg.to_dict(),
        "gates": gates,
        "failures": {m: sum(r.failed[m] is not None for r in results) for m in cfg.modes},
        "failure_messages": {m: [f"trial {r.trial}: {r.failed[m]}" for r in results if r.failed[m]]
                             for m in cfg.modes},
        "timings": {
            "total_s": time.perf_counter() - t0,
            "simulation_s": t_sim,
            "state_evolution_s": t_se,
            "solver_s_per_mode": {m: sum(r.seconds[m] for r in results) for m in cfg.modes},
            "threads": threads,
        },
        "notes": ("SE predicts the undamped iteration; with damping < 1 the deviations "
                  "are informational." if cfg.damping < 1 else ""),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return rows, summary


def run_se_only(cfg, out_dir=None):
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = se_only_rows(cfg, se_curves(cfg))
    write_report(rows, out / "report.csv")
    summary = {"config": cfg.to_dict(), "gates": {}, "failures": {},
               "timings": {"state_evolution_s": time.perf_counter() - t0}, "notes": "state evolution only"}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return rows, summary


# ---------------------------------------------------------------------------
# CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override master_seed")
    common.add_argument("--trials", type=int, help="override n_trials")
    common.add_argument("--threads", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    common.add_argument("--dump-traces", action="store_true", help="write trace_<trial>.csv files")

    p = _Parser(prog="avamp", description="Adaptive VAMP experiments and state evolution.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    r = sub.add_parser("run", parents=[common], help="Monte-Carlo run plus SE curves")
    r.add_argument("config")
    s = sub.add_parser("se", parents=[common], help="state evolution only")
    s.add_argument("config")
    c = sub.add_parser("compare", parents=[common], help="check a report against its SE gate")
    c.add_argument("report_dir")
    c.add_argument("--gate-db", type=float, help="override the configured gate")
    g = sub.add_parser("gen-config", parents=[common], help="emit a preset config")
    g.add_argument("--preset", required=True, choices=PRESETS)
    return p


def _load_with_overrides(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.trials is not None:
        cfg = replace(cfg, n_trials=args.trials)
    return cfg


def _compare(args, log):
    d = Path(args.report_dir)
    rows = read_report(d / "report.csv")
    summary_path = d / "summary.json"
    if summary_path.exists():
        gd = json.loads(summary_path.read_text())["config"].get("gate", {})
        gate = GateSpec(max_dev_db=float(gd.get("max_dev_db", 1.0)), modes=tuple(gd.get("modes", ())))
    else:
        gate = GateSpec(modes=tuple(dict.fromkeys(r["mode"] for r in rows)))
    if args.gate_db is not None:
        gate = replace(gate, max_dev_db=args.gate_db)
    cmp = compare_rows(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "iter", "abs_dev_db"])
    for mode, (dev, mx) in cmp.items():
        for k, dv in enumerate(dev):
            w.writerow([mode, k, _fmt(dv)])
        log(f"{mode:12s} max |sim - SE| = {'n/a' if mx is None else f'{mx:.3f} dB'}")
    (d / "comparison.csv").write_text(buf.getvalue())
    gates = evaluate_gates(rows, gate)
    ok = all(g["pass"] for g in gates.values())
    for mode, g in gates.items():
        log(f"gate {mode}: {'PASS' if g['pass'] else 'FAIL'} (max {g['max_dev_db']:.3f} dB, limit {g['limit_db']} dB)")
    return EXIT_OK if ok else EXIT_GATE


def cli_main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("avamp: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    def log(msg):
        if not args.quiet:
            print(msg, file=sys.stderr if args.command in ("run", "se") else sys.stdout)

    try:
        if args.command == "gen-config":
            text = preset(args.preset).dumps()
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                path = Path(args.out) / f"{args.preset}.json"
                path.write_text(text)
                log(f"wrote {path}")
            else:
                sys.stdout.write(text)
            return EXIT_OK
        if args.command == "compare":
            return _compare(args, log)
        cfg = _load_with_overrides(args)
        if args.command == "se":
            run_se_only(cfg, args.out)
            log(f"wrote {Path(args.out or cfg.output_dir) / 'report.csv'}")
            return EXIT_OK
        rows, summary = run_experiment(cfg, args.out, threads=args.threads,
                                       dump_traces=args.dump_traces, log=log)
        for mode, n in summary["failures"].items():
            log(f"{mode:12s} failures {n}/{cfg.n_trials}")
        for mode, g in summary["gates"].items():
            if isinstance(g, dict):
                log(f"gate {mode}: max dev {g['max_dev_db']:.3f} dB ({'pass' if g['pass'] else 'fail'})")
        log(f"wrote {Path(args.out or cfg.output_dir)}")
        return EXIT_OK
    except (InvalidConfig, FileNotFoundError, OSError) as exc:
        print(f"avamp: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    raise SystemExit(cli_main())
