"""Command-line entry point: ``globalwin analyze | simulate | oracle-check``."""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .data import (
    Direction,
    EndpointSpec,
    Schema,
    TrialDataset,
    ValidationReport,
    apply_directions,
    load_trial_tsv,
    summarize,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegreesOfFreedomError,
    GlobalWinError,
    InputError,
    UnattainableTargetError,
)
from .inference import (
    GwpEstimate,
    confidence_interval,
    estimate_gwp,
    hypothesis_test,
    to_win_difference,
    to_win_odds,
)
from .mixed import fit_reml
from .ranks import global_win_fractions, win_fractions

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_CONVERGENCE = 5
EXIT_DF = 6

DEFAULT_SEED = 20240101


def parse_endpoint(text: str) -> tuple[EndpointSpec, str]:
    """``name:column:direction:weight``; trailing parts may be omitted and
    default to the name, higher-is-better and 1."""
    parts = text.split(":")
    if not parts[0] or len(parts) > 4:
        raise argparse.ArgumentTypeError(f"bad endpoint spec {text!r}")
    name = parts[0]
    column = parts[1] if len(parts) > 1 and parts[1] else name
    try:
        direction = Direction.parse(parts[2]) if len(parts) > 2 and parts[2] else Direction.HIGHER_IS_BETTER
        weight = float(parts[3]) if len(parts) > 3 and parts[3] else 1.0
        return EndpointSpec(name, direction, weight), column
    except (DataError, ValueError) as exc:
        raise argparse.ArgumentTypeError(f"bad endpoint spec {text!r}: {exc}") from None


def parse_arm_map(text: str) -> dict[str, int]:
    out = {}
    for item in text.split(","):
        label, sep, value = item.partition("=")
        if not sep or value.strip() not in ("0", "1"):
            raise argparse.ArgumentTypeError(f"bad arm mapping {item!r}; use label=0,label=1")
        out[label.strip()] = int(value)
    return out


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


# --- analysis --------------------------------------------------------------

@dataclass
class AnalysisReport:
    """Everything ``analyze`` prints, kept as numbers until formatting."""

    provenance: dict[str, str]
    validation: ValidationReport
    observed: object
    fractions: object
    fraction_icc: list[float]
    endpoints: list[dict[str, float]]
    estimate: GwpEstimate
    components: tuple[float, float]
    intervals: dict[str, tuple[float, float]]
    tests: dict[str, tuple[float, float, str]]
    win_difference: tuple[float, float, float, float]
    win_odds: tuple[float, float, float, float]
    options: dict[str, object] = field(default_factory=dict)

    def records(self) -> list[tuple[str, object]]:
        """Flat ``(key, value)`` pairs for the machine-readable block."""
        out: list[tuple[str, object]] = list(self.provenance.items())
        v = self.validation
        out += [("rows.total", v.row_count_total), ("rows.kept", v.row_count_kept),
                ("rows.dropped", v.row_count_dropped), ("N0", v.arm_totals[0]),
                ("N1", v.arm_totals[1])]
        for tag, desc in (("observed", self.observed), ("win_fraction", self.fractions)):
            for k, name in enumerate(desc.endpoint_names):
                for i in (0, 1):
                    out.append((f"{tag}.{name}.mean{i}", float(desc.mean[i, k])))
                    out.append((f"{tag}.{name}.sd{i}", float(desc.sd[i, k])))
                for j, other in enumerate(desc.endpoint_names):
                    if j > k:
                        out.append((f"{tag}.corr.{name}.{other}", float(desc.correlation[k, j])))
            for k, name in enumerate(desc.endpoint_names):
                icc = desc.icc[k] if tag == "observed" else self.fraction_icc[k]
                out.append((f"{tag}.{name}.icc", float(icc)))
        for ep in self.endpoints:
            name = ep["name"]
            for key in ("theta_hat", "se", "icc", "lower", "upper"):
                out.append((f"endpoint.{name}.{key}", ep[key]))
        e = self.estimate
        out += [("theta_hat", e.theta_hat), ("se", e.se), ("df", e.df), ("icc", e.icc_hat),
                ("beta1", e.beta1), ("sigma2_alpha", self.components[0]),
                ("sigma2_eps", self.components[1])]
        for scale, (lo, hi) in self.intervals.items():
            out += [(f"ci.{scale}.lower", lo), (f"ci.{scale}.upper", hi)]
        for scale, (stat, p, ref) in self.tests.items():
            out += [(f"test.{scale}.statistic", stat), (f"test.{scale}.p_value", p),
                    (f"test.{scale}.reference", ref)]
        d, dse, dlo, dhi = self.win_difference
        out += [("win_difference", d), ("win_difference.se", dse),
                ("win_difference.lower", dlo), ("win_difference.upper", dhi)]
        lam, lse, llo, lhi = self.win_odds
        out += [("win_odds", lam), ("win_odds.se_log", lse),
                ("win_odds.lower", llo), ("win_odds.upper", lhi)]
        return out


def _fmt_full(value) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "NA" if math.isnan(value) else repr(value)
    return str(value)


def format_machine(report: AnalysisReport) -> str:
    return "".join(f"{k} = {_fmt_full(v)}\n" for k, v in report.records())


def parse_machine(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def _f(x: float, digits: int) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def format_human(r: AnalysisReport) -> str:
    lines = ["Global win probability analysis", ""]
    lines += [f"  {k}: {v}" for k, v in r.provenance.items()]
    v = r.validation
    lines += ["", f"Rows: {v.row_count_total} read, {v.row_count_kept} kept, "
              f"{v.row_count_dropped} dropped",
              f"Arms: N0 = {v.arm_totals[0]} in {r.options['C0']} clusters, "
              f"N1 = {v.arm_totals[1]} in {r.options['C1']} clusters"]
    for lineno, reason in v.issues[:10]:
        lines.append(f"  line {lineno}: {reason}")
    if len(v.issues) > 10:
        lines.append(f"  ... {len(v.issues) - 10} more dropped rows")

    names = r.observed.endpoint_names
    width = max(12, *(len(n) for n in names))
    lines += ["", "Descriptives: mean (SD) by arm, pooled correlation",
              f"  {'':14}{'endpoint':<{width}}  {'control':>14}  {'treatment':>14}  "
              + "  ".join(f"{n[:8]:>8}" for n in names) + f"  {'ICC':>6}"]
    for tag, desc, iccs in (("observed", r.observed, r.observed.icc),
                            ("win fraction", r.fractions, r.fraction_icc)):
        for k, name in enumerate(names):
            cells = [f"{desc.mean[i, k]:.2f} ({desc.sd[i, k]:.2f})" for i in (0, 1)]
            corr = "  ".join(f"{desc.correlation[k, j]:8.2f}" for j in range(len(names)))
            lab = tag if k == 0 else ""
            lines.append(f"  {lab:<14}{name:<{width}}  {cells[0]:>14}  {cells[1]:>14}  {corr}"
                         f"  {_f(float(iccs[k]), 3):>6}")

    lines += ["", "Per-endpoint win probability (mixed model on endpoint win fractions)"]
    for ep in r.endpoints:
        lines.append(
            f"  {ep['name']:<{width}}  theta = {_f(ep['theta_hat'], 4)}  SE = {_f(ep['se'], 4)}  "
            f"ICC = {_f(ep['icc'], 4)}  {r.options['primary_scale']} CI "
            f"({_f(ep['lower'], 3)}, {_f(ep['upper'], 3)})"
        )

    e = r.estimate
    w = ", ".join(f"{n}={wt:g}" for n, wt in zip(names, e.weights))
    lines += ["", f"Global win probability (weights {w})",
              f"  theta_hat = {e.theta_hat:.4f}   SE = {e.se:.4f}   df = {e.df}",
              f"  beta1 = {e.beta1:.4f}   sigma2_alpha = {r.components[0]:.4f}   "
              f"sigma2_eps = {r.components[1]:.4f}   ICC = {_f(e.icc_hat, 4)}"]
    lvl = f"{100 * r.options['level']:g}%"
    for scale, (lo, hi) in r.intervals.items():
        lines.append(f"  {lvl} CI, {scale} scale ({r.options['crit']}): ({lo:.3f}, {hi:.3f})")
    for scale, (stat, p, ref) in r.tests.items():
        lines.append(f"  H0 theta = 0.5, {scale} statistic = {stat:.4f} vs {ref}, p = {p:.4g}")
    d, dse, dlo, dhi = r.win_difference
    lam, lse, llo, lhi = r.win_odds
    lines += ["", "Alternative win measures",
              f"  win difference = {d:.4f}   SE = {dse:.4f}   {lvl} CI ({dlo:.3f}, {dhi:.3f})",
              f"  win odds = {lam:.4f}   SE(log) = {lse:.4f}   {lvl} CI ({llo:.3f}, {lhi:.3f})"]
    return "\n".join(lines) + "\n"


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 16), b""):
                h.update(block)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


def run_analysis(
    path: str,
    schema: Schema,
    endpoints: Sequence[EndpointSpec],
    level: float = 0.95,
    scale: str = "both",
    crit: str = "t",
    df_override: int | None = None,
    seed: int = DEFAULT_SEED,
) -> AnalysisReport:
    digest = _sha256(path)
    raw, validation = load_trial_tsv(path, schema, endpoints)
    d = apply_directions(raw)
    K = d.K
    tables = [win_fractions(d, k) for k in range(K)]
    weights = d.weights
    g = global_win_fractions(tables, weights)
    fit = fit_reml(g, df=df_override)
    est = estimate_gwp(fit, weights)
    scales = ("identity", "logit") if scale == "both" else (scale,)
    intervals = {}
    for s in scales:
        ci = confidence_interval(est, level, s, crit)
        intervals[s] = (ci.lower, ci.upper)
    tests = {}
    for s in ("identity", "logit"):
        t = hypothesis_test(est, s, reference=None if crit == "t" else "z")
        tests[s] = (t.statistic, t.p_value, f"t({t.df})" if t.reference == "t" else "N(0,1)")
    wd = to_win_difference(est, level, crit)
    wo = to_win_odds(est, level, crit)

    primary = "logit" if "logit" in scales else scales[0]
    per_endpoint = []
    fraction_icc = []
    for k in range(K):
        row = {"name": d.endpoints[k].name}
        try:
            gk = global_win_fractions([tables[k]], [1.0])
            fk = fit_reml(gk, df=df_override)
            ek = estimate_gwp(fk, [1.0])
            ck = confidence_interval(ek, level, primary, crit)
            row.update(theta_hat=ek.theta_hat, se=ek.se, icc=ek.icc_hat,
                       lower=ck.lower, upper=ck.upper)
        except (ConvergenceError, ValueError):
            # a constant endpoint has no within-cluster variance to fit
            row.update(theta_hat=float(tables[k].arm_mean(1)), se=math.nan, icc=math.nan,
                       lower=math.nan, upper=math.nan)
        per_endpoint.append(row)
        fraction_icc.append(row["icc"])

    wf = TrialDataset(d.endpoints, d.arm, d.cluster, d.individual,
                      np.column_stack([t.y for t in tables]))
    provenance = {
        "tool": f"globalwin {__version__}",
        "input": str(path),
        "input_sha256": digest,
        "weights": ",".join(f"{e.name}={e.weight!r}" for e in raw.endpoints),
        "directions": ",".join(f"{e.name}={e.direction.value}" for e in raw.endpoints),
        "level": repr(level),
        "scale": scale,
        "crit": crit,
        "df_override": "none" if df_override is None else str(df_override),
        "seed": str(seed),
    }
    return AnalysisReport(
        provenance=provenance,
        validation=validation,
        observed=summarize(raw),
        fractions=summarize(wf),
        fraction_icc=fraction_icc,
        endpoints=per_endpoint,
        estimate=est,
        components=(fit.components.sigma2_alpha, fit.components.sigma2_eps),
        intervals=intervals,
        tests=tests,
        win_difference=(wd.delta_hat, wd.se, wd.interval.lower, wd.interval.upper),
        win_odds=(wo.lambda_hat, wo.se_log_lambda, wo.interval.lower, wo.interval.upper),
        options={"level": level, "crit": crit, "primary_scale": primary,
                 "C0": fit.C0, "C1": fit.C1},
    )


def cmd_analyze(args: argparse.Namespace) -> int:
    if not args.endpoint:
        raise DataError("at least one --endpoint is required")
    specs, columns = zip(*args.endpoint)
    schema = Schema(args.arm_col, args.cluster_col, args.id_col, tuple(columns), args.arm_map)
    report = run_analysis(args.input, schema, specs, args.level, args.scale, args.crit,
                          args.df_override, args.seed)
    text = format_machine(report) if args.machine else format_human(report)
    _emit(text, args.out)
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    sys.stdout.write(text)
    if out:
        try:
            with open(out, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise InputError(f"cannot write {out}: {exc}") from exc


# --- simulation ------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    from .simgen import (
        config_from_mapping,
        expand_grid,
        format_rows,
        load_config,
        run_scenario,
    )

    kv = load_config(args.config) if args.config else {}
    kv.update(dict(args.set or []))
    for key, flag in (("reps", args.reps), ("seed", args.seed), ("level", args.level),
                      ("scale", args.scale), ("critical", args.crit)):
        if flag is not None:
            kv[key] = str(flag)
    grid = {}
    for key, values in args.grid or []:
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
    configs = [config_from_mapping(item) for item in expand_grid(kv, grid)]
    results = []
    for i, cfg in enumerate(configs, start=1):
        res = run_scenario(cfg, jobs=args.jobs)
        results.append(res)
        if not args.quiet:
            first = next(iter(res.metrics.values()))
            print(f"scenario {i}/{len(configs)}: C={cfg.clusters} theta={res.true_theta:.4f} "
                  f"omega12={cfg.correlations.omega12} ECP={first.ecp:.2f} ERR={first.err:.2f}",
                  file=sys.stderr)
    text = format_rows(results)
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise InputError(f"cannot write {args.out}: {exc}") from exc
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- oracle self-checks ----------------------------------------------------

def cmd_oracle_check(args: argparse.Namespace) -> int:
    from .oracles import run_all

    results = run_all(args.seed, fault=args.inject_fault, scale=args.count_scale)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name}: {r.cases} cases, worst error {r.worst:.3g} "
              f"(tolerance {r.tolerance:g})")
        for seed, err in r.failures[:5]:
            print(f"      fixture seed {seed}: error {err:.3g}")
        ok &= r.passed
    print(f"seed = {args.seed}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="globalwin", description=(
        "Global win probability for cluster randomized trials with multiple endpoints."))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyse a tab-delimited trial file")
    a.add_argument("--input", required=True, help="tab-delimited file with a header row")
    a.add_argument("--arm-col", default="arm")
    a.add_argument("--cluster-col", default="cluster")
    a.add_argument("--id-col", default="id")
    a.add_argument("--arm-map", type=parse_arm_map, default=None,
                   help="map arm labels to 0/1, e.g. control=0,treatment=1")
    a.add_argument("--endpoint", type=parse_endpoint, action="append", default=[],
                   metavar="NAME:COL:DIRECTION:WEIGHT",
                   help="repeatable; direction is higher or lower (default higher)")
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--scale", choices=("identity", "logit", "both"), default="both")
    a.add_argument("--crit", choices=("t", "z"), default="t")
    a.add_argument("--df-override", type=int, default=None)
    a.add_argument("--seed", type=int, default=DEFAULT_SEED)
    a.add_argument("--out", help="also write the report to this file")
    a.add_argument("--machine", action="store_true",
                   help="print key = value lines at full precision instead of the report")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run coverage simulation scenarios")
    s.add_argument("--config", help="key = value scenario file")
    s.add_argument("--set", type=_key_value, action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    s.add_argument("--grid", type=_key_value, action="append", metavar="KEY=V1,V2",
                   help="factorial axis over clusters, omega12 or theta (repeatable)")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--level", type=float)
    s.add_argument("--scale", choices=("identity", "logit", "both"))
    s.add_argument("--crit", choices=("t", "z"))
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="metrics file (tab-delimited); stdout if omitted")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle-check", help="run randomised equivalence self-checks")
    o.add_argument("--seed", type=int, default=12345)
    o.add_argument("--count-scale", type=float, default=1.0,
                   help="multiply the number of fixtures per suite")
    o.add_argument("--inject-fault", metavar="SUITE", default=None,
                   help="test hook: perturb one suite so it must fail")
    o.set_defaults(func=cmd_oracle_check)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, InputError):
        return EXIT_IO
    if isinstance(exc, DegreesOfFreedomError):
        return EXIT_DF
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, (DataError, ConfigError, UnattainableTargetError, ValueError)):
        return EXIT_VALIDATION
    return EXIT_VALIDATION


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GlobalWinError, ValueError) as exc:
        kind = type(exc).__name__
        print(f"globalwin: {kind}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
