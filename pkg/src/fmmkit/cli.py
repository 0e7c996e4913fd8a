"""Benchmark and verification command line.

    fmmkit run      one evaluation, JSON report (timings at ms resolution)
    fmmkit verify   evaluation + direct-summation check, exit 1 on failure
    fmmkit scaling  sweep problem sizes, CSV of per-phase timings and counts
    fmmkit tune     pick order/angle per accuracy target, CSV

Options resolve as: command line > config file (--config, key=value lines,
'#' comments) > built-in defaults.  Exit codes: 0 success, 1 verification
tolerance exceeded, 2 usage or configuration errors (bad flags, unreadable
files, unsupported combinations such as listfmm on a rect-shaped tree).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import statistics
import sys

from .geometry import generate_distribution, load_particles_csv
from .mac import KINDS, MacConfig
from .traversal import STRATEGIES, EvalConfig, evaluate_on_tree
from .tree import CENTER_MODES, SHAPES, build_tree
from .tuner import select_p_theta, verify_against_direct

DEFAULTS = {
    "n": 10000,
    "ncrit": 30,
    "p": 4,
    "theta": 0.6,
    "mac": "fmm",
    "strategy": "dualtree",
    "shape": "cubic",
    "center": "geometric",
    "threads": 1,
    "mutual": False,
    "seed": 0,
    "reps": 3,
    "tol": 1e-3,
    "task_grain": 5000,
    "use_rsqrt": False,
    "sample": 1000,
    "verify": False,
    "trace": False,
    "input": None,
    "output": None,
    "n_list": "1000,10000,100000",
    "targets": "1e-2,1e-3,1e-4,1e-5",
    "p_list": "3,4,5,6",
}

_CHOICES = {
    "mac": KINDS,
    "strategy": STRATEGIES,
    "shape": SHAPES,
    "center": CENTER_MODES,
}


class CliError(Exception):
    """Configuration or usage problem: maps to exit code 2."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmmkit",
        description="Fast 1/r potential and force summation benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, timing: bool = True) -> None:
        p.add_argument("--config", help="key=value option file (flags win)")
        p.add_argument("--n", type=float, help="number of generated bodies")
        p.add_argument("--seed", type=int, help="RNG seed for generated bodies")
        p.add_argument("--input", help="CSV of bodies (x,y,z,q) instead of --n")
        p.add_argument("--output", help="write the report here instead of stdout")
        p.add_argument("--ncrit", type=int, help="leaf split threshold")
        p.add_argument("--shape", choices=SHAPES, help="cell boxes: cubic or tightened")
        p.add_argument("--center", choices=CENTER_MODES, help="expansion centers")
        p.add_argument("--p", type=int, help="expansion order")
        p.add_argument("--theta", type=float, help="opening angle")
        p.add_argument("--mac", choices=KINDS, help="acceptance criterion")
        p.add_argument("--strategy", choices=STRATEGIES, help="far-field strategy")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--mutual", action=argparse.BooleanOptionalAction,
                       help="symmetric pair evaluation (dual tree)")
        p.add_argument("--task-grain", dest="task_grain", type=int,
                       help="bodies per parallel task subtree")
        p.add_argument("--use-rsqrt", dest="use_rsqrt",
                       action=argparse.BooleanOptionalAction,
                       help="approximate reciprocal square root in P2P")
        if timing:
            p.add_argument("--reps", type=int, help="timing repetitions (median)")

    p_run = sub.add_parser("run", help="single evaluation, JSON report")
    common(p_run)
    p_run.add_argument("--verify", action=argparse.BooleanOptionalAction,
                       help="also measure the error against direct summation")
    p_run.add_argument("--tol", type=float, help="fail (exit 1) above this error")
    p_run.add_argument("--sample", type=int, help="verification sample size")
    p_run.add_argument("--trace", action=argparse.BooleanOptionalAction,
                       help="embed the kernel-call event list (small runs only)")

    p_ver = sub.add_parser("verify", help="evaluation checked against direct summation")
    common(p_ver)
    p_ver.add_argument("--tol", type=float, help="allowed relative L2 force error")
    p_ver.add_argument("--sample", type=int, help="verification sample size")

    p_sca = sub.add_parser("scaling", help="timing sweep over problem sizes, CSV")
    common(p_sca)
    p_sca.add_argument("--n-list", dest="n_list", help="comma-separated body counts")

    p_tun = sub.add_parser("tune", help="order/angle search per accuracy target, CSV")
    common(p_tun, timing=False)
    p_tun.add_argument("--targets", help="comma-separated error targets")
    p_tun.add_argument("--p-list", dest="p_list", help="candidate expansion orders")
    p_tun.add_argument("--sample", type=int, help="error sample size")
    p_tun.add_argument("--reps", type=int, help="timing repetitions (median)")
    return parser


def _load_config_file(path: str) -> dict:
    opts = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                key = key.strip().replace("-", "_")
                if key not in DEFAULTS:
                    raise CliError(f"{path}:{lineno}: unknown option {key!r}")
                opts[key] = value.strip()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from exc
    return opts


def _coerce(key: str, value: str):
    ref = DEFAULTS[key]
    if key in _CHOICES:
        if value not in _CHOICES[key]:
            raise CliError(f"config option {key}={value!r}: expected one of {_CHOICES[key]}")
        return value
    if isinstance(ref, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"config option {key}={value!r} is not a boolean")
    if isinstance(ref, int):
        return int(float(value))
    if isinstance(ref, float):
        return float(value)
    return value


class Options:
    """Flags merged over config file over defaults, attribute-style."""

    def __init__(self, args: argparse.Namespace):
        self._args = args
        self._config = _load_config_file(args.config) if getattr(args, "config", None) else {}

    def __getattr__(self, key: str):
        if key.startswith("_"):
            raise AttributeError(key)
        flag = getattr(self._args, key, None)
        if flag is not None:
            return flag
        if key in self._config:
            return _coerce(key, self._config[key])
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise AttributeError(key)


def _parse_list(text: str, kind, what: str) -> list:
    try:
        items = [kind(float(tok)) if kind is int else kind(tok)
                 for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise CliError(f"bad {what} list {text!r}: {exc}") from exc
    if not items:
        raise CliError(f"empty {what} list")
    return items


def _make_particles(opt: Options):
    if opt.input:
        try:
            return load_particles_csv(opt.input)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load {opt.input}: {exc}") from exc
    n = int(opt.n)
    if n < 1:
        raise CliError(f"--n must be positive, got {n}")
    return generate_distribution("uniform", n, seed=opt.seed)


def _make_tree(opt: Options):
    ps = _make_particles(opt)
    try:
        return build_tree(ps, ncrit=opt.ncrit, shape=opt.shape, center_mode=opt.center)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _make_cfg(opt: Options) -> EvalConfig:
    try:
        return EvalConfig(
            strategy=opt.strategy,
            mac=MacConfig(opt.mac, opt.theta),
            p=opt.p,
            mutual=bool(opt.mutual),
            task_grain=opt.task_grain,
            use_rsqrt=bool(opt.use_rsqrt),
        )
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def _timed_reports(tree, cfg, opt: Options, trace: bool = False):
    """Run ``reps`` evaluations; last report carries median phase times."""
    reps = max(1, int(opt.reps))
    reports = []
    for _ in range(reps):
        tree.multipole = None  # fresh vertical passes each repetition
        tree.p = None
        reports.append(evaluate_on_tree(tree, cfg, threads=opt.threads, trace=trace))
    final = reports[-1]
    final.upward_time = statistics.median(r.upward_time for r in reports)
    final.traversal_time = statistics.median(r.traversal_time for r in reports)
    final.downward_time = statistics.median(r.downward_time for r in reports)
    return final


def _emit(text: str, output: str | None) -> None:
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _report_doc(rep, tree, opt: Options) -> dict:
    doc = rep.to_dict()
    doc["seed"] = opt.seed
    doc["input"] = opt.input
    doc["reps"] = int(opt.reps)
    doc["tree"] = tree.stats()
    return doc


def _cmd_run(opt: Options) -> int:
    tree = _make_tree(opt)
    cfg = _make_cfg(opt)
    try:
        rep = _timed_reports(tree, cfg, opt, trace=bool(opt.trace))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    failed = False
    if opt.verify:
        rep.achieved_error = verify_against_direct(tree, sample=opt.sample)
        failed = rep.achieved_error > opt.tol
    doc = _report_doc(rep, tree, opt)
    if opt.trace and rep.trace is not None:
        doc["trace"] = [[k, a, b] for k, a, b in rep.trace]
    _emit(json.dumps(doc, indent=2) + "\n", opt.output)
    return 1 if failed else 0


def _cmd_verify(opt: Options) -> int:
    tree = _make_tree(opt)
    cfg = _make_cfg(opt)
    try:
        rep = _timed_reports(tree, cfg, opt)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    rep.achieved_error = verify_against_direct(tree, sample=opt.sample)
    doc = _report_doc(rep, tree, opt)
    _emit(json.dumps(doc, indent=2) + "\n", opt.output)
    ok = rep.achieved_error <= opt.tol
    print(f"verify: error={rep.achieved_error:.3e} tol={opt.tol:g} -> "
          f"{'ok' if ok else 'FAIL'}", file=sys.stderr)
    return 0 if ok else 1


def _cmd_scaling(opt: Options) -> int:
    sizes = _parse_list(opt.n_list, int, "n")
    cfg = _make_cfg(opt)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["n", "ncells", "depth", "build_ms", "upward_ms",
                     "traversal_ms", "downward_ms", "total_ms",
                     "p2p_pairs", "m2l_calls", "m2p_calls"])
    for n in sizes:
        if n < 1:
            raise CliError(f"body counts must be positive, got {n}")
        ps = generate_distribution("uniform", n, seed=opt.seed)
        try:
            tree = build_tree(ps, ncrit=opt.ncrit, shape=opt.shape, center_mode=opt.center)
            rep = _timed_reports(tree, cfg, opt)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        writer.writerow([
            n, tree.ncells, tree.depth,
            int(round(rep.build_time * 1e3)),
            int(round(rep.upward_time * 1e3)),
            int(round(rep.traversal_time * 1e3)),
            int(round(rep.downward_time * 1e3)),
            int(round(rep.total_time * 1e3)),
            rep.stats.p2p_pairs, rep.stats.m2l_calls, rep.stats.m2p_calls,
        ])
    _emit(buf.getvalue(), opt.output)
    return 0


def _cmd_tune(opt: Options) -> int:
    targets = _parse_list(opt.targets, float, "target")
    orders = _parse_list(opt.p_list, int, "order")
    tree = _make_tree(opt)
    buf = io.StringIO()
    writer = csv.writer(buf)
    header = ["target", "best_p", "best_theta"]
    for p in orders:
        header += [f"theta_p{p}", f"error_p{p}", f"time_ms_p{p}"]
    writer.writerow(header)
    for target in targets:
        try:
            result = select_p_theta(tree, target, p_candidates=tuple(orders),
                                    mac_kind=opt.mac, threads=opt.threads,
                                    sample=opt.sample, reps=opt.reps)
        except ValueError:
            writer.writerow([f"{target:g}", "", ""] + ["", "", ""] * len(orders))
            continue
        row = [f"{target:g}", result.best.p, f"{result.best.theta:.2f}"]
        by_p = {e.p: e for e in result.entries}
        for p in orders:
            e = by_p.get(p)
            if e is None or not e.reachable:
                row += ["", "", ""]
            else:
                row += [f"{e.theta:.2f}", f"{e.error:.3e}",
                        int(round(e.traversal_time * 1e3))]
        writer.writerow(row)
    _emit(buf.getvalue(), opt.output)
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "verify": _cmd_verify,
    "scaling": _cmd_scaling,
    "tune": _cmd_tune,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        opt = Options(args)
        return _COMMANDS[args.command](opt)
    except CliError as exc:
        print(f"fmmkit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
