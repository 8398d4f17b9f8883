"""Batch front-end.

Every subcommand writes its tables (CSV) or structured objects (JSON) into
``--out`` together with ``manifest.json`` (config, seeds, versions, wall
time).  A flat ``key = value`` file passed with ``--config`` supplies
defaults; flags on the command line override it.  Errors go to stderr as a
JSON object and map to distinct exit codes.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .errors import InvalidConfig, SiltlabError

MANIFEST_SCHEMA = 1
EXIT_BAD_FLAG = 2


class BadFlag(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise BadFlag(message)


# ---------------------------------------------------------------------------
# argument definitions


def _common(p: argparse.ArgumentParser, samples: Optional[int] = None):
    p.add_argument("--config", help="flat key=value file with defaults")
    p.add_argument("--out", default="siltlab_out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help="worker processes (never changes results)")
    if samples is not None:
        p.add_argument("--samples", type=int, default=samples)


def _proposal_flags(p):
    p.add_argument("--proposal", choices=["set", "attract", "doob"], default="set")
    p.add_argument("--q-stay", type=float, default=0.7)
    p.add_argument("--tilt-alpha", type=float, default=3.0)
    p.add_argument("--tilted-steps", type=int, default=None)
    p.add_argument("--visit-cap", type=str, default="sqrt", help="integer, 'sqrt' (ceil sqrt n) or 'none'")
    p.add_argument("--defensive", type=float, default=0.0, help="plain-walk share mixed into the doob proposal")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="siltlab", description="Local times, intersection tails and scenery sums of lattice walks.")
    ap.add_argument("--version", action="version", version=f"siltlab {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="one walk: local-time field and intersection counts")
    _common(p)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--stream", type=int, default=0)
    p.add_argument("--max-positions", type=int, default=10_000_001)

    p = sub.add_parser("gamma", help="truncated Green's function and gamma_d")
    _common(p)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--box", type=int, default=30)
    p.add_argument("--horizon", type=int, default=2000)
    p.add_argument("--table", action="store_true", help="also write the full reduced table")

    p = sub.add_parser("tail", help="tail of the self-intersection excess")
    _common(p, samples=10_000)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--n", type=int, nargs="+", required=True)
    p.add_argument("--xi", type=float, nargs="+", required=True)
    p.add_argument("--method", choices=["naive", "importance"], default="importance")
    p.add_argument("--center", type=float, default=None)
    p.add_argument("--pilot-samples", type=int, default=None)
    _proposal_flags(p)

    p = sub.add_parser("certificate", help="forced-scenario lower bound")
    _common(p)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--n", type=int, nargs="+", required=True)
    p.add_argument("--xi", type=float, nargs="+", required=True)
    p.add_argument("--pilot-samples", type=int, default=2000)

    p = sub.add_parser("rate-scan", help="estimator over an (n, xi) grid plus rate fit")
    _common(p, samples=4000)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--n", type=int, nargs="+", required=True)
    p.add_argument("--xi", type=float, nargs="+", required=True)
    p.add_argument("--method", choices=["naive", "importance", "certificate"], default="importance")
    p.add_argument("--tol", type=float, default=0.1)
    _proposal_flags(p)

    p = sub.add_parser("clusters", help="L-cluster partition, transform and iteration")
    _common(p)
    p.add_argument("--points", help="JSON file with a list of points")
    p.add_argument("--random", type=int, default=None, help="draw this many random points instead")
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--coord-max", type=int, default=1_000_000)
    p.add_argument("--L", type=int, required=True)

    p = sub.add_parser("frobenius", help="dominance-respecting bijection of binary words")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--verify", action="store_true")

    p = sub.add_parser("surgery-audit", help="pre-image audit of the loop surgery")
    _common(p)
    p.add_argument("--cluster-size", type=int, default=1)
    p.add_argument("--outside", type=int, default=1)
    p.add_argument("--max-length", type=int, default=6)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--max-family", type=int, default=2_000_000)

    p = sub.add_parser("mutual", help="mutual intersection functional of two walks")
    _common(p, samples=100)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--q", type=float, default=2.0)
    p.add_argument("--filter-eps", type=float, default=None)

    p = sub.add_parser("rwrs", help="random walk in random scenery")
    _common(p, samples=1000)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--c-alpha", type=float, default=1.0)
    p.add_argument("--xi", type=float, default=1.0)
    p.add_argument("--n", type=int, nargs="*", default=[])
    p.add_argument("--sampler", choices=["naive", "importance"], default="importance")
    p.add_argument("--gamma-x", type=float, nargs="*", default=[])
    return ap


# ---------------------------------------------------------------------------
# config files


def read_config(path: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed)."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("_", "-")] = v.strip()
    return out


def _actions(sub: argparse.ArgumentParser) -> dict:
    return {a.option_strings[0][2:]: a for a in sub._actions if a.option_strings and a.option_strings[0].startswith("--")}


def config_tokens(sub: argparse.ArgumentParser, cfg: dict) -> list[str]:
    acts = _actions(sub)
    toks = []
    for k, v in cfg.items():
        if k in ("config", "command"):
            continue
        if k not in acts:
            raise BadFlag(f"unknown config key {k!r}")
        a = acts[k]
        if isinstance(a, argparse._StoreTrueAction):
            if v.lower() in ("1", "true", "yes", "on"):
                toks.append(f"--{k}")
            elif v.lower() not in ("0", "false", "no", "off"):
                raise InvalidConfig(f"config key {k!r} expects a boolean")
        elif a.nargs in ("+", "*"):
            toks += [f"--{k}"] + v.replace(",", " ").split()
        else:
            toks += [f"--{k}", v]
    return toks


def config_text(ns: argparse.Namespace) -> str:
    """File form of a parsed namespace; reading it back yields the same values."""
    lines = [f"command = {ns.command}"]
    for k, v in sorted(vars(ns).items()):
        if k in ("command", "config") or v is None or v is False:
            continue
        key = k.replace("_", "-")
        if v is True:
            v = "true"
        elif isinstance(v, (list, tuple)):
            if not v:
                continue
            v = " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def _config_path(argv: list[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse(argv: Sequence[str]) -> argparse.Namespace:
    ap = build_parser()
    argv = list(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    if command is None:
        ap.parse_args(argv)  # handles --help and --version
        raise BadFlag("missing subcommand")
    path = _config_path(argv)
    if path is not None and command in COMMANDS:
        sub = ap._subparsers._group_actions[0].choices[command]
        cfg = read_config(path)
        if cfg.get("command", command) != command:
            raise InvalidConfig(f"config is for {cfg['command']!r}, not {command!r}")
        i = argv.index(command)
        argv = argv[: i + 1] + config_tokens(sub, cfg) + argv[i + 1 :]
    return ap.parse_args(argv)


# ---------------------------------------------------------------------------
# helpers


def _visit_cap(raw, n: int):
    if raw is None or str(raw).lower() == "none":
        return None
    if str(raw).lower() == "sqrt":
        return max(1, math.ceil(math.sqrt(n)))
    try:
        return int(raw)
    except ValueError:
        raise InvalidConfig(f"visit cap must be an integer, 'sqrt' or 'none', got {raw!r}") from None


def _proposal(ns, n: int):
    from .rare_events import Proposal

    return Proposal(q_stay=ns.q_stay, alpha=ns.tilt_alpha, tilted_steps=ns.tilted_steps,
                    visit_cap=_visit_cap(ns.visit_cap, n), kind=ns.proposal, defensive=ns.defensive)


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _check_positive(**vals):
    for k, v in vals.items():
        if v is None:
            continue
        seq = v if isinstance(v, (list, tuple)) else [v]
        if any(x < 1 for x in seq):
            raise InvalidConfig(f"{k} must be >= 1")


# ---------------------------------------------------------------------------
# subcommands; each returns {filename: text} and a summary dict


def cmd_simulate(ns):
    from .local_time import accumulate, intersection_stats
    from .walk_core import WalkConfig, simulate

    _check_positive(dim=ns.dim)
    if ns.n < 0:
        raise InvalidConfig("n must be nonnegative")
    path = simulate(WalkConfig(ns.dim, ns.n, ns.seed, ns.stream), max_positions=ns.max_positions)
    f = accumulate(path)
    st = intersection_stats(f)
    summary = {"d": ns.dim, "n": ns.n, "B_n": st.b_n, "norm2_sq": st.norm2_sq, "sites": len(f),
               "identity_ok": st.norm2_sq == 2 * st.b_n + ns.n}
    return {"local_time.csv": f.to_csv(), "summary.json": _dump(summary)}, summary


def cmd_gamma(ns):
    from .potential import green_truncated, sum_green_sq

    t = green_truncated(ns.dim, ns.box, ns.horizon)
    row = {"d": ns.dim, "R": ns.box, "N": ns.horizon, "G0": t.g0, "gamma_hat": t.gamma_d,
           "tail_gap": t.tail_gap, "escaped_mass": t.escaped_mass,
           "sum_G_sq": sum_green_sq(t) if ns.dim >= 5 else None}
    keys = list(row)
    files = {"gamma.csv": _table(keys, [[row[k] if row[k] is not None else "" for k in keys]])}
    if ns.table:
        files["green_table.csv"] = t.to_csv()
    return files, row


def cmd_tail(ns):
    from .rare_events import estimates_to_csv, importance_tail, naive_tail

    _check_positive(dim=ns.dim, n=ns.n, samples=ns.samples)
    rows = []
    for n in ns.n:
        if ns.method == "naive":
            rows += naive_tail(ns.dim, n, list(ns.xi), ns.samples, ns.seed, ns.center, ns.pilot_samples, ns.workers)
        else:
            rows += importance_tail(ns.dim, n, list(ns.xi), _proposal(ns, n), ns.samples, ns.seed,
                                    ns.center, ns.pilot_samples, ns.workers)
    return {"tail.csv": estimates_to_csv(rows, ["center", "hits"])}, {"rows": len(rows)}


def cmd_certificate(ns):
    from .rare_events import certificate_lower_bound, certificate_rate_bound, estimates_to_csv

    _check_positive(dim=ns.dim, n=ns.n, pilot_samples=ns.pilot_samples)
    rows = []
    for n in ns.n:
        for xi in ns.xi:
            e = certificate_lower_bound(ns.dim, n, xi, ns.pilot_samples, ns.seed, workers=ns.workers)
            e.extra["rate_bound"] = certificate_rate_bound(e)
            rows.append(e)
    return {"certificate.csv": estimates_to_csv(rows, ["r", "hits", "rate_bound"])}, {"rows": len(rows)}


def cmd_rate_scan(ns):
    from .rare_events import estimates_to_csv, fit_rate, rate_scan

    _check_positive(dim=ns.dim, n=ns.n, samples=ns.samples)
    if ns.method == "importance":
        # the proposal may depend on n (visit cap), so scan one n at a time
        ests = []
        for n in ns.n:
            ests += rate_scan(ns.dim, ns.xi, [n], "importance", ns.samples, ns.seed, _proposal(ns, n), ns.tol, ns.workers)[0]
        fit = fit_rate(ests, ns.dim, ns.tol)
    else:
        ests, fit = rate_scan(ns.dim, ns.xi, ns.n, ns.method, ns.samples, ns.seed, None, ns.tol, ns.workers)
    fit_obj = {"d": fit.d, "slope": fit.slope, "affine_slope": fit.affine_slope,
               "affine_intercept": fit.affine_intercept, "bracket_ok": fit.bracket_ok, "tol": fit.tol,
               "points": fit.rows()}
    return {"rate_scan.csv": estimates_to_csv(ests, ["center", "hits"]), "rate_fit.json": _dump(fit_obj)}, \
        {"slope": fit.slope, "bracket_ok": fit.bracket_ok}


def cmd_clusters(ns):
    from .clusters import check_transform, iterate_to_single, partition, transform

    if ns.points:
        try:
            pts = json.loads(Path(ns.points).read_text())
        except (OSError, ValueError) as exc:
            raise InvalidConfig(f"cannot read points: {exc}") from None
    elif ns.random is not None:
        _check_positive(random=ns.random, dim=ns.dim)
        rng = np.random.default_rng(ns.seed)
        pts = rng.integers(-ns.coord_max, ns.coord_max + 1, size=(ns.random, ns.dim)).tolist()
    else:
        raise InvalidConfig("give --points or --random")
    part = partition(pts, ns.L)
    moved, rec = transform(part)
    check = check_transform(part, moved, rec).__dict__ if not rec.empty else None
    final, log = iterate_to_single(pts, ns.L)
    out = {
        "partition": json.loads(part.to_json()),
        "diameters": part.diameters(),
        "separation_violations": part.separation_violations(),
        "diameter_bound": part.diameter_bound(),
        "transform": rec.to_dict(),
        "transform_check": check,
        "iteration": {"steps": [r.to_dict() for r in log.steps], "cluster_counts": log.cluster_counts,
                      "final": [list(p) for p in final]},
    }
    return {"clusters.json": _dump(out)}, {"clusters": len(part.clusters), "iterations": log.iterations}


def cmd_frobenius(ns):
    from .circuits import dominance_degrees, frobenius_matching

    if ns.n < ns.m or ns.m < 0:
        raise InvalidConfig("need n >= m >= 0")
    phi = frobenius_matching(ns.n, ns.m)
    files = {"frobenius.csv": phi.to_csv()}
    summary = {"n": ns.n, "m": ns.m, "size": len(phi.table)}
    if ns.verify:
        rep = phi.verify()
        ldeg, rdeg = dominance_degrees(ns.n, ns.m)
        rep["left_degrees"] = sorted(ldeg)
        rep["right_degrees"] = sorted(rdeg)
        rep["expected_degree"] = math.comb(ns.n, ns.m)
        rep["regular"] = ldeg == rdeg == {math.comb(ns.n, ns.m)}
        files["frobenius_verify.json"] = _dump(rep)
        summary.update(rep)
    return files, summary


def cmd_surgery_audit(ns):
    from .circuits import SurgeryFamily, preimage_audit

    _check_positive(cluster_size=ns.cluster_size, max_length=ns.max_length, dim=ns.dim)
    if ns.outside < 0:
        raise InvalidConfig("outside must be nonnegative")
    d = ns.dim
    e = lambda i, s: tuple(s if j == i else 0 for j in range(d))
    cluster = [e(0, k) for k in range(ns.cluster_size)]
    u = e(0, 10 * ns.cluster_size)
    outside = [e(min(1, d - 1), -10 * (j + 1) * ns.cluster_size) for j in range(ns.outside)]
    fam = SurgeryFamily(tuple(cluster), u, tuple(outside))
    rows = []
    total = {"family_size": 0, "bound_violations": 0}
    for length in range(1, ns.max_length + 1):
        rep = preimage_audit(fam.words(length), fam.f, fam.bound, ns.max_family)
        rows.append([length, rep.family_size, rep.images, rep.max_preimages, rep.bound_violations])
        total["family_size"] += rep.family_size
        total["bound_violations"] += rep.bound_violations
    files = {"surgery_audit.csv": _table(["length", "family_size", "images", "max_preimages", "bound_violations"], rows)}
    return files, total


def cmd_mutual(ns):
    from .rare_events import zeta_q

    _check_positive(dim=ns.dim, T=ns.T, samples=ns.samples)
    stats = zeta_q(ns.dim, ns.q, ns.T, ns.samples, ns.seed, ns.filter_eps, ns.workers)
    rows = [[i, s.q, s.T, s.zeta_value, "" if s.filtered is None else s.filtered,
             "" if s.filter_threshold is None else s.filter_threshold] for i, s in enumerate(stats)]
    vals = np.array([s.zeta_value for s in stats])
    summary = {"mean": float(vals.mean()), "stderr": float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None}
    return {"mutual.csv": _table(["replica", "q", "T", "zeta", "filtered", "threshold"], rows)}, summary


def cmd_rwrs(ns):
    from .rare_events import estimates_to_csv
    from .rwrs import SceneryConfig, exponent_table, log_laplace_grid, md_scan

    params = exponent_table(ns.alpha, ns.beta, ns.dim)
    scen = SceneryConfig(ns.alpha, ns.c_alpha, ns.seed)
    files = {"rwrs_params.json": _dump({k: float(v) if not isinstance(v, bool) else v
                                        for k, v in params.__dict__.items()})}
    if ns.gamma_x:
        g = log_laplace_grid(scen, ns.gamma_x)
        files["log_laplace.csv"] = _table(["x", "gamma", "abs_error"], zip(g.xs.tolist(), g.values.tolist(), g.errors.tolist()))
    if ns.n:
        _check_positive(n=ns.n, samples=ns.samples)
        ests = md_scan(params, ns.xi, ns.n, ns.samples, ns.sampler, scen, ns.seed, workers=ns.workers)
        files["rwrs.csv"] = estimates_to_csv(ests, ["alpha", "beta", "zeta", "high_part", "mid_part", "low_part"])
    return files, {"region_ii": params.region_ii, "zeta": float(params.zeta)}


COMMANDS = {
    "simulate": cmd_simulate,
    "gamma": cmd_gamma,
    "tail": cmd_tail,
    "certificate": cmd_certificate,
    "rate-scan": cmd_rate_scan,
    "clusters": cmd_clusters,
    "frobenius": cmd_frobenius,
    "surgery-audit": cmd_surgery_audit,
    "mutual": cmd_mutual,
    "rwrs": cmd_rwrs,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        ns = parse(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except BadFlag as exc:
        return _fail("bad-flag", str(exc), EXIT_BAD_FLAG)
    except SiltlabError as exc:
        return _fail(exc.kind, str(exc), exc.exit_code)
    t0 = time.perf_counter()
    try:
        files, summary = COMMANDS[ns.command](ns)
    except SiltlabError as exc:
        return _fail(exc.kind, str(exc), exc.exit_code)
    wall = time.perf_counter() - t0
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "command": ns.command,
        "config": {k: v for k, v in sorted(vars(ns).items()) if k != "config"},
        "config_text": config_text(ns),
        "seed": ns.seed,
        "samples": getattr(ns, "samples", None),
        "outputs": sorted(files),
        "versions": {"siltlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "workers_env": os.environ.get("SILTLAB_THREADS"),
        "wall_time_s": wall,
        "summary": summary,
    }
    (out / "manifest.json").write_text(_dump(manifest))
    sys.stdout.write(json.dumps(summary, sort_keys=True, default=_json_default) + "\n")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
