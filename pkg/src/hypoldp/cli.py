"""Command-line entry point: ``hypoldp <subcommand> ...``.

Exit status is 0 on success, 1 when the computation itself fails (no
convergence, degree cap reached, excitation not certified) and 2 for usage
errors, including malformed system files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .excitation import (ExcitationError, certify_nondegenerate, directional_excitation,
                         initial_tau)
from .fixtures import NAMES, load_fixture
from .montecarlo import (DensityError, LDPRow, SimConfig, config_hash, counterexample_exact,
                         estimate_density, ldp_verify, simulate_endpoints)
from .ratefn import EndpointConstraint, RateOptions, minimize_energy
from .roughpath import BesovParams, homogeneous_norm, lift_piecewise_linear
from .skeleton import CMPath, coordinate_projector
from .vectorfields import (HormanderError, SystemFormatError, estimate_constants,
                           hormander_degree, load_system)

__all__ = ["main", "build_parser", "fmt"]


class UsageError(ValueError):
    pass


class DomainFailure(RuntimeError):
    pass


def fmt(x) -> str:
    """Round-trip decimal text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")], dtype=float)
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def _floats(text: str, name: str) -> list[float]:
    return [float(v) for v in _vector(text, name)]


def _load(name: str):
    if name in NAMES:
        return load_fixture(name)
    p = Path(name)
    if not p.exists():
        raise UsageError(f"--system: {name!r} is neither a fixture ({', '.join(NAMES)}) "
                         "nor an existing file")
    return load_system(p)


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _emit_json(doc: dict, out: str | None) -> None:
    text = json.dumps(_json_ready(doc), indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows, meta: dict | None = None) -> str:
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _emit_csv(header, rows, out: str | None, meta: dict | None = None) -> None:
    text = _csv_text(header, rows, meta)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _constraint(sysm, args) -> EndpointConstraint:
    x0 = _vector(args.start, "--from")
    if x0.size != sysm.n:
        raise UsageError(f"--from: expected {sysm.n} coordinates")
    if args.project is not None:
        if args.target is None:
            raise UsageError("--project needs --target")
        dims = [int(v) for v in _vector(args.project, "--project")]
        if any(not 0 <= k < sysm.n for k in dims):
            raise UsageError(f"--project: indices must lie in 0..{sysm.n - 1}")
        a = _vector(args.target, "--target")
        if a.size != len(dims):
            raise UsageError("--target must have one value per projected coordinate")
        return EndpointConstraint(x0, a, coordinate_projector(sysm.n, dims))
    if args.end is None:
        raise UsageError("give --to, or --project with --target")
    x1 = _vector(args.end, "--to")
    if x1.size != sysm.n:
        raise UsageError(f"--to: expected {sysm.n} coordinates")
    return EndpointConstraint(x0, x1)


def _meta(args, cfg: dict) -> dict:
    return {"seed": args.seed, "config_hash": config_hash(cfg), "version": __version__}


# ----------------------------------------------------------------------------- subcommands

def cmd_brackets(args) -> int:
    sysm = _load(args.system)
    x = _vector(args.at, "--at")
    if x.size != sysm.n:
        raise UsageError(f"--at: expected {sysm.n} coordinates")
    try:
        cert = hormander_degree(sysm, x, kmax=args.kmax)
    except HormanderError as exc:
        raise DomainFailure(str(exc)) from exc
    if args.constants:
        cert = estimate_constants(sysm, cert)
    _emit_json(cert.to_dict(), args.out)
    return 0


def _rate_options(args) -> RateOptions:
    return RateOptions(segments=args.segments, restarts=args.restarts, seed=args.seed,
                       workers=args.workers)


def cmd_rate(args) -> int:
    sysm = _load(args.system)
    con = _constraint(sysm, args)
    res = minimize_energy(sysm, con, _rate_options(args))
    doc = res.to_dict()
    doc.update(seed=args.seed, version=__version__)
    _emit_json(doc, args.out)
    if args.csv:
        h = res.h_star
        vals = h.values()
        rows = [[t, *v] for t, v in zip(h.grid, vals)]
        header = ["t"] + [f"h{i + 1}" for i in range(h.d)]
        _emit_csv(header, rows, args.csv)
    if not res.converged:
        raise DomainFailure(f"endpoint residual {res.residual:.3g} above tolerance")
    return 0


def cmd_excite(args) -> int:
    sysm = _load(args.system)
    x = _vector(args.at, "--at")
    if x.size != sysm.n:
        raise UsageError(f"--at: expected {sysm.n} coordinates")
    try:
        cert = estimate_constants(sysm, hormander_degree(sysm, x))
    except HormanderError as exc:
        raise DomainFailure(str(exc)) from exc
    tau = initial_tau(cert) if args.tau is None else args.tau
    h = CMPath.uniform(np.zeros((args.segments, sysm.d)), 1.0)
    try:
        res = certify_nondegenerate(sysm, x, h, tau=tau, cert=cert)
    except ExcitationError as exc:
        raise DomainFailure(str(exc)) from exc
    bounds = []
    if cert.degree >= 2 and res.schedule is not None:
        rng = np.random.default_rng(args.seed)
        tau_used = res.schedule.tau
        for _ in range(args.directions):
            v = rng.standard_normal(sysm.n)
            dr = directional_excitation(sysm, cert, v / np.linalg.norm(v), tau_used)
            bounds.append({"v": v / np.linalg.norm(v), "value": dr.value, "bound": dr.bound,
                           "word": str(dr.word), "achieved": dr.achieved})
    doc = {
        "certificate": cert.to_dict(),
        "schedule": None if res.schedule is None else res.schedule.to_dict(),
        "beta": None if res.schedule is None else res.schedule.beta,
        "attempts": res.attempts,
        "eigenvalues_before": res.before.eigenvalues,
        "eigenvalues_after": res.report.eigenvalues,
        "min_eig_before": res.before.min_eig,
        "min_eig_after": res.report.min_eig,
        "floor": res.floor,
        "endpoint_shift": res.endpoint_shift,
        "certified": res.certified,
        "directional": bounds,
        "seed": args.seed,
        "version": __version__,
    }
    _emit_json(doc, args.out)
    if not res.certified:
        raise DomainFailure("covariance still degenerate after the allowed tau halvings")
    if any(not b["achieved"] for b in bounds):
        raise DomainFailure("a directional excitation fell below its bound")
    return 0


def _read_path_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError:
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, skiprows=1)
    if data.shape[1] < 2:
        raise UsageError(f"{path}: expected columns t,x1,...,xd")
    return data[:, 0], data[:, 1:]


def cmd_lift(args) -> int:
    p = Path(args.input)
    if not p.exists():
        raise UsageError(f"--input: {args.input!r} does not exist")
    t, x = _read_path_csv(args.input)
    try:
        params = BesovParams(args.alpha, args.m)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        rp = lift_piecewise_linear(x, grid=t)
    except ValueError as exc:
        raise UsageError(f"{args.input}: {exc}") from exc
    if args.level is not None:
        if rp.level is None or args.level > rp.level:
            raise UsageError(f"--level {args.level} is finer than the input grid")
        rp = rp.coarsen(args.level)
    K, d = rp.segments, rp.d
    rows = []
    for i in range(K):
        l1 = rp.level1[i]
        l2 = rp.level2[i]
        rows.append([rp.grid[i], rp.grid[i + 1], *l1, *l2.reshape(-1)])
    header = ["s", "t"] + [f"w1_{a + 1}" for a in range(d)] + \
        [f"w2_{a + 1}{b + 1}" for a in range(d) for b in range(d)]
    _emit_csv(header, rows, args.out)
    summary = {"segments": K, "level": rp.level, "alpha": params.alpha, "m": params.m,
               "homogeneous_norm": homogeneous_norm(rp, params),
               "symmetric_defect": rp.symmetric_defect()}
    if args.summary:
        _emit_json(summary, args.summary)
    return 0


def _sim_config(args, eps) -> SimConfig:
    return SimConfig(epsilons=tuple(eps), n_paths=args.paths, steps=args.level, seed=args.seed,
                     bandwidth=args.bandwidth, workers=args.workers,
                     importance=getattr(args, "importance", False))


SIM_COLUMNS = ("epsilon", "p_hat", "stderr", "eps2_log_p", "minus_rate", "gap", "n_effective",
               "blowups")


def cmd_simulate(args) -> int:
    sysm = _load(args.system)
    con = _constraint(sysm, args)
    eps_list = _floats(args.eps, "--eps")
    cfg = _sim_config(args, eps_list)
    minus_rate = -args.energy if args.energy is not None else math.nan
    proj = None if con.projector is None else con.basis
    rows = []
    for eps in eps_list:
        batch = simulate_endpoints(sysm, con.start, eps, cfg.steps, cfg.n_paths, cfg.seed,
                                   block_size=cfg.block_size, workers=cfg.workers)
        try:
            est = estimate_density(batch.endpoints, con.target, proj, cfg.bandwidth,
                                   batch.weights, cfg.batches, eps)
        except DensityError as exc:
            raise DomainFailure(str(exc)) from exc
        e2 = eps ** 2 * math.log(est.p_hat) if est.p_hat > 0 else -math.inf
        rows.append([eps, est.p_hat, est.stderr, e2, minus_rate, abs(e2 - minus_rate),
                     est.n_effective, batch.blowups])
    doc = cfg.to_dict()
    doc.update(system=args.system, start=con.start.tolist(), target=con.target.tolist())
    _emit_csv(SIM_COLUMNS, rows, args.out, _meta(args, doc))
    return 0


def cmd_verify_ldp(args) -> int:
    sysm = _load(args.system)
    con = _constraint(sysm, args)
    eps_list = _floats(args.eps, "--eps")
    rate = minimize_energy(sysm, con, _rate_options(args))
    if not rate.converged:
        raise DomainFailure(f"rate minimisation did not reach the target "
                            f"(residual {rate.residual:.3g})")
    cfg = _sim_config(args, eps_list)
    try:
        rows = ldp_verify(sysm, con.start, con, cfg, rate)
    except DensityError as exc:
        raise DomainFailure(str(exc)) from exc
    doc = cfg.to_dict()
    doc.update(system=args.system, start=con.start.tolist(), target=con.target.tolist(),
               segments=args.segments, restarts=args.restarts)
    meta = _meta(args, doc)
    meta["energy"] = fmt(rate.energy)
    _emit_csv(LDPRow.CSV_COLUMNS, [r.as_row() for r in rows], args.out, meta)
    return 0


CE_COLUMNS = ("epsilon", "x2", "p", "eps2_log_p", "p_printed", "eps2_log_p_printed")


def cmd_counterexample(args) -> int:
    eps_list = _floats(args.eps, "--eps")
    x2_list = _floats(args.x2, "--x2")
    if any(e <= 0 for e in eps_list):
        raise UsageError("--eps values must be positive")
    header = list(CE_COLUMNS)
    meta = None
    if args.paths:
        header += ["p_hat", "stderr"]
        cfg = SimConfig(epsilons=tuple(eps_list), n_paths=args.paths, steps=args.level,
                        seed=args.seed, bandwidth=args.bandwidth, workers=args.workers)
        doc = cfg.to_dict()
        doc.update(x2=x2_list)
        meta = _meta(args, doc)
        sysm = load_fixture("counterexample")
    rows = []
    for eps in eps_list:
        batch = None
        if args.paths:
            batch = simulate_endpoints(sysm, np.zeros(2), eps, args.level, args.paths, args.seed,
                                       workers=args.workers)
        for x2 in x2_list:
            v = counterexample_exact(eps, x2)
            row = [eps, x2, v.p, v.eps2_log_p, v.p_printed, v.eps2_log_p_printed]
            if batch is not None:
                est = estimate_density(batch.endpoints, [0.0, x2], None, args.bandwidth,
                                       batch.weights, 10, eps)
                row += [est.p_hat, est.stderr]
            rows.append(row)
    _emit_csv(header, rows, args.out, meta)
    return 0


# ----------------------------------------------------------------------------- parser

def _add_system(p):
    p.add_argument("--system", required=True,
                   help=f"fixture name ({', '.join(NAMES)}) or path to a system JSON file")


def _add_endpoints(p):
    p.add_argument("--from", dest="start", required=True, help="start point, e.g. 0,0,0")
    p.add_argument("--to", dest="end", help="target endpoint")
    p.add_argument("--project", help="comma-separated 0-based coordinates to constrain")
    p.add_argument("--target", help="values of the projected coordinates")


def _add_rate(p):
    p.add_argument("--segments", type=int, default=64)
    p.add_argument("--restarts", type=int, default=16)


def _add_sim(p, default_paths):
    p.add_argument("--eps", required=True, help="comma-separated noise levels")
    p.add_argument("--paths", type=int, default=default_paths)
    p.add_argument("--level", type=int, default=8, help="dyadic level k (2^k steps)")
    p.add_argument("--bandwidth", type=float, default=1.0, help="kernel bandwidth factor")


def _add_common(p, seed_required=False):
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (default: HYPOLDP_THREADS or all cores)")
    p.add_argument("--out", help="output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypoldp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("brackets", help="Hörmander degree, frame and constants at a point")
    _add_system(p)
    p.add_argument("--at", required=True, help="point, e.g. 0,0,0")
    p.add_argument("--kmax", type=int, default=6)
    p.add_argument("--constants", action="store_true", help="also estimate r, M, L and T")
    p.add_argument("--out")
    p.set_defaults(func=cmd_brackets)

    p = sub.add_parser("rate", help="minimal-energy control reaching a target")
    _add_system(p)
    _add_endpoints(p)
    _add_rate(p)
    _add_common(p)
    p.add_argument("--csv", help="write h* samples here")
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("excite", help="excitation schedule and covariance certificate at h = 0")
    _add_system(p)
    p.add_argument("--at", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--segments", type=int, default=8)
    p.add_argument("--directions", type=int, default=20,
                   help="random unit directions tested against the induction bound")
    _add_common(p)
    p.set_defaults(func=cmd_excite)

    p = sub.add_parser("lift", help="level-2 lift of a sampled path")
    p.add_argument("--input", required=True, help="CSV with columns t,x1,...,xd")
    p.add_argument("--level", type=int, help="coarsen to this dyadic level")
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--out")
    p.add_argument("--summary", help="write norms and defects as JSON here")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("simulate", help="plain Monte Carlo heat-kernel estimate")
    _add_system(p)
    _add_endpoints(p)
    _add_sim(p, 100_000)
    p.add_argument("--energy", type=float, help="reference energy for the gap column")
    _add_common(p, seed_required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-ldp", help="eps^2 log p_hat against the computed rate")
    _add_system(p)
    _add_endpoints(p)
    _add_rate(p)
    _add_sim(p, 100_000)
    p.add_argument("--no-importance", dest="importance", action="store_false",
                   help="sample the unshifted driver")
    _add_common(p, seed_required=True)
    p.set_defaults(func=cmd_verify_ldp)

    p = sub.add_parser("counterexample", help="closed-form density table for the drift example")
    p.add_argument("--eps", default="1.0")
    p.add_argument("--x2", default="0,1")
    p.add_argument("--paths", type=int, default=0, help="also estimate by Monte Carlo")
    p.add_argument("--level", type=int, default=8)
    p.add_argument("--bandwidth", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_counterexample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (UsageError, SystemFormatError) as exc:
        print(f"hypoldp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DomainFailure, HormanderError, ExcitationError, DensityError) as exc:
        print(f"hypoldp {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
