"""Acceptance gate: one test per numbered criterion, each logging a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from hypoldp.cli import main
from hypoldp.excitation import (build_ktau, certify_nondegenerate, directional_excitation,
                                initial_tau, perturb)
from hypoldp.fixtures import load_fixture
from hypoldp.montecarlo import SimConfig, ldp_verify
from hypoldp.ratefn import EndpointConstraint, RateOptions, minimize_energy
from hypoldp.roughpath import (chen_combine, dilate, homogeneous_norm, lift_piecewise_linear,
                               young_translate)
from hypoldp.skeleton import (CMPath, cm_norm, concat, covariance, endpoint, frechet_derivative,
                              qw_path, reparametrize, reverse, solve_skeleton)
from hypoldp.vectorfields import estimate_constants, hormander_degree

FIXTURES = ("elliptic", "heisenberg", "grushin", "engel", "counterexample")
HYPO = ("heisenberg", "grushin", "engel")
LDP_EPS = (0.7, 0.5, 0.35, 0.25)
GRUSHIN_TARGET = (0.5, 0.3)


def record(log, k, title, checks):
    """checks: list of (label, ok, detail). Logs one line and returns overall status."""
    ok = all(c[1] for c in checks)
    details = "; ".join(f"{lab}={'ok' if good else 'FAIL'} ({det})" for lab, good, det in checks)
    line = f"criterion {k:2d} {'PASS' if ok else 'FAIL'}: {title} | {details}"
    log[k] = line
    print(line)
    return ok


def read_csv(path):
    rows = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    header = rows[0].split(",")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    return {h: data[:, i] for i, h in enumerate(header)}


def random_control(rng, d, K=8, scale=0.7):
    return CMPath.uniform(scale * rng.standard_normal((K, d)))


# ----------------------------------------------------------------------------- 1

def sig_equal(a, b, digits=12):
    return abs(a - b) <= 0.5 * 10.0 ** (1 - digits) * abs(b)


def test_criterion_01_counterexample(tmp_path, acceptance_log):
    t0 = time.perf_counter()
    out = tmp_path / "ce.csv"
    rc = main(["counterexample", "--eps", "1.0", "--x2", "0,1", "--paths", "1000000",
               "--level", "8", "--seed", "2024", "--out", str(out)])
    runtime = time.perf_counter() - t0
    tab = read_csv(out)
    target0 = math.sqrt(3) / math.pi
    target1 = math.sqrt(3) / math.pi * math.exp(-1 / 6)
    p0, p1 = (float(v) for v in tab["p"])
    ph, se = tab["p_hat"], tab["stderr"]
    mono_eps = (1.0, 0.7, 0.5, 0.35)
    mono_out = tmp_path / "mono.csv"
    main(["counterexample", "--eps", ",".join(map(str, mono_eps)), "--x2", "1",
          "--out", str(mono_out)])
    e2 = read_csv(mono_out)["eps2_log_p"]
    checks = [
        ("closed form x2=0", rc == 0 and sig_equal(p0, target0), f"{p0!r} vs {target0!r}"),
        ("closed form x2=1", sig_equal(p1, target1), f"{p1!r} vs {target1!r}"),
        ("MC x2=0 within 3 se", abs(ph[0] - target0) <= 3 * se[0],
         f"{ph[0]:.6g} +- {se[0]:.2g}"),
        ("MC x2=1 within 3 se", abs(ph[1] - target1) <= 3 * se[1],
         f"{ph[1]:.6g} +- {se[1]:.2g} vs {target1:.6g}; density formula gives {p1:.6g}"),
        ("eps^2 log p strictly decreasing", bool(np.all(np.diff(e2) < 0)),
         ", ".join(f"{v:.4g}" for v in e2)),
        ("runtime < 120 s", runtime < 120, f"{runtime:.1f} s"),
    ]
    assert record(acceptance_log, 1, "counterexample exactness", checks)


# ----------------------------------------------------------------------------- 2, 3, 4

def test_criterion_02_pinned_bm_rate(acceptance_log):
    t0 = time.perf_counter()
    res = minimize_energy(load_fixture("elliptic"), EndpointConstraint([0.0, 0.0], [1.0, 2.0]))
    runtime = time.perf_counter() - t0
    dev = float(np.max(np.abs(res.h_star.slopes - [1.0, 2.0])))
    checks = [
        ("energy 2.5 +- 1e-6", abs(res.energy - 2.5) <= 1e-6, f"{res.energy!r}"),
        ("slope deviation < 1e-4", dev < 1e-4, f"{dev:.3g}"),
        ("runtime < 10 s", runtime < 10, f"{runtime:.1f} s"),
    ]
    assert record(acceptance_log, 2, "pinned Brownian motion rate", checks)


def test_criterion_03_heisenberg_horizontal(acceptance_log):
    res = minimize_energy(load_fixture("heisenberg"),
                          EndpointConstraint(np.zeros(3), [1.0, 0.0, 0.0]))
    checks = [("energy 0.5 +- 1e-4", abs(res.energy - 0.5) <= 1e-4 and res.converged,
               f"{res.energy!r}")]
    assert record(acceptance_log, 3, "Heisenberg horizontal target", checks)


def test_criterion_04_heisenberg_vertical(acceptance_log):
    sys = load_fixture("heisenberg")
    con = EndpointConstraint(np.zeros(3), [0.0, 0.0, 0.25])
    t0 = time.perf_counter()
    res = minimize_energy(sys, con)
    oracle = minimize_energy(sys, con, RateOptions(segments=640, restarts=200,
                                                   excitation_seeds=0, substeps=1))
    runtime = time.perf_counter() - t0
    rel = abs(res.energy - oracle.energy) / oracle.energy
    checks = [
        ("within 2% of brute force", rel <= 0.02 and res.converged and oracle.converged,
         f"{res.energy:.8g} vs {oracle.energy:.8g} (rel {rel:.2g}); "
         f"isoperimetric value {2 * math.pi * 0.25:.8g}"),
        ("runtime < 300 s", runtime < 300, f"{runtime:.1f} s"),
    ]
    assert record(acceptance_log, 4, "Heisenberg vertical target", checks)


# ----------------------------------------------------------------------------- 5, 6

def test_criterion_05_excitation_certificate(acceptance_log):
    checks = []
    for name in HYPO:
        sys = load_fixture(name)
        x0 = np.zeros(sys.n)
        cert = estimate_constants(sys, hormander_degree(sys, x0))
        h = CMPath.uniform(np.zeros((8, sys.d)))
        res = certify_nondegenerate(sys, x0, h, cert=cert)
        tau0 = initial_tau(cert)
        dists = []
        for j in range(4):
            k, _ = build_ktau(cert, tau0 / 2 ** j, sys.d)
            dists.append(cm_norm(perturb(h, k) - h)[1])
        ok = (res.before.min_eig < 1e-12 and res.report.min_eig > res.floor
              and res.endpoint_shift < 1e-8 and all(a > b for a, b in zip(dists, dists[1:])))
        checks.append((name, ok, f"min_eig {res.before.min_eig:.2g} -> {res.report.min_eig:.3g} "
                                 f"(floor {res.floor:.2g}), shift {res.endpoint_shift:.2g}, "
                                 f"|h^b-h| {', '.join(f'{v:.3g}' for v in dists)}"))
    assert record(acceptance_log, 5, "excitation certificate", checks)


def test_criterion_06_induction_bound(acceptance_log):
    rng = np.random.default_rng(6)
    checks = []
    for name in HYPO:
        sys = load_fixture(name)
        cert = estimate_constants(sys, hormander_degree(sys, np.zeros(sys.n)))
        tau = initial_tau(cert)
        ratios = []
        for _ in range(100):
            v = rng.standard_normal(sys.n)
            r = directional_excitation(sys, cert, v / np.linalg.norm(v), tau)
            ratios.append(r.value / r.bound)
        checks.append((name, min(ratios) >= 1.0,
                       f"N={cert.degree}, min value/bound {min(ratios):.4g}"))
    assert record(acceptance_log, 6, "directional induction bound", checks)


# ----------------------------------------------------------------------------- 7, 8, 9

def test_criterion_07_covariance_identity(acceptance_log):
    rng = np.random.default_rng(7)
    checks = []
    for name in FIXTURES:
        sys = load_fixture(name)
        worst = 0.0
        for _ in range(20):
            traj = solve_skeleton(sys, 0.2 * rng.standard_normal(sys.n),
                                  random_control(rng, sys.d))
            C = covariance(sys, traj).C
            v = rng.standard_normal(sys.n)
            dt = np.diff(traj.grid)
            total = 0.0
            for V in sys.fields:
                q = qw_path(sys, traj, V) @ v
                total += float(np.sum(0.5 * dt * (q[1:] ** 2 + q[:-1] ** 2)))
            vCv = float(v @ C @ v)
            worst = max(worst, abs(vCv - total) / (1e-9 * (1 + abs(vCv))))
        checks.append((name, worst <= 1.0, f"worst error / tolerance {worst:.2g}"))
    assert record(acceptance_log, 7, "covariance identity", checks)


def test_criterion_08_skeleton_structure(acceptance_log):
    rng = np.random.default_rng(8)
    checks = []
    for name in FIXTURES:
        sys = load_fixture(name)
        rt = inv = rep = 0.0
        for _ in range(5):
            x0 = 0.2 * rng.standard_normal(sys.n)
            h = random_control(rng, sys.d)
            trip = solve_skeleton(sys, x0, concat(h, reverse(h)))
            n = sys.n
            rt = max(rt, np.max(np.abs(trip.end - x0)), np.max(np.abs(trip.J[-1] - np.eye(n))),
                     np.max(np.abs(trip.Kinv[-1] - np.eye(n))))
            inv = max(inv, trip.inverse_defect())
            for horizon in (0.5, 2.0):
                rep = max(rep, np.max(np.abs(endpoint(sys, x0, reparametrize(h, horizon))
                                             - endpoint(sys, x0, h))))
        ok = rt <= 1e-8 and inv <= 1e-8 and rep <= 1e-8
        checks.append((name, ok, f"round trip {rt:.2g}, J Kinv - I {inv:.2g}, "
                                 f"reparametrised {rep:.2g}"))
    assert record(acceptance_log, 8, "skeleton structure", checks)


def test_criterion_09_gradient_check(acceptance_log):
    rng = np.random.default_rng(9)
    checks = []
    for name in FIXTURES:
        sys = load_fixture(name)
        worst = 0.0
        for _ in range(10):
            x0 = 0.2 * rng.standard_normal(sys.n)
            h = random_control(rng, sys.d)
            k = random_control(rng, sys.d)
            traj = solve_skeleton(sys, x0, h, substeps=64)
            D = frechet_derivative(sys, traj, k)
            e = 1e-5
            fd = (endpoint(sys, x0, h + k.scaled(e), 64)
                  - endpoint(sys, x0, h - k.scaled(e), 64)) / (2 * e)
            worst = max(worst, np.linalg.norm(D - fd) / max(np.linalg.norm(fd), 1e-300))
        checks.append((name, worst <= 1e-5, f"worst relative error {worst:.2g}"))
    assert record(acceptance_log, 9, "Frechet derivative gradient check", checks)


# ----------------------------------------------------------------------------- 10

def test_criterion_10_rough_path_algebra(acceptance_log):
    rng = np.random.default_rng(10)
    X = np.cumsum(rng.standard_normal((65, 2)), axis=0)
    H = np.cumsum(rng.standard_normal((65, 2)), axis=0)
    rp = lift_piecewise_linear(X)
    # Chen: merge segment data left to right and compare with the direct pair data
    I, J, d1, d2 = rp.pair_increments()
    direct = {(i, j): (a, b) for i, j, a, b in zip(I, J, d1, d2)}
    chen = 0.0
    for i in range(0, rp.segments, 7):
        acc = rp.increment(i, i)
        for j in range(i, rp.segments):
            acc = chen_combine(acc, rp.increment(j, j + 1))
            a, b = direct[(i, j + 1)]
            chen = max(chen, np.max(np.abs(acc.level1 - a)), np.max(np.abs(acc.level2 - b)))
    sym = max(rp.symmetric_defect(), young_translate(rp, H).symmetric_defect(),
              dilate(rp, 0.3).symmetric_defect(), rp.coarsen(3).symmetric_defect())
    dil = dilate(rp, 0.37)
    homog = (np.array_equal(dil.level1, 0.37 * rp.level1)
             and np.array_equal(dil.level2, 0.37 ** 2 * rp.level2)
             and abs(homogeneous_norm(dil) - 0.37 * homogeneous_norm(rp))
             <= 1e-12 * homogeneous_norm(rp))
    tr = young_translate(rp, H)
    ref = lift_piecewise_linear(X + H)
    trans = max(np.max(np.abs(tr.level1 - ref.level1)), np.max(np.abs(tr.level2 - ref.level2)))
    circ = []
    for rho in (1.0, 0.5):
        t = np.linspace(0, 1, 2 ** 12 + 1)
        c = lift_piecewise_linear(rho * np.c_[np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)])
        w2 = c.increment(0, c.segments).level2
        area = 0.5 * (w2[0, 1] - w2[1, 0])
        circ.append(abs(area - math.pi * rho ** 2) / (math.pi * rho ** 2))
    checks = [
        ("Chen", chen <= 1e-12, f"{chen:.2g}"),
        ("symmetric part", sym <= 1e-12, f"{sym:.2g}"),
        ("dilation homogeneity", homog, "exact"),
        ("translation = lift of sum", trans <= 1e-12, f"{trans:.2g}"),
        ("circle area k=12", max(circ) <= 1e-6, ", ".join(f"{v:.3g}" for v in circ)),
    ]
    assert record(acceptance_log, 10, "rough-path algebra", checks)


# ----------------------------------------------------------------------------- 11

def ldp_rows(name, target, n_paths, workers=None, seed=3):
    sys = load_fixture(name)
    con = EndpointConstraint(np.zeros(sys.n), target)
    rate = minimize_energy(sys, con, RateOptions(workers=workers))
    cfg = SimConfig(epsilons=LDP_EPS, n_paths=n_paths, steps=8, seed=seed, workers=workers)
    return rate, ldp_verify(sys, np.zeros(sys.n), con, cfg, rate)


def test_criterion_11_ldp_trend(acceptance_log):
    t0 = time.perf_counter()
    g_rate, g_rows = ldp_rows("grushin", GRUSHIN_TARGET, 100_000)
    b_rate, b_rows = ldp_rows("elliptic", (1.0, 2.0), 100_000)
    runtime = time.perf_counter() - t0
    gaps = [r.gap for r in g_rows]
    bm = b_rows[-1].eps2_log_p
    bm_rel = abs(bm - (-2.5)) / 2.5
    checks = [
        ("Grushin gap finite and non-increasing",
         all(math.isfinite(g) for g in gaps) and all(a >= b for a, b in zip(gaps, gaps[1:])),
         f"energy {g_rate.energy:.6g}, gaps " + ", ".join(f"{g:.4g}" for g in gaps)),
        ("pinned BM within 15% at eps=0.25", bm_rel <= 0.15, f"{bm:.5g} vs -2.5"),
        ("runtime < 600 s", runtime < 600, f"{runtime:.1f} s"),
    ]
    assert record(acceptance_log, 11, "small-noise LDP trend", checks)


# ----------------------------------------------------------------------------- 12

def test_criterion_12_determinism(tmp_path, acceptance_log):
    outputs = {}
    for w in (1, 2, 4):
        ce = tmp_path / f"ce{w}.csv"
        main(["counterexample", "--eps", "1.0,0.7", "--x2", "0,1", "--paths", "30000",
              "--level", "8", "--seed", "2024", "--workers", str(w), "--out", str(ce)])
        outs = [ce.read_text()]
        for name, target in (("grushin", GRUSHIN_TARGET), ("elliptic", (1.0, 2.0))):
            f = tmp_path / f"{name}{w}.csv"
            main(["verify-ldp", "--system", name, "--from", "0,0",
                  "--to", ",".join(map(str, target)), "--eps", ",".join(map(str, LDP_EPS)),
                  "--paths", "20000", "--level", "8", "--seed", "3", "--workers", str(w),
                  "--out", str(f)])
            outs.append(f.read_text())
        outputs[w] = outs
    same = [outputs[1][i] == outputs[w][i] for w in (2, 4) for i in range(3)]
    checks = [("byte-identical CSV for 1, 2, 4 workers", all(same) and len(outputs[1][1]) > 0,
               f"{sum(same)}/{len(same)} identical")]
    assert record(acceptance_log, 12, "determinism across worker counts", checks)
