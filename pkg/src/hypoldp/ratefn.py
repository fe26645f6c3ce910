"""Minimal-energy controls: the rate functions of the skeleton endpoint map.

The control is discretised into K uniform segments with constant derivative.
For that discrete problem the objective and its exact gradient come from a
forward RK4 sweep and its reverse (adjoint) sweep.  The endpoint constraint is
handled by an augmented Lagrangian with L-BFGS inner solves, followed by a
short Gauss-Newton feasibility polish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from ._parallel import ordered_map
from .excitation import ExcitationError, build_ktau, initial_tau, perturb
from .skeleton import CMPath, covariance, projector_basis, solve_skeleton
from .vectorfields import (HormanderError, VectorFieldSystem, estimate_constants,
                           hormander_degree)

__all__ = [
    "EndpointConstraint",
    "RateOptions",
    "RateResult",
    "minimize_energy",
    "rate_I1",
    "rate_hat",
    "rate_I2",
    "I2Result",
]


@dataclass(frozen=True)
class EndpointConstraint:
    """phi(1, x, h) = target, or P phi(1, x, h) = a when a projector P is given.

    For the projected form ``target`` holds the coordinates of a in an
    orthonormal basis of range(P); for coordinate projectors these are simply
    the selected coordinates.
    """

    start: np.ndarray
    target: np.ndarray
    projector: np.ndarray | None = None

    def __post_init__(self):
        start = np.asarray(self.start, dtype=float).reshape(-1)
        target = np.asarray(self.target, dtype=float).reshape(-1)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "target", target)
        if self.projector is not None:
            P = np.asarray(self.projector, dtype=float)
            B = projector_basis(P)
            if B.shape[1] != target.size:
                raise ValueError(f"projected target needs {B.shape[1]} coordinates")
            object.__setattr__(self, "projector", P)
        elif target.size != start.size:
            raise ValueError("full target must live in the state space")

    @property
    def basis(self) -> np.ndarray:
        n = self.start.size
        return np.eye(n) if self.projector is None else projector_basis(self.projector)

    @property
    def kind(self) -> str:
        return "full" if self.projector is None else "projected"

    def residual(self, end: np.ndarray) -> np.ndarray:
        return self.basis.T @ end - self.target


@dataclass(frozen=True)
class RateOptions:
    segments: int = 64
    substeps: int = 4
    restarts: int = 16
    excitation_seeds: int = 4
    endpoint_tol: float = 1e-8
    rho0: float = 10.0
    rho_growth: float = 10.0
    outer_iters: int = 6
    inner_gtol: float = 1e-10
    inner_maxiter: int = 3000
    polish_iters: int = 20
    start_scale: float = 1.0
    seed: int = 0
    workers: int | None = None


@dataclass(frozen=True)
class RateResult:
    h_star: CMPath
    energy: float
    residual: float
    min_eig: float
    restarts_used: int
    converged: bool
    endpoint: np.ndarray
    eigenvalues: np.ndarray = field(repr=False, default=None)
    candidate_energies: tuple = field(repr=False, default=())
    candidate_residuals: tuple = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {
            "energy": self.energy,
            "residual": self.residual,
            "min_eig": self.min_eig,
            "eigenvalues": None if self.eigenvalues is None else self.eigenvalues.tolist(),
            "restarts_used": self.restarts_used,
            "converged": self.converged,
            "endpoint": self.endpoint.tolist(),
            "candidate_energies": list(self.candidate_energies),
            "h_star": self.h_star.to_dict(),
        }


@dataclass
class _Problem:
    """Discrete augmented-Lagrangian problem over scaled slopes z = u * sqrt(dt)."""

    sys: VectorFieldSystem
    x0: np.ndarray
    B: np.ndarray
    target: np.ndarray
    dts: np.ndarray
    substeps: int
    track_idx: np.ndarray | None = None
    track_ref: np.ndarray | None = None
    track_w: np.ndarray | None = None

    def __post_init__(self):
        self.exps, self.coefs = self.sys.packed
        self.sq = np.sqrt(self.dts)
        self.d = self.sys.d

    def slopes(self, z):
        return z.reshape(-1, self.d) / self.sq[:, None]

    def forward(self, z):
        u = np.ascontiguousarray(self.slopes(z))
        phi, stages = _kernels.endpoint_forward(self.exps, self.coefs, self.x0, u, self.dts,
                                                self.substeps)
        return u, phi, stages

    def residual(self, z):
        return self.B.T @ self.forward(z)[1][-1] - self.target

    def _back(self, u, stages, gnodes, z):
        ubar, _ = _kernels.endpoint_backprop(self.exps, self.coefs, u, self.dts, self.substeps,
                                             stages, gnodes)
        return (ubar / self.sq[:, None]).reshape(-1)

    def tracking(self, phi):
        if self.track_idx is None:
            return 0.0, None
        diff = phi[:, self.track_idx] - self.track_ref
        return 0.5 * float(np.sum(self.track_w[:, None] * diff * diff)), diff

    def merit(self, z, lam, rho, track_scale=0.0):
        u, phi, stages = self.forward(z)
        c = self.B.T @ phi[-1] - self.target
        f = 0.5 * float(z @ z) + float(lam @ c) + 0.5 * rho * float(c @ c)
        g_nodes = np.zeros_like(phi)
        g_nodes[-1] = self.B @ (lam + rho * c)
        if track_scale > 0.0:
            tval, diff = self.tracking(phi)
            f += track_scale * tval
            g_nodes[:, self.track_idx] += track_scale * self.track_w[:, None] * diff
        if not np.isfinite(f):
            return 1e300, np.zeros_like(z)
        return f, z + self._back(u, stages, g_nodes, z)

    def jacobian(self, z):
        """d residual / dz, shape (l, K d), by one reverse sweep per constraint row."""
        u, phi, stages = self.forward(z)
        rows = []
        for r in range(self.B.shape[1]):
            g_nodes = np.zeros_like(phi)
            g_nodes[-1] = self.B[:, r]
            rows.append(self._back(u, stages, g_nodes, z))
        return np.array(rows), self.B.T @ phi[-1] - self.target


def _restore(prob: _Problem, z, opts: RateOptions, iters: int):
    """Damped minimum-norm Gauss-Newton steps towards the constraint set."""
    Jc, c = prob.jacobian(z)
    for _ in range(iters):
        if not np.all(np.isfinite(c)):
            break
        cn = np.linalg.norm(c)
        if cn <= 0.1 * opts.endpoint_tol:
            break
        step, *_ = np.linalg.lstsq(Jc, c, rcond=1e-12)
        alpha = 1.0
        for _ in range(40):
            trial = z - alpha * step
            ct = prob.residual(trial)
            if np.all(np.isfinite(ct)) and np.linalg.norm(ct) < (1.0 - 1e-4 * alpha) * cn:
                break
            alpha *= 0.5
        else:
            break
        z = trial
        Jc, c = prob.jacobian(z)
    return z


def _multiplier_estimate(prob: _Problem, z):
    """Least-squares multiplier from stationarity z + J^T lam = 0."""
    Jc, _ = prob.jacobian(z)
    lam, *_ = np.linalg.lstsq(Jc.T, -z, rcond=1e-12)
    return lam if np.all(np.isfinite(lam)) else np.zeros(Jc.shape[0])


def _is_degenerate(prob: _Problem, z) -> bool:
    Jc, _ = prob.jacobian(z)
    return bool(np.linalg.svd(Jc, compute_uv=False)[-1] < 1e-5)


def _augmented_lagrangian(prob: _Problem, z0, opts: RateOptions, track_scale=0.0, kick=None,
                          restore: bool = True):
    """Outer multiplier/penalty loop started from a (nearly) feasible control.

    The start is first pulled onto the constraint set and the multiplier is
    initialised by least squares, so the inner solves begin at the KKT basin
    rather than sliding towards h = 0.  Controls at which the constraint
    Jacobian is rank deficient are stationary for every multiplier; when a
    start or an inner solve lands on one while infeasible, it is replaced by
    its excitation-perturbed version and restored again.
    """
    z = np.array(z0, dtype=float)
    kicks = 0

    def reseed(z, kicks):
        if kick is not None and kicks < opts.excitation_seeds and _is_degenerate(prob, z):
            kicked = kick(z, kicks)
            if kicked is not None:
                return kicked, kicks + 1
        return z, kicks

    lam = np.zeros(prob.B.shape[1])
    if restore:
        z, kicks = reseed(z, kicks)
        z = _restore(prob, z, opts, opts.polish_iters * 3)
        lam = _multiplier_estimate(prob, z)
    rho = opts.rho0
    for _ in range(opts.outer_iters):
        res = minimize(prob.merit, z, args=(lam, rho, track_scale), jac=True,
                       method="L-BFGS-B",
                       options={"gtol": opts.inner_gtol, "ftol": 1e-15,
                                "maxiter": opts.inner_maxiter, "maxcor": 20})
        z = res.x
        c = prob.residual(z)
        if not np.all(np.isfinite(c)):
            break
        lam = lam + rho * c
        if np.linalg.norm(c) <= opts.endpoint_tol:
            break
        if restore and np.linalg.norm(c) > 1e-3:
            z_new, kicks_new = reseed(z, kicks)
            if kicks_new > kicks:
                kicks = kicks_new
                z = _restore(prob, z_new, opts, opts.polish_iters * 3)
                lam = _multiplier_estimate(prob, z)
        rho *= opts.rho_growth
    return z


def _polish(prob: _Problem, z, opts: RateOptions):
    return _restore(prob, z, opts, opts.polish_iters)


def _uniform_projection(h: CMPath, grid: np.ndarray) -> np.ndarray:
    """Cell-average slopes of h on ``grid``: the H-orthogonal projection."""
    vals = h(grid)
    return np.diff(vals, axis=0) / np.diff(grid)[:, None]


def _finish(sys, x0, prob, z, opts, constraint_res=None):
    u = prob.slopes(z)
    grid = np.concatenate([[0.0], np.cumsum(prob.dts)])
    grid[-1] = 1.0
    h = CMPath(grid, u)
    end = prob.forward(z)[1][-1]
    resid = float(np.linalg.norm(prob.B.T @ end - prob.target))
    return h, 0.5 * float(z @ z), resid, end


def minimize_energy(sys: VectorFieldSystem, constraint: EndpointConstraint,
                    opts: RateOptions = RateOptions()) -> RateResult:
    """Least-energy control reaching the (projected) target at time 1.

    Random Gaussian starts are followed by excitation-seeded starts, built by
    prepending the excitation path to the best candidate found so far and
    projecting onto the control grid.  The lowest-energy feasible candidate
    wins; ties go to the lower start index.
    """
    x0 = constraint.start
    if x0.size != sys.n:
        raise ValueError("constraint start does not match the system dimension")
    K = opts.segments
    dts = np.full(K, 1.0 / K)
    grid = np.linspace(0.0, 1.0, K + 1)
    prob = _Problem(sys, x0, constraint.basis, constraint.target, dts, opts.substeps)
    rng = np.random.default_rng(opts.seed)
    starts = [opts.start_scale * rng.standard_normal(K * sys.d) for _ in range(opts.restarts)]

    kick = _excitation_kick(sys, x0, prob, grid, opts)

    def run(z0):
        z = _augmented_lagrangian(prob, z0, opts, kick=kick)
        z = _polish(prob, z, opts)
        _, energy, resid, _ = _finish(sys, x0, prob, z, opts)
        return z, energy, resid

    results = ordered_map(run, starts, opts.workers)

    if opts.excitation_seeds > 0:
        seeds = _excitation_starts(sys, x0, prob, results, grid, opts)
        results += ordered_map(run, seeds, opts.workers)

    energies = [r[1] for r in results]
    resids = [r[2] for r in results]
    feasible = [i for i, r in enumerate(resids) if r <= opts.endpoint_tol]
    if feasible:
        best = min(feasible, key=lambda i: (energies[i], i))
    else:
        best = min(range(len(results)), key=lambda i: (resids[i], energies[i], i))
    z = results[best][0]
    h, energy, resid, end = _finish(sys, x0, prob, z, opts)
    traj = solve_skeleton(sys, x0, h, opts.substeps)
    rep = covariance(sys, traj)
    return RateResult(h, energy, resid, rep.min_eig, len(results), bool(feasible), end,
                      rep.eigenvalues, tuple(energies), tuple(resids))


def _certificate(sys, x0):
    try:
        return estimate_constants(sys, hormander_degree(sys, x0))
    except HormanderError:
        return None


def _excitation_kick(sys, x0, prob, grid, opts):
    """z -> scaled slopes of perturb(h(z), k^tau) on the control grid, tau = tau_0 / 2^j."""
    cert = _certificate(sys, x0)
    if cert is None or cert.degree <= 1:
        return None
    tau0 = initial_tau(cert)

    def kick(z, j):
        try:
            ktau, _ = build_ktau(cert, tau0 / 2 ** j, sys.d)
        except ExcitationError:
            return None
        hb = perturb(CMPath(grid, prob.slopes(z)), ktau)
        return (_uniform_projection(hb, grid) * prob.sq[:, None]).reshape(-1)

    return kick


def _excitation_starts(sys, x0, prob, results, grid, opts):
    kick = _excitation_kick(sys, x0, prob, grid, opts)
    if kick is None:
        return []
    order = sorted(range(len(results)), key=lambda i: (results[i][2] > opts.endpoint_tol,
                                                       results[i][1], i))
    z_best = results[order[0]][0]
    seeds = [kick(z_best, j) for j in range(opts.excitation_seeds)]
    return [z for z in seeds if z is not None]


def rate_I1(candidates) -> float:
    """Smallest converged energy among RateResults; inf when none converged."""
    vals = [c.energy for c in candidates if c.converged]
    return min(vals) if vals else math.inf


def rate_hat(values) -> np.ndarray:
    """Shift rate values so the smallest finite one is 0; infinite entries stay infinite."""
    v = np.asarray(values, dtype=float)
    finite = v[np.isfinite(v)]
    if finite.size == 0:
        return v.copy()
    return v - finite.min()


@dataclass(frozen=True)
class I2Result:
    value: float
    energy: float
    tracking_rms: float
    residual: float
    h_star: CMPath | None
    converged: bool


def rate_I2(sys_V: VectorFieldSystem, sys_A: VectorFieldSystem, constraint: EndpointConstraint,
            z0, b_grid, b_values, tol: float = 1e-3, opts: RateOptions = RateOptions(),
            weights=(1e2, 1e3, 1e4, 1e5)) -> I2Result:
    """Least energy among controls in the endpoint set whose output path follows b.

    The output zeta solves the skeleton of ``sys_A`` from z0 under the same
    control.  Tracking enters as a penalty w * int |zeta - b|^2 dt with
    increasing w; the value is inf when the final RMS tracking error exceeds tol.
    """
    z0 = np.asarray(z0, dtype=float)
    b_grid = np.asarray(b_grid, dtype=float)
    b_values = np.asarray(b_values, dtype=float)
    if b_values.ndim == 1:
        b_values = b_values[:, None]
    if b_values.shape[1] != sys_A.n or z0.shape != (sys_A.n,):
        raise ValueError("output path dimension mismatch")
    if np.linalg.norm(b_values[0] - z0) > tol:
        return I2Result(math.inf, math.inf, math.inf, math.inf, None, False)
    joint = sys_V.stacked_with(sys_A)
    n = sys_V.n
    start = np.concatenate([constraint.start, z0])
    B = np.zeros((joint.n, constraint.basis.shape[1]))
    B[:n] = constraint.basis
    K = opts.segments
    dts = np.full(K, 1.0 / K)
    nodes = np.linspace(0.0, 1.0, K * opts.substeps + 1)
    ref = np.stack([np.interp(nodes, b_grid, b_values[:, j]) for j in range(sys_A.n)], axis=1)
    w = np.full(nodes.size, 1.0 / (nodes.size - 1))
    w[0] = w[-1] = 0.5 / (nodes.size - 1)
    prob = _Problem(joint, start, B, constraint.target, dts, opts.substeps,
                    np.arange(n, joint.n), ref, w)
    rng = np.random.default_rng(opts.seed)
    best = None
    for r in range(max(1, opts.restarts)):
        z = 0.1 * opts.start_scale * rng.standard_normal(K * joint.d)
        for wt in weights:
            z = _augmented_lagrangian(prob, z, opts, track_scale=wt)
        _, phi, _ = prob.forward(z)
        track = math.sqrt(2.0 * prob.tracking(phi)[0])
        c = float(np.linalg.norm(B.T @ phi[-1] - constraint.target))
        energy = 0.5 * float(z @ z)
        ok = track <= tol and c <= max(opts.endpoint_tol, tol)
        key = (not ok, energy if ok else track + c, r)
        if best is None or key < best[0]:
            best = (key, z, energy, track, c, ok)
    _, z, energy, track, c, ok = best
    h = CMPath(np.linspace(0.0, 1.0, K + 1), prob.slopes(z))
    return I2Result(energy if ok else math.inf, energy, track, c, h, ok)
