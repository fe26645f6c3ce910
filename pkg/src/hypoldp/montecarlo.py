"""Small-noise Monte Carlo for the scaled diffusion and its pinned versions.

Paths are produced by Wong-Zakai: the SDE is replaced by the ODE driven by
the dyadic polygonal interpolation of a Brownian path, solved with RK4 on
each linear piece.  Brownian increments come from counter-based Philox
streams, one stream per fixed-size block of paths, so results do not depend
on how blocks are distributed over threads.

Endpoint densities are estimated with a Gaussian kernel.  For small noise the
event of landing near a target is rare; the simulators therefore accept a
deterministic shift of the driver (Cameron-Martin change of measure) and
return the matching likelihood-ratio weights.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from ._parallel import worker_count
from .ratefn import EndpointConstraint, RateResult
from .roughpath import BesovParams, batch_homogeneous_norms
from .skeleton import CMPath, projector_basis, solve_skeleton
from .vectorfields import VectorFieldSystem

__all__ = [
    "SimConfig",
    "SimBatch",
    "HeatKernelEstimate",
    "DensityError",
    "simulate_endpoints",
    "estimate_density",
    "counterexample_exact",
    "CounterexampleValue",
    "LDPRow",
    "ldp_verify",
    "ConditionedPaths",
    "conditioned_paths",
    "config_hash",
]

BLOW_UP = 1e6


class DensityError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    epsilons: tuple = (1.0,)
    n_paths: int = 100_000
    steps: int = 8
    seed: int = 0
    bandwidth: float = 1.0
    ball_radius: float | None = None
    block_size: int = 8192
    workers: int | None = None
    substeps: int = 1
    importance: bool = True
    ball_R: float = 2.0
    ball_level: int = 5
    besov_alpha: float = 0.45
    besov_m: int = 8
    batches: int = 10

    def __post_init__(self):
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.steps < 4:
            raise ValueError("steps (dyadic level) must be >= 4")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def delta(self, eps: float) -> float:
        return 0.1 * eps if self.ball_radius is None else self.ball_radius

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("workers")
        out["epsilons"] = list(self.epsilons)
        return out


def config_hash(doc: dict) -> str:
    """Short stable hash of a JSON-serialisable configuration."""
    text = json.dumps(doc, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _block_normals(seed: int, block: int, count: int, K: int, d: int, dt: float) -> np.ndarray:
    key = (int(seed) % 2 ** 64) + (int(block) << 64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal((count, K, d)) * math.sqrt(dt)


@dataclass(frozen=True)
class SimBatch:
    endpoints: np.ndarray
    weights: np.ndarray
    blowups: int
    paths: np.ndarray | None = None
    noise: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.endpoints.shape[0]


def _shift_increments(shift: CMPath | None, K: int, d: int) -> np.ndarray:
    if shift is None:
        return np.zeros((K, d))
    grid = np.linspace(0.0, shift.horizon, K + 1)
    return np.diff(shift(grid), axis=0)


def simulate_endpoints(sys: VectorFieldSystem, x0, eps: float, k: int, n_paths: int,
                       seed: int, shift: CMPath | None = None, store_paths: bool = False,
                       block_size: int = 8192, workers: int | None = None,
                       substeps: int = 1) -> SimBatch:
    """Endpoints at time 1 of dz = eps V(z) dw(k) + eps^2 V0(z) dt.

    With ``shift = g`` the driver is eps*w + g and ``weights`` hold the
    likelihood ratio exp(-sum dg.dw/(eps dt) - sum |dg|^2/(2 eps^2 dt)) of
    the discrete Gaussian increments, so weighted averages are unbiased for
    the unshifted law.  Paths that leave |z| < 1e6 are dropped and counted.
    """
    x0 = np.asarray(x0, dtype=float)
    K = 2 ** k
    dt = 1.0 / K
    d, n = sys.d, sys.n
    exps, coefs = sys.packed
    dexps, dcoefs = sys.packed_drift
    dg = _shift_increments(shift, K, d)
    if shift is not None and eps <= 0:
        raise ValueError("a shifted driver needs eps > 0")
    blocks = [(b, min(block_size, n_paths - b * block_size))
              for b in range((n_paths + block_size - 1) // block_size)]

    def run(item):
        b, count = item
        dW = _block_normals(seed, b, count, K, d, dt)
        ends = np.empty((count, n))
        status = np.zeros(count, dtype=np.int64)
        paths = np.empty((count, K + 1, n)) if store_paths else np.empty((1, 1, n))
        _kernels.wong_zakai_block(exps, coefs, dexps, dcoefs, x0, float(eps), dW, dt, dg,
                                  int(substeps), BLOW_UP, paths, store_paths, ends, status)
        if shift is not None:
            g = dg / eps
            logw = -np.einsum("bkd,kd->b", dW, g) / dt - 0.5 * np.sum(g * g) / dt
            w = np.exp(logw)
        else:
            w = np.ones(count)
        noise = None
        if store_paths:
            noise = np.zeros((count, K + 1, d))
            np.cumsum(dW, axis=1, out=noise[:, 1:])
        return ends, w, status, (paths if store_paths else None), noise

    nw = worker_count(workers)
    if nw == 1 or len(blocks) == 1:
        parts = [run(bl) for bl in blocks]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=min(nw, len(blocks))) as pool:
            parts = list(pool.map(run, blocks))
    ends = np.concatenate([p[0] for p in parts])
    w = np.concatenate([p[1] for p in parts])
    status = np.concatenate([p[2] for p in parts])
    keep = status == 0
    paths = noise = None
    if store_paths:
        paths = np.concatenate([p[3] for p in parts])[keep]
        noise = np.concatenate([p[4] for p in parts])[keep]
    return SimBatch(ends[keep], w[keep], int(np.sum(~keep)), paths, noise)


@dataclass(frozen=True)
class HeatKernelEstimate:
    epsilon: float | None
    target: np.ndarray
    p_hat: float
    stderr: float
    n_effective: float
    bandwidth: float

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "target": self.target.tolist(), "p_hat": self.p_hat,
                "stderr": self.stderr, "n_effective": self.n_effective,
                "bandwidth": self.bandwidth}


def _projection_basis(projection, n):
    """None, coordinate indices, an n x n orthogonal projector, or an n x l orthonormal basis."""
    if projection is None:
        return None
    P = np.asarray(projection)
    if P.ndim == 1:
        return np.eye(n)[:, P.astype(int)]
    if P.shape == (n, n):
        return projector_basis(P)
    if P.shape[0] == n and np.allclose(P.T @ P, np.eye(P.shape[1]), atol=1e-12):
        return P.astype(float)
    raise ValueError("projection must be indices, a projector or an orthonormal basis")


def estimate_density(samples, target, projection=None, bandwidth: float = 1.0,
                     weights=None, batches: int = 10, epsilon: float | None = None,
                     min_samples: int = 1000, tilt: bool = True) -> HeatKernelEstimate:
    """Weighted Gaussian-kernel density of the (projected) samples at ``target``.

    The kernel covariance is h^2 S, where S is the sample covariance and h
    the normal-reference factor (4/(l+2))^(1/(l+4)) N^(-1/(l+4)) times
    ``bandwidth``.  The standard error comes from ``batches`` contiguous
    batches evaluated with the same kernel.

    Likelihood-ratio weights of a shifted driver typically vary like
    exp(g.(y - target)) across the kernel window, which biases a plain
    weighted kernel estimate upwards.  With ``tilt`` the slope g is fitted
    by kernel-weighted least squares of log w on y - target and divided
    out of each weight, leaving only the smoothing bias of the sampling
    density.
    """
    Y = np.asarray(samples, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    N = Y.shape[0]
    if N < min_samples:
        raise DensityError(f"need at least {min_samples} samples, got {N}")
    B = _projection_basis(projection, Y.shape[1])
    if B is not None:
        Y = Y @ B
    l = Y.shape[1]
    a = np.asarray(target, dtype=float).reshape(-1)
    if a.size != l:
        raise ValueError(f"target has {a.size} coordinates, projected samples have {l}")
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    S = np.atleast_2d(np.cov(Y, rowvar=False))
    ev = np.linalg.eigvalsh(S)
    if ev[0] <= 1e-14 * max(ev[-1], 1e-300):
        raise DensityError("sample covariance is degenerate")
    h = bandwidth * (4.0 / (l + 2)) ** (1.0 / (l + 4)) * N ** (-1.0 / (l + 4))
    L = np.linalg.cholesky(S) * h
    Z = np.linalg.solve(L, (Y - a).T).T
    logk = -0.5 * np.sum(Z * Z, axis=1) - np.sum(np.log(np.diag(L))) - 0.5 * l * np.log(2 * np.pi)
    kern = np.exp(logk)
    if tilt and weights is not None:
        w = w * _tilt_factor(Y - a, w, kern)
    contrib = w * kern
    p_hat = float(np.mean(contrib))
    parts = np.array_split(contrib, batches)
    means = np.array([p.mean() for p in parts])
    stderr = float(np.std(means, ddof=1) / math.sqrt(batches)) if batches > 1 else math.nan
    # effective number of samples carrying the estimate (kernel and weight combined)
    n_eff = 0.0
    if p_hat > 0:
        c = contrib / contrib.max()
        n_eff = float(np.sum(c) ** 2 / np.sum(c * c))
    return HeatKernelEstimate(epsilon, a, p_hat, stderr, n_eff, float(h))


def _tilt_factor(D: np.ndarray, w: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """exp(-g.D) with g the kernel-weighted least-squares slope of log w on D."""
    ok = (w > 0) & (kern > 0)
    if ok.sum() <= D.shape[1] + 1:
        return np.ones_like(w)
    sw = np.sqrt(kern[ok] / kern[ok].max())
    X = np.hstack([np.ones((ok.sum(), 1)), D[ok]]) * sw[:, None]
    coef, *_ = np.linalg.lstsq(X, np.log(w[ok]) * sw, rcond=None)
    g = coef[1:]
    if not np.all(np.isfinite(g)) or np.all(g == 0):
        return np.ones_like(w)
    return np.exp(-(D @ g))


@dataclass(frozen=True)
class CounterexampleValue:
    epsilon: float
    x2: float
    covariance: np.ndarray
    p: float
    eps2_log_p: float
    p_printed: float
    eps2_log_p_printed: float


def counterexample_exact(eps: float, x2: float) -> CounterexampleValue:
    """Endpoint density at (0, x2) for dX1 = eps dW, dX2 = eps^2 X1 dt from the origin.

    The endpoint is centred Gaussian with covariance
    [[eps^2, eps^4/2], [eps^4/2, eps^6/3]].  ``p`` is that Gaussian density;
    ``p_printed`` evaluates the variant sqrt(3)/(pi eps^4) exp(-x2^2/(6 eps^6)),
    which agrees with ``p`` only at x2 = 0; the Gaussian exponent is
    -6 x2^2/eps^6.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    cov = np.array([[eps ** 2, eps ** 4 / 2], [eps ** 4 / 2, eps ** 6 / 3]])
    pref = math.sqrt(3.0) / (math.pi * eps ** 4)
    log_p = math.log(pref) - 6.0 * x2 ** 2 / eps ** 6
    log_pp = math.log(pref) - x2 ** 2 / (6.0 * eps ** 6)
    return CounterexampleValue(eps, x2, cov, math.exp(log_p), eps ** 2 * log_p,
                               math.exp(log_pp), eps ** 2 * log_pp)


def _target_projection(sys, constraint: EndpointConstraint):
    B = constraint.basis
    return None if constraint.projector is None else B


@dataclass(frozen=True)
class LDPRow:
    epsilon: float
    p_hat: float
    stderr: float
    eps2_log_p: float
    minus_rate: float
    gap: float
    n_effective: float
    delta: float
    accepted: int
    ball_fraction: float
    eps2_log_ball: float
    blowups: int

    CSV_COLUMNS = ("epsilon", "p_hat", "stderr", "eps2_log_p", "minus_rate", "gap",
                   "n_effective", "delta", "accepted", "ball_fraction", "eps2_log_ball",
                   "blowups")

    def as_row(self) -> list:
        return [getattr(self, c) for c in self.CSV_COLUMNS]


def _shift_for(rate: RateResult | None, use: bool):
    if rate is None or not use:
        return None
    return rate.h_star


def ldp_verify(sys: VectorFieldSystem, x0, constraint: EndpointConstraint, cfg: SimConfig,
               rate: RateResult | None) -> list[LDPRow]:
    """Tabulate eps^2 log p_hat against -energy and the ball-weight proxy, per eps.

    The ball weight is the weighted fraction of paths whose endpoint lies
    within delta of the target and whose driver, translated back by the
    minimiser h*, has homogeneous Besov norm below ``cfg.ball_R``; it is
    multiplied by p_hat to mimic the unnormalised pinned measure of the ball.
    """
    x0 = np.asarray(x0, dtype=float)
    minus_rate = -rate.energy if rate is not None and rate.converged else -math.inf
    shift = _shift_for(rate, cfg.importance)
    proj = _target_projection(sys, constraint)
    besov = BesovParams(cfg.besov_alpha, cfg.besov_m)
    rows = []
    for eps in cfg.epsilons:
        batch = simulate_endpoints(sys, x0, eps, cfg.steps, cfg.n_paths, cfg.seed, shift=shift,
                                   store_paths=True, block_size=cfg.block_size,
                                   workers=cfg.workers, substeps=cfg.substeps)
        est = estimate_density(batch.endpoints, constraint.target, proj, cfg.bandwidth,
                               batch.weights, cfg.batches, eps)
        delta = cfg.delta(eps)
        Yp = batch.endpoints if proj is None else batch.endpoints @ proj
        dist = np.linalg.norm(Yp - constraint.target, axis=1)
        acc = dist < delta
        while acc.sum() < 50 and delta < 1e3:
            warnings.warn(f"only {acc.sum()} conditioned paths at eps={eps}; widening delta")
            delta *= 2.0
            acc = dist < delta
        frac = math.nan
        if acc.any():
            step = 2 ** (cfg.steps - cfg.ball_level)
            coarse = np.linspace(0.0, 1.0, 2 ** cfg.ball_level + 1)
            centred = eps * batch.noise[acc][:, ::step]
            if shift is not None:
                centred = centred + shift(coarse)
            if rate is not None:
                centred = centred - rate.h_star(coarse)
            norms = batch_homogeneous_norms(centred, besov)
            wa = batch.weights[acc]
            frac = float(np.sum(wa * (norms < cfg.ball_R)) / np.sum(wa))
        p = est.p_hat
        e2lp = eps ** 2 * math.log(p) if p > 0 else -math.inf
        ball = frac * p
        e2lb = eps ** 2 * math.log(ball) if ball > 0 else -math.inf
        gap = abs(e2lp - minus_rate) if math.isfinite(minus_rate) else math.inf
        rows.append(LDPRow(eps, p, est.stderr, e2lp, minus_rate, gap, est.n_effective, delta,
                           int(acc.sum()), frac, e2lb, batch.blowups))
    return rows


@dataclass(frozen=True)
class ConditionedPaths:
    times: np.ndarray
    states: np.ndarray
    noise: np.ndarray
    weights: np.ndarray
    acceptance_rate: float
    delta: float

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def weighted_mean(self, values: np.ndarray) -> np.ndarray:
        w = self.weights / self.weights.sum()
        return np.tensordot(w, values, axes=1)


def conditioned_paths(sys: VectorFieldSystem, x0, constraint: EndpointConstraint, eps: float,
                      delta: float, cfg: SimConfig, shift: CMPath | None = None) -> ConditionedPaths:
    """Paths whose (projected) endpoint lands within delta of the target."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    batch = simulate_endpoints(sys, x0, eps, cfg.steps, cfg.n_paths, cfg.seed, shift=shift,
                               store_paths=True, block_size=cfg.block_size, workers=cfg.workers,
                               substeps=cfg.substeps)
    proj = _target_projection(sys, constraint)
    Yp = batch.endpoints if proj is None else batch.endpoints @ proj
    acc = np.linalg.norm(Yp - constraint.target, axis=1) < delta
    if not acc.any():
        raise RuntimeError(f"no path landed within delta={delta} of the target")
    times = np.linspace(0.0, 1.0, 2 ** cfg.steps + 1)
    return ConditionedPaths(times, batch.paths[acc], batch.noise[acc], batch.weights[acc],
                            float(acc.mean()), float(delta))


def skeleton_on_dyadic(sys: VectorFieldSystem, x0, h: CMPath, k: int) -> np.ndarray:
    """phi(t, x0, h) at the dyadic times of level k."""
    grid = np.union1d(h.grid, np.linspace(0.0, h.horizon, 2 ** k + 1))
    traj = solve_skeleton(sys, x0, h.refined(grid), substeps=4)
    idx = np.searchsorted(grid, np.linspace(0.0, h.horizon, 2 ** k + 1))
    return traj.phi[::4][idx]
