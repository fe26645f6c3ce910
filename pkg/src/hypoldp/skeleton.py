"""Controlled skeleton ODE with Jacobian and inverse Jacobian flows.

A control ``h`` is a Cameron-Martin path stored through its piecewise-constant
derivative.  Driving a system by ``h`` integrates

    dphi = sum_i V_i(phi) dh^i,   dJ = A J dt,   dK = -K A dt,

with ``A = sum_i grad V_i(phi) hdot^i``, so ``K = J^{-1}``.  The drift plays
no role in the skeleton.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .vectorfields import BracketWord, VectorField, VectorFieldSystem, evaluate

__all__ = [
    "CMPath",
    "SkeletonTrajectory",
    "SkeletonBlowup",
    "CovarianceReport",
    "cm_norm",
    "reverse",
    "concat",
    "reparametrize",
    "solve_skeleton",
    "endpoint",
    "frechet_derivative",
    "qw_path",
    "covariance",
    "coordinate_projector",
    "projector_basis",
]


class SkeletonBlowup(FloatingPointError):
    def __init__(self, time: float):
        super().__init__(f"skeleton state became non-finite near t={time:.6g}")
        self.time = time


@dataclass(frozen=True)
class CMPath:
    """Path h with h(0)=0 and constant derivative ``slopes[k]`` on ``[grid[k], grid[k+1]]``."""

    grid: np.ndarray
    slopes: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).reshape(-1)
        slopes = np.asarray(self.slopes, dtype=float)
        if slopes.ndim == 1:
            slopes = slopes.reshape(len(grid) - 1, -1) if len(grid) > 1 else slopes.reshape(0, -1)
        if grid.size < 1 or grid[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if slopes.shape[0] != grid.size - 1:
            raise ValueError("need one slope row per grid interval")
        if not np.all(np.isfinite(slopes)):
            raise ValueError("slopes must be finite")
        grid.setflags(write=False)
        slopes.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "slopes", slopes)

    @classmethod
    def empty(cls, d: int) -> "CMPath":
        return cls(np.zeros(1), np.zeros((0, d)))

    @classmethod
    def uniform(cls, slopes, horizon: float = 1.0) -> "CMPath":
        slopes = np.atleast_2d(np.asarray(slopes, dtype=float))
        return cls(np.linspace(0.0, horizon, slopes.shape[0] + 1), slopes)

    @classmethod
    def line(cls, end, horizon: float = 1.0, segments: int = 1) -> "CMPath":
        end = np.asarray(end, dtype=float)
        return cls.uniform(np.tile(end / horizon, (segments, 1)), horizon)

    @classmethod
    def from_values(cls, grid, values) -> "CMPath":
        """Piecewise-linear interpolant of ``values`` (first row must be 0)."""
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if np.any(values[0] != 0):
            raise ValueError("a Cameron-Martin path starts at 0")
        return cls(grid, np.diff(values, axis=0) / np.diff(grid)[:, None])

    @property
    def d(self) -> int:
        return self.slopes.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def is_empty(self) -> bool:
        return self.slopes.shape[0] == 0

    def values(self) -> np.ndarray:
        """h at every grid time, shape (K+1, d)."""
        out = np.zeros((self.grid.size, self.d))
        np.cumsum(self.slopes * self.dts[:, None], axis=0, out=out[1:])
        return out

    def end(self) -> np.ndarray:
        return self.values()[-1]

    def __call__(self, t) -> np.ndarray:
        """Evaluate h at time(s) t (clamped to the horizon)."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.horizon)
        if self.is_empty:
            return np.zeros(t.shape + (self.d,))
        vals = self.values()
        k = np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.slopes.shape[0] - 1)
        return vals[k] + self.slopes[k] * (t - self.grid[k])[..., None]

    def slope_at(self, t) -> np.ndarray:
        k = np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.slopes.shape[0] - 1)
        return self.slopes[k]

    def __add__(self, other: "CMPath") -> "CMPath":
        return _binary(self, other, 1.0)

    def __sub__(self, other: "CMPath") -> "CMPath":
        return _binary(self, other, -1.0)

    def scaled(self, a: float) -> "CMPath":
        return CMPath(self.grid, a * self.slopes)

    def refined(self, grid) -> "CMPath":
        """Same path on a finer grid containing the current breakpoints."""
        grid = np.asarray(grid, dtype=float)
        mids = 0.5 * (grid[1:] + grid[:-1])
        return CMPath(grid, self.slope_at(mids))

    def to_dict(self) -> dict:
        return {"grid": [float(t) for t in self.grid],
                "slopes": [[float(v) for v in row] for row in self.slopes]}

    @classmethod
    def from_dict(cls, doc: dict) -> "CMPath":
        slopes = np.asarray(doc["slopes"], dtype=float)
        if slopes.size == 0:
            slopes = slopes.reshape(0, int(doc.get("d", 1)))
        return cls(np.asarray(doc["grid"], dtype=float), slopes)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path: str | Path) -> "CMPath":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _binary(a: CMPath, b: CMPath, sign: float) -> CMPath:
    if a.d != b.d or not np.isclose(a.horizon, b.horizon, rtol=0, atol=1e-12):
        raise ValueError("paths must share dimension and horizon")
    grid = _merge_grids(a.grid, b.grid)
    mids = 0.5 * (grid[1:] + grid[:-1])
    return CMPath(grid, a.slope_at(mids) + sign * b.slope_at(mids))


def _merge_grids(g1, g2, tol=1e-13):
    g = np.union1d(g1, g2)
    keep = np.concatenate([[True], np.diff(g) > tol])
    g = g[keep]
    g[-1] = max(g1[-1], g2[-1])
    return g


def cm_norm(h: CMPath) -> tuple[float, float]:
    """(energy, norm) with energy = 0.5 * ||h||_H^2, exact for piecewise-constant derivatives."""
    sq = float(np.sum(np.sum(h.slopes ** 2, axis=1) * h.dts))
    return 0.5 * sq, float(np.sqrt(sq))


def reverse(h: CMPath) -> CMPath:
    """hbar_t = h_{T-t} - h_T."""
    grid = np.concatenate([[0.0], np.cumsum(h.dts[::-1])])
    grid[-1] = h.horizon if not h.is_empty else 0.0
    return CMPath(grid, -h.slopes[::-1])


def concat(h: CMPath, k: CMPath) -> CMPath:
    """h run on [0, T], then k shifted to start at T."""
    if h.d != k.d:
        raise ValueError("dimension mismatch")
    grid = np.concatenate([h.grid, h.horizon + k.grid[1:]])
    return CMPath(grid, np.vstack([h.slopes, k.slopes]))


def reparametrize(h: CMPath, horizon: float) -> CMPath:
    """k_t = h(t * T_h / horizon) on [0, horizon]: same trace, rescaled speed."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    c = h.horizon / horizon
    grid = h.grid / c
    grid[-1] = horizon
    return CMPath(grid, h.slopes * c)


@dataclass(frozen=True)
class SkeletonTrajectory:
    """Node values of (phi, J, K) on ``grid`` (every integrator substep)."""

    grid: np.ndarray
    phi: np.ndarray
    J: np.ndarray
    Kinv: np.ndarray
    control: CMPath
    x0: np.ndarray
    substeps: int

    @property
    def end(self) -> np.ndarray:
        return self.phi[-1]

    def inverse_defect(self) -> float:
        """max_t |J_t Kinv_t - I| (Frobenius)."""
        eye = np.eye(self.phi.shape[1])
        return float(np.max(np.linalg.norm(self.J @ self.Kinv - eye, axis=(1, 2))))

    def at_control_nodes(self) -> slice:
        return slice(None, None, self.substeps)

    def to_csv(self, path: str | Path) -> None:
        n = self.phi.shape[1]
        header = ["t"] + [f"phi{k + 1}" for k in range(n)] + \
            [f"J{r + 1}{c + 1}" for r in range(n) for c in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, p, J in zip(self.grid, self.phi, self.J):
                w.writerow([repr(float(v)) for v in (t, *p, *J.reshape(-1))])


def _node_grid(h: CMPath, substeps: int) -> np.ndarray:
    if h.is_empty:
        return np.zeros(1)
    frac = np.arange(substeps) / substeps
    inner = (h.grid[:-1, None] + h.dts[:, None] * frac[None, :]).reshape(-1)
    return np.concatenate([inner, [h.horizon]])


def solve_skeleton(sys: VectorFieldSystem, x0, h: CMPath, substeps: int = 32,
                   J0=None, K0=None) -> SkeletonTrajectory:
    """Integrate (phi, J, K) with classical RK4, ``substeps`` steps per control segment."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if h.d != sys.d:
        raise ValueError(f"control has dimension {h.d}, system expects d={sys.d}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.n,):
        raise ValueError("start point dimension mismatch")
    eye = np.eye(sys.n)
    J0 = eye if J0 is None else np.asarray(J0, dtype=float)
    K0 = eye if K0 is None else np.asarray(K0, dtype=float)
    exps, coefs = sys.packed
    with np.errstate(all="ignore"):
        phi, J, K = _kernels.skeleton_rk4(exps, coefs, x0, np.ascontiguousarray(J0),
                                          np.ascontiguousarray(K0),
                                          np.ascontiguousarray(h.slopes), h.dts, int(substeps))
    grid = _node_grid(h, substeps)
    bad = ~(np.isfinite(phi).all(axis=1) & np.isfinite(J).all(axis=(1, 2))
            & np.isfinite(K).all(axis=(1, 2)))
    if bad.any():
        raise SkeletonBlowup(float(grid[np.argmax(bad)]))
    return SkeletonTrajectory(grid, phi, J, K, h, x0.copy(), int(substeps))


def endpoint(sys: VectorFieldSystem, x0, h: CMPath, substeps: int = 32) -> np.ndarray:
    """phi at the final time, without the Jacobian flows."""
    exps, coefs = sys.packed
    phi, _ = _kernels.endpoint_forward(exps, coefs, np.asarray(x0, dtype=float),
                                       np.ascontiguousarray(h.slopes), h.dts, int(substeps))
    return phi[-1]


def _kv(sys: VectorFieldSystem, traj: SkeletonTrajectory) -> np.ndarray:
    """K_t V(phi_t) at every node, shape (M+1, n, d)."""
    return traj.Kinv @ sys.batch_matrix(traj.phi)


def _trapezoid_weights(grid):
    dt = np.diff(grid)
    w = np.zeros(grid.size)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def frechet_derivative(sys: VectorFieldSystem, traj: SkeletonTrajectory, k: CMPath) -> np.ndarray:
    """D phi_1(h)<k> = J_1 sum_i int J_s^{-1} V_i(phi_s) kdot^i_s ds (trapezoid per substep)."""
    if k.d != sys.d:
        raise ValueError("direction dimension mismatch")
    if abs(k.horizon - traj.grid[-1]) > 1e-12:
        raise ValueError("direction and trajectory horizons differ")
    nodes = traj.grid
    if k.grid.size > 2:
        pos = np.searchsorted(nodes, k.grid[1:-1])
        pos = np.clip(pos, 0, nodes.size - 1)
        lo = np.clip(pos - 1, 0, nodes.size - 1)
        gap = np.minimum(np.abs(nodes[pos] - k.grid[1:-1]), np.abs(nodes[lo] - k.grid[1:-1]))
        if np.any(gap > 1e-12):
            raise ValueError("direction grid is not contained in the trajectory grid")
    if nodes.size < 2:
        return np.zeros(sys.n)
    kv = _kv(sys, traj)
    mids = 0.5 * (nodes[1:] + nodes[:-1])
    kd = k.slope_at(mids)
    dt = np.diff(nodes)
    f0 = np.einsum("mkd,md->mk", kv[:-1], kd)
    f1 = np.einsum("mkd,md->mk", kv[1:], kd)
    integral = np.sum(0.5 * dt[:, None] * (f0 + f1), axis=0)
    return traj.J[-1] @ integral


def qw_path(sys: VectorFieldSystem, traj: SkeletonTrajectory,
            W: BracketWord | VectorField) -> np.ndarray:
    """Q^W_t = J_t^{-1} W(phi_t) at every node, shape (M+1, n)."""
    fld = W.field if isinstance(W, BracketWord) else W
    return np.einsum("mij,mj->mi", traj.Kinv, evaluate(fld, traj.phi))


@dataclass(frozen=True)
class CovarianceReport:
    C: np.ndarray
    sigma: np.ndarray
    eigenvalues: np.ndarray
    sigma_projected: np.ndarray | None = None
    projected_eigenvalues: np.ndarray | None = None

    @property
    def min_eig(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def projected_min_eig(self) -> float | None:
        if self.projected_eigenvalues is None:
            return None
        return float(self.projected_eigenvalues[0])

    def to_dict(self) -> dict:
        out = {"C": self.C.tolist(), "sigma": self.sigma.tolist(),
               "eigenvalues": self.eigenvalues.tolist(), "min_eig": self.min_eig}
        if self.sigma_projected is not None:
            out["sigma_projected"] = self.sigma_projected.tolist()
            out["projected_eigenvalues"] = self.projected_eigenvalues.tolist()
        return out


def coordinate_projector(n: int, dims) -> np.ndarray:
    """Orthogonal projector onto the span of the listed coordinate axes (0-based)."""
    P = np.zeros((n, n))
    for i in dims:
        P[i, i] = 1.0
    return P


def projector_basis(P: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis (n, l) of range(P); checks that P is an orthogonal projector."""
    P = np.asarray(P, dtype=float)
    if not (np.allclose(P, P.T, atol=tol) and np.allclose(P @ P, P, atol=tol)):
        raise ValueError("projection must be symmetric and idempotent")
    diag = np.diag(P)
    if np.all((P == np.diag(diag)) & np.isin(P, (0.0, 1.0))):
        return np.eye(P.shape[0])[:, diag == 1.0]
    w, U = np.linalg.eigh(P)
    return U[:, w > 0.5][:, ::-1]


def covariance(sys: VectorFieldSystem, traj: SkeletonTrajectory,
               projection: np.ndarray | None = None) -> CovarianceReport:
    """C = int K V V* K* dt (trapezoid) and sigma = J_1 C J_1*."""
    kv = _kv(sys, traj)
    w = _trapezoid_weights(traj.grid)
    C = np.einsum("m,mid,mjd->ij", w, kv, kv)
    C = 0.5 * (C + C.T)
    J1 = traj.J[-1]
    sigma = J1 @ C @ J1.T
    sigma = 0.5 * (sigma + sigma.T)
    eig = np.linalg.eigvalsh(sigma)
    sp = pe = None
    if projection is not None:
        B = projector_basis(projection)
        sp = B.T @ sigma @ B
        sp = 0.5 * (sp + sp.T)
        pe = np.linalg.eigvalsh(sp)
    return CovarianceReport(C, sigma, eig, sp, pe)
