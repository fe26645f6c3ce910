"""Level-2 geometric rough paths on dyadic grids.

A rough path is stored by its per-segment data at the finest level; data for
any pair of grid times is rebuilt from running signatures with the Chen
relation, so every derived increment is Chen-consistent by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import CMPath

__all__ = [
    "BesovParams",
    "Increment",
    "RoughPath",
    "lift_piecewise_linear",
    "chen_combine",
    "holder_dist",
    "besov_dist",
    "besov_terms",
    "homogeneous_norm",
    "batch_homogeneous_norms",
    "young_translate",
    "dilate",
]


@dataclass(frozen=True)
class BesovParams:
    """Exponent alpha and integrability 4m of the Besov-type rough-path metric."""

    alpha: float = 0.45
    m: int = 8
    strict: bool = True

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be a positive integer")
        if self.strict and self.violations():
            raise ValueError("Besov parameters violate: " + "; ".join(self.violations()))

    def violations(self) -> list[str]:
        a, m = self.alpha, self.m
        out = []
        if not 1.0 / 3.0 < a < 0.5:
            out.append("need 1/3 < alpha < 1/2")
        if not a - 1.0 / (4 * m) > 1.0 / 3.0:
            out.append("need alpha - 1/(4m) > 1/3")
        if not 4 * m * (0.5 - a) > 1.0:
            out.append("need 4m(1/2 - alpha) > 1")
        return out


@dataclass(frozen=True)
class Increment:
    """Rough-path data (w^1_{s,t}, w^2_{s,t}) over one interval."""

    s: float
    t: float
    level1: np.ndarray
    level2: np.ndarray


def chen_combine(a: Increment, b: Increment, tol: float = 1e-14) -> Increment:
    """Data over [a.s, b.t] from data over adjacent intervals [a.s, a.t] and [b.s, b.t]."""
    if abs(a.t - b.s) > tol:
        raise ValueError(f"intervals are not adjacent: {a.t} != {b.s}")
    return Increment(a.s, b.t, a.level1 + b.level1,
                     a.level2 + b.level2 + np.outer(a.level1, b.level1))


@dataclass(frozen=True)
class RoughPath:
    grid: np.ndarray
    level1: np.ndarray
    level2: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        l1 = np.asarray(self.level1, dtype=float)
        l2 = np.asarray(self.level2, dtype=float)
        K = grid.size - 1
        if K < 1 or l1.shape[0] != K or l2.shape != (K, l1.shape[1], l1.shape[1]):
            raise ValueError("need one (level1, level2) pair per grid interval")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        for a in (grid, l1, l2):
            a.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "level1", l1)
        object.__setattr__(self, "level2", l2)

    @property
    def d(self) -> int:
        return self.level1.shape[1]

    @property
    def segments(self) -> int:
        return self.level1.shape[0]

    @property
    def level(self) -> int | None:
        k = int(np.log2(self.segments))
        return k if 2 ** k == self.segments else None

    def values(self) -> np.ndarray:
        """Underlying path at grid times, starting from 0."""
        out = np.zeros((self.segments + 1, self.d))
        np.cumsum(self.level1, axis=0, out=out[1:])
        return out

    def _running(self):
        """Signature levels over [t_0, t_i] for every i."""
        X = self.values()
        S2 = np.zeros((self.segments + 1, self.d, self.d))
        for i in range(self.segments):
            S2[i + 1] = S2[i] + self.level2[i] + np.outer(X[i], self.level1[i])
        return X, S2

    def increment(self, i: int, j: int) -> Increment:
        """Data over [grid[i], grid[j]] by sequential Chen products."""
        if not 0 <= i <= j <= self.segments:
            raise IndexError("bad interval")
        out = Increment(self.grid[i], self.grid[i], np.zeros(self.d), np.zeros((self.d, self.d)))
        for k in range(i, j):
            out = chen_combine(out, Increment(self.grid[k], self.grid[k + 1],
                                              self.level1[k], self.level2[k]))
        return out

    def pair_increments(self):
        """(I, J, w1 (P, d), w2 (P, d, d)) for all grid pairs I < J."""
        X, S2 = self._running()
        I, J = np.triu_indices(self.segments + 1, k=1)
        d1 = X[J] - X[I]
        d2 = S2[J] - S2[I] - X[I][:, :, None] * d1[:, None, :]
        return I, J, d1, d2

    def coarsen(self, level: int) -> "RoughPath":
        """Restrict to the dyadic sub-grid with 2^level segments."""
        if self.level is None or level > self.level:
            raise ValueError("can only coarsen a dyadic rough path to a lower level")
        step = 2 ** (self.level - level)
        idx = np.arange(0, self.segments + 1, step)
        X, S2 = self._running()
        d1 = X[idx[1:]] - X[idx[:-1]]
        d2 = S2[idx[1:]] - S2[idx[:-1]] - X[idx[:-1]][:, :, None] * d1[:, None, :]
        return RoughPath(self.grid[idx], d1, d2)

    def symmetric_defect(self) -> float:
        """max over segments of |sym(w2) - w1 (x) w1 / 2|."""
        sym = 0.5 * (self.level2 + np.swapaxes(self.level2, 1, 2))
        half = 0.5 * self.level1[:, :, None] * self.level1[:, None, :]
        return float(np.max(np.abs(sym - half)))

    def to_csv(self, path: str | Path) -> None:
        d = self.d
        header = ["s", "t"] + [f"w1_{i + 1}" for i in range(d)] + \
            [f"w2_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.segments):
                row = [self.grid[k], self.grid[k + 1], *self.level1[k], *self.level2[k].ravel()]
                w.writerow([repr(float(v)) for v in row])


def lift_piecewise_linear(samples, grid=None, require_dyadic: bool = True) -> RoughPath:
    """Canonical lift of the polygon through ``samples`` (rows are path points)."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    K = X.shape[0] - 1
    if require_dyadic and (K < 1 or K & (K - 1)):
        raise ValueError(f"need 2^k + 1 samples, got {K + 1}")
    grid = np.linspace(0.0, 1.0, K + 1) if grid is None else np.asarray(grid, dtype=float)
    delta = np.diff(X, axis=0)
    return RoughPath(grid, delta, 0.5 * delta[:, :, None] * delta[:, None, :])


def _check_same_grid(a: RoughPath, b: RoughPath):
    if a.grid.shape != b.grid.shape or np.any(np.abs(a.grid - b.grid) > 1e-14) or a.d != b.d:
        raise ValueError("rough paths live on different grids")


def holder_dist(a: RoughPath, b: RoughPath, alpha: float) -> float:
    """max |dw1|/|t-s|^alpha + max |dw2|/|t-s|^(2 alpha) over grid pairs."""
    _check_same_grid(a, b)
    I, J, a1, a2 = a.pair_increments()
    _, _, b1, b2 = b.pair_increments()
    gap = a.grid[J] - a.grid[I]
    e1 = np.linalg.norm(a1 - b1, axis=1) / gap ** alpha
    e2 = np.linalg.norm((a2 - b2).reshape(len(gap), -1), axis=1) / gap ** (2 * alpha)
    return float(e1.max() + e2.max())


def _cell_weights(grid, I, J):
    """Weight of the pair (s, t) = (grid[I], grid[J]): product of trapezoid node
    widths, doubled because the integrand is symmetric in (s, t)."""
    dt = np.diff(grid)
    w = np.zeros(grid.size)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return 2.0 * w[I] * w[J]


def _besov_from_pairs(d1, d2, gap, weight, p: BesovParams):
    m, alpha = p.m, p.alpha
    denom = gap ** (1.0 + 4 * m * alpha)
    n1 = np.sum(d1 * d1, axis=-1)
    n2 = np.sum(d2 * d2, axis=(-2, -1))
    t1 = np.sum(weight * n1 ** (2 * m) / denom, axis=-1) ** (1.0 / (4 * m))
    t2 = np.sum(weight * n2 ** m / denom, axis=-1) ** (1.0 / (2 * m))
    return t1, t2


def besov_terms(a: RoughPath, b: RoughPath | None, p: BesovParams) -> tuple[float, float]:
    """The level-1 and level-2 parts of the Besov distance between a and b (b=None: zero path)."""
    I, J, a1, a2 = a.pair_increments()
    if b is not None:
        _check_same_grid(a, b)
        _, _, b1, b2 = b.pair_increments()
        a1, a2 = a1 - b1, a2 - b2
    gap = a.grid[J] - a.grid[I]
    t1, t2 = _besov_from_pairs(a1, a2, gap, _cell_weights(a.grid, I, J), p)
    return float(t1), float(t2)


def besov_dist(a: RoughPath, b: RoughPath, p: BesovParams = BesovParams()) -> float:
    """(int int |dw1|^{4m}/|t-s|^{1+4m alpha})^{1/4m} + (int int |dw2|^{2m}/|t-s|^{1+4m alpha})^{1/2m}."""
    t1, t2 = besov_terms(a, b, p)
    return t1 + t2


def homogeneous_norm(a: RoughPath, p: BesovParams = BesovParams()) -> float:
    """Level-1 part plus the square root of the level-2 part; scales linearly under dilation."""
    t1, t2 = besov_terms(a, None, p)
    return t1 + np.sqrt(t2)


def batch_homogeneous_norms(paths: np.ndarray, p: BesovParams = BesovParams(),
                            chunk: int = 256) -> np.ndarray:
    """homogeneous_norm of the polygon lift for each path in ``paths`` (B, K+1, d)."""
    paths = np.asarray(paths, dtype=float)
    B, K1, d = paths.shape
    grid = np.linspace(0.0, 1.0, K1)
    I, J = np.triu_indices(K1, k=1)
    gap = grid[J] - grid[I]
    weight = _cell_weights(grid, I, J)
    out = np.empty(B)
    for lo in range(0, B, chunk):
        X = paths[lo:lo + chunk] - paths[lo:lo + chunk, :1]
        delta = np.diff(X, axis=1)
        seg2 = 0.5 * delta[..., :, None] * delta[..., None, :]
        S2 = np.zeros((X.shape[0], K1, d, d))
        S2[:, 1:] = np.cumsum(seg2 + X[:, :-1, :, None] * delta[:, :, None, :], axis=1)
        d1 = X[:, J] - X[:, I]
        d2 = S2[:, J] - S2[:, I] - X[:, I][..., :, None] * d1[..., None, :]
        t1, t2 = _besov_from_pairs(d1, d2, gap, weight, p)
        out[lo:lo + chunk] = t1 + np.sqrt(t2)
    return out


def young_translate(rp: RoughPath, h) -> RoughPath:
    """Translate by a Cameron-Martin path sampled on the rough-path grid.

    Per segment with increments a (rough path) and b (h, linear there):
    level1 becomes a + b and level2 gains int h (x) dw + int w (x) dh + int h (x) dh,
    which for linear pieces is (b (x) a + a (x) b + b (x) b) / 2.
    """
    if isinstance(h, CMPath):
        vals = h(rp.grid * h.horizon / rp.grid[-1])
    else:
        vals = np.asarray(h, dtype=float)
    if vals.shape != (rp.segments + 1, rp.d):
        raise ValueError("translation path must be sampled on the rough-path grid")
    b = np.diff(vals, axis=0)
    a = rp.level1
    cross = 0.5 * (b[:, :, None] * a[:, None, :] + a[:, :, None] * b[:, None, :]
                   + b[:, :, None] * b[:, None, :])
    return RoughPath(rp.grid, a + b, rp.level2 + cross)


def dilate(rp: RoughPath, eps: float) -> RoughPath:
    """level1 times eps, level2 times eps^2."""
    return RoughPath(rp.grid, eps * rp.level1, eps * eps * rp.level2)
