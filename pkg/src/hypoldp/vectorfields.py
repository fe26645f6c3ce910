"""Polynomial vector fields on R^n, exact Lie brackets and Hörmander certificates.

Fields are stored as ``{exponent multi-index: coefficient vector}`` so that
derivatives and brackets are computed exactly on the coefficients.  The bracket
convention is ``[V, W] = grad(W) V - grad(V) W``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "VectorField",
    "VectorFieldSystem",
    "BracketWord",
    "HormanderCertificate",
    "HormanderError",
    "SystemFormatError",
    "evaluate",
    "jacobian",
    "lie_bracket",
    "bracket_sets",
    "hormander_degree",
    "frame_lambda",
    "estimate_constants",
    "system_from_dict",
    "system_to_dict",
    "load_system",
]


class HormanderError(RuntimeError):
    """Raised when the bracket span does not fill R^n within the degree cap."""


class SystemFormatError(ValueError):
    """Malformed vector-field system document; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class VectorField:
    """Polynomial vector field ``x -> sum_e c_e x^e`` with ``c_e`` in R^n."""

    __slots__ = ("n", "_terms", "_partials", "__dict__")

    def __init__(self, n: int, terms: Mapping[Sequence[int], Sequence[float]] | None = None):
        self.n = int(n)
        clean = {}
        for exps, coef in (terms or {}).items():
            key = tuple(int(e) for e in exps)
            if len(key) != self.n or any(e < 0 for e in key):
                raise ValueError(f"bad exponent multi-index {exps!r} for n={self.n}")
            vec = np.asarray(coef, dtype=float).reshape(-1)
            if vec.shape != (self.n,):
                raise ValueError(f"coefficient for {key} must have length {self.n}")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"non-finite coefficient for {key}")
            if np.any(vec != 0.0):
                vec = vec.copy()
                vec.setflags(write=False)
                clean[key] = vec
        self._terms = MappingProxyType(dict(sorted(clean.items())))
        self._partials = {}

    @classmethod
    def zero(cls, n: int) -> "VectorField":
        return cls(n)

    @classmethod
    def constant(cls, vec: Sequence[float]) -> "VectorField":
        vec = np.asarray(vec, dtype=float)
        return cls(len(vec), {(0,) * len(vec): vec})

    @property
    def terms(self) -> Mapping[tuple[int, ...], np.ndarray]:
        return self._terms

    @property
    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self._terms), default=0)

    @cached_property
    def _arrays(self):
        if not self._terms:
            return np.zeros((0, self.n), dtype=np.int64), np.zeros((0, self.n))
        exps = np.array(list(self._terms), dtype=np.int64)
        coefs = np.array(list(self._terms.values()))
        return exps, coefs

    def __call__(self, x):
        return evaluate(self, x)

    def partial(self, j: int) -> "VectorField":
        """Exact derivative with respect to coordinate j."""
        if j not in self._partials:
            out = {}
            for exps, c in self._terms.items():
                if exps[j] > 0:
                    key = exps[:j] + (exps[j] - 1,) + exps[j + 1:]
                    out[key] = c * exps[j]
            self._partials[j] = VectorField(self.n, out)
        return self._partials[j]

    def _combine(self, other: "VectorField", sign: float) -> "VectorField":
        if other.n != self.n:
            raise ValueError("dimension mismatch")
        out = dict(self._terms)
        zero = np.zeros(self.n)
        for exps, c in other._terms.items():
            out[exps] = out.get(exps, zero) + sign * c
        return VectorField(self.n, out)

    def __add__(self, other: "VectorField") -> "VectorField":
        return self._combine(other, 1.0)

    def __sub__(self, other: "VectorField") -> "VectorField":
        return self._combine(other, -1.0)

    def __neg__(self) -> "VectorField":
        return VectorField(self.n, {e: -c for e, c in self._terms.items()})

    def scaled(self, a: float) -> "VectorField":
        return VectorField(self.n, {e: a * c for e, c in self._terms.items()})

    def embedded(self, n_total: int, offset: int) -> "VectorField":
        """Same field acting on coordinates ``offset:offset+n`` of R^n_total."""
        out = {}
        for exps, c in self._terms.items():
            key = (0,) * offset + exps + (0,) * (n_total - offset - self.n)
            vec = np.zeros(n_total)
            vec[offset:offset + self.n] = c
            out[key] = vec
        return VectorField(n_total, out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorField) or other.n != self.n:
            return NotImplemented
        if self._terms.keys() != other._terms.keys():
            return False
        return all(np.array_equal(c, other._terms[e]) for e, c in self._terms.items())

    def __hash__(self):
        return hash((self.n, tuple((e, tuple(c)) for e, c in self._terms.items())))

    def __repr__(self) -> str:
        return f"VectorField(n={self.n}, terms={len(self._terms)})"

    def to_dict(self) -> dict:
        return {"terms": [{"exponents": list(e), "coeffs": [float(v) for v in c]}
                          for e, c in self._terms.items()]}


def evaluate(vf: VectorField, x) -> np.ndarray:
    """Evaluate ``vf`` at a point (n,) or a batch (..., n)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (vf.n,):
        raise ValueError(f"point has dimension {x.shape[-1:]} but field has n={vf.n}")
    exps, coefs = vf._arrays
    if exps.shape[0] == 0:
        return np.zeros(x.shape)
    mono = np.prod(x[..., None, :] ** exps, axis=-1)
    return mono @ coefs


def jacobian(vf: VectorField, x) -> np.ndarray:
    """Exact Jacobian ``out[k, j] = d vf^k / d x_j`` at x."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (vf.n,):
        raise ValueError(f"point has dimension {x.shape[-1:]} but field has n={vf.n}")
    cols = [evaluate(vf.partial(j), x) for j in range(vf.n)]
    return np.stack(cols, axis=-1)


def _directional(W: VectorField, V: VectorField) -> VectorField:
    """The polynomial field ``grad(W) V``."""
    n = W.n
    acc: dict[tuple[int, ...], np.ndarray] = {}
    for j in range(n):
        dW = W.partial(j)
        for e2, c2 in V.terms.items():
            vj = c2[j]
            if vj == 0.0:
                continue
            for e1, c1 in dW.terms.items():
                key = tuple(a + b for a, b in zip(e1, e2))
                prev = acc.get(key)
                acc[key] = c1 * vj if prev is None else prev + c1 * vj
    return VectorField(n, acc)


def lie_bracket(V: VectorField, W: VectorField) -> VectorField:
    """``[V, W] = grad(W) V - grad(V) W``, computed on the coefficients."""
    if V.n != W.n:
        raise ValueError("dimension mismatch")
    return _directional(W, V) - _directional(V, W)


@dataclass(frozen=True)
class VectorFieldSystem:
    """Driving fields V_1..V_d and drift V_0 on R^n."""

    n: int
    d: int
    fields: tuple
    drift: VectorField

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(self.fields) != self.d:
            raise ValueError(f"expected {self.d} driving fields, got {len(self.fields)}")
        for f in (*self.fields, self.drift):
            if f.n != self.n:
                raise ValueError("all fields must share the state dimension")

    @classmethod
    def build(cls, fields: Sequence[VectorField], drift: VectorField | None = None):
        fields = tuple(fields)
        n = fields[0].n
        return cls(n, len(fields), fields, drift if drift is not None else VectorField.zero(n))

    @cached_property
    def packed(self) -> tuple[np.ndarray, np.ndarray]:
        """(exps (T, n), coefs (T, n, d)) for the compiled kernels."""
        keys = sorted({e for f in self.fields for e in f.terms})
        if not keys:
            keys = [(0,) * self.n]
        index = {e: t for t, e in enumerate(keys)}
        coefs = np.zeros((len(keys), self.n, self.d))
        for i, f in enumerate(self.fields):
            for e, c in f.terms.items():
                coefs[index[e], :, i] = c
        return np.array(keys, dtype=np.int64), coefs

    @cached_property
    def packed_drift(self) -> tuple[np.ndarray, np.ndarray]:
        """(exps (T0, n), coefs (T0, n, 1)) for the drift."""
        terms = self.drift.terms
        if not terms:
            return np.zeros((0, self.n), dtype=np.int64), np.zeros((0, self.n, 1))
        exps = np.array(list(terms), dtype=np.int64)
        coefs = np.array(list(terms.values()))[:, :, None]
        return exps, coefs

    def matrix(self, x) -> np.ndarray:
        """The n x d matrix [V_1(x), ..., V_d(x)]."""
        return np.stack([evaluate(f, x) for f in self.fields], axis=-1)

    @cached_property
    def _batch_plan(self):
        return _batch_plan(self.fields, self.n), _batch_plan([self.drift], self.n)

    def batch_matrix(self, X: np.ndarray) -> np.ndarray:
        """Vectorised ``matrix`` for X of shape (B, n); returns (B, n, d)."""
        return _run_plan(self._batch_plan[0], X, self.n, self.d)

    def batch_drift(self, X: np.ndarray) -> np.ndarray:
        return _run_plan(self._batch_plan[1], X, self.n, 1)[:, :, 0]

    @property
    def has_drift(self) -> bool:
        return not self.drift.is_zero

    def stacked_with(self, other: "VectorFieldSystem") -> "VectorFieldSystem":
        """Product system on R^(n + N) driven by the same noise."""
        if other.d != self.d:
            raise ValueError("systems must share the driving dimension")
        total = self.n + other.n
        fields = [a.embedded(total, 0) + b.embedded(total, self.n)
                  for a, b in zip(self.fields, other.fields)]
        drift = self.drift.embedded(total, 0) + other.drift.embedded(total, self.n)
        return VectorFieldSystem(total, self.d, tuple(fields), drift)


def _batch_plan(fields, n):
    monos: dict[tuple[int, ...], list] = {}
    for i, f in enumerate(fields):
        for e, c in f.terms.items():
            for k in np.flatnonzero(c):
                monos.setdefault(e, []).append((int(k), i, float(c[k])))
    plan = []
    for e, entries in monos.items():
        factors = [(j, p) for j, p in enumerate(e) if p > 0]
        plan.append((factors, entries))
    return plan


def _run_plan(plan, X, n, d):
    out = np.zeros((X.shape[0], n, d))
    for factors, entries in plan:
        mono = None
        for j, p in factors:
            col = X[:, j] if p == 1 else X[:, j] ** p
            mono = col if mono is None else mono * col
        for k, i, c in entries:
            if mono is None:
                out[:, k, i] += c
            else:
                out[:, k, i] += c * mono
    return out


@dataclass(frozen=True)
class BracketWord:
    """Word (j_1, ..., j_k), 0-based, for [V_{j_1}, [..., [V_{j_(k-1)}, V_{j_k}]...]]."""

    word: tuple
    field: VectorField = field(compare=False, repr=False)

    def __post_init__(self):
        if not self.word:
            raise ValueError("bracket word must be nonempty")

    @property
    def degree(self) -> int:
        return len(self.word)

    def __str__(self) -> str:
        names = [f"V{j + 1}" for j in self.word]
        out = names[-1]
        for name in reversed(names[:-1]):
            out = f"[{name},{out}]"
        return out


def bracket_sets(sys: VectorFieldSystem, kmax: int) -> list[list[BracketWord]]:
    """Sigma_1..Sigma_kmax. Every word is kept; zero words do not spawn new brackets."""
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    zero = VectorField.zero(sys.n)
    levels = [[BracketWord((i,), f) for i, f in enumerate(sys.fields)]]
    for _ in range(1, kmax):
        nxt = []
        for i, Vi in enumerate(sys.fields):
            for W in levels[-1]:
                fld = zero if W.field.is_zero else lie_bracket(Vi, W.field)
                nxt.append(BracketWord((i,) + W.word, fld))
        levels.append(nxt)
    return levels


@dataclass(frozen=True)
class HormanderCertificate:
    """Strong Hörmander data at a point; constants are filled by estimate_constants."""

    degree: int
    frame: tuple
    lam: float
    point: np.ndarray
    radius: float | None = None
    horizon: float | None = None
    lipschitz: float | None = None
    field_lipschitz: float | None = None

    @property
    def frame_matrix(self) -> np.ndarray:
        """Columns W_j(x) for the frame words."""
        return np.stack([evaluate(w.field, self.point) for w in self.frame], axis=1)

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "frame": [str(w) for w in self.frame],
            "frame_words": [list(w.word) for w in self.frame],
            "lambda": self.lam,
            "point": [float(v) for v in self.point],
            "radius": self.radius,
            "horizon": self.horizon,
            "M": self.lipschitz,
            "L": self.field_lipschitz,
        }


def frame_lambda(frame_matrix: np.ndarray) -> float:
    """lambda with 3*lambda = min over unit v of max_j |<v, W_j>|.

    For an invertible frame ``F`` (columns W_j) the minimum equals
    ``1 / max_{s in {-1,1}^n} |F^{-T} s|``: a convex function attains its
    maximum over the cube at a vertex.
    """
    F = np.asarray(frame_matrix, dtype=float)
    n = F.shape[0]
    if n > 16:
        return _sampled_frame_lambda(F)
    G = np.linalg.inv(F.T)
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=n - 1)))
    signs = np.hstack([np.ones((len(signs), 1)), signs]) if n > 1 else np.ones((1, 1))
    best = np.max(np.linalg.norm(signs @ G.T, axis=1))
    return 1.0 / (3.0 * best)


def _sampled_frame_lambda(F: np.ndarray, samples: int = 4096, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((samples, F.shape[0]))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return float(np.min(np.max(np.abs(v @ F), axis=1))) / 3.0


def hormander_degree(sys: VectorFieldSystem, x, tol: float | None = None,
                     kmax: int = 6) -> HormanderCertificate:
    """Smallest N with span(Sigma_1(x) u ... u Sigma_N(x)) = R^n, plus a frame and lambda.

    The frame is chosen greedily, lowest degree first; within a degree the
    column with the largest residual after projecting out the current frame
    is taken next.  Raises HormanderError if the cap is reached.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError("point dimension mismatch")
    levels = bracket_sets(sys, kmax)
    cols: list[np.ndarray] = []
    words: list[BracketWord] = []
    for N, level in enumerate(levels, start=1):
        for w in level:
            if not w.field.is_zero:
                cols.append(evaluate(w.field, x))
                words.append(w)
        if not cols:
            continue
        A = np.stack(cols, axis=1)
        s = np.linalg.svd(A, compute_uv=False)
        cut = (tol if tol is not None else 1e-9) * s[0] if s[0] > 0 else 0.0
        if s[0] > 0 and np.sum(s > cut) >= sys.n:
            frame = _greedy_frame(A, words, sys.n, cut)
            F = np.stack([evaluate(w.field, x) for w in frame], axis=1)
            return HormanderCertificate(N, tuple(frame), frame_lambda(F), x.copy())
    raise HormanderError(f"bracket span at {x.tolist()} is not full up to degree {kmax}")


def _greedy_frame(A, words, n, cut):
    Q = np.zeros((n, 0))
    chosen = []
    remaining = list(range(A.shape[1]))
    while len(chosen) < n:
        best, best_norm, best_deg = None, -1.0, None
        for c in remaining:
            deg = words[c].degree
            if best_deg is not None and deg > best_deg:
                continue
            r = A[:, c] - Q @ (Q.T @ A[:, c])
            nr = np.linalg.norm(r)
            if nr <= cut:
                continue
            if best_deg is None or deg < best_deg or nr > best_norm:
                best, best_norm, best_deg = c, nr, deg
        if best is None:
            raise HormanderError("frame selection failed; rank tolerance too strict")
        r = A[:, best] - Q @ (Q.T @ A[:, best])
        Q = np.hstack([Q, (r / np.linalg.norm(r))[:, None]])
        chosen.append(words[best])
        remaining.remove(best)
    return chosen


def _ball_points(x, r, count, rng):
    n = len(x)
    g = rng.standard_normal((count, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    radii = np.ones(count)
    half = count // 2
    radii[half:] = rng.random(count - half) ** (1.0 / n)
    return np.vstack([x[None], x + r * radii[:, None] * g])


def _op_norm_sup(fields, pts):
    """sup over pts of the spectral norm of [grad V_1 ... grad V_d] stacked."""
    best = 0.0
    for p in pts:
        blocks = np.hstack([jacobian(f, p) for f in fields])
        best = max(best, np.linalg.norm(blocks, 2))
    return best


def estimate_constants(sys: VectorFieldSystem, cert: HormanderCertificate,
                       samples: int = 512, seed: int = 0) -> HormanderCertificate:
    """Fill radius r, horizon T, Lipschitz bound M and field Lipschitz constant L.

    r: halve from 1 until every frame field moves by at most 0.9*lambda on the
    sampled ball (half the samples on the sphere), which forces
    |<v, W_j(x')>| >= 2*lambda for v in E_j.
    M: bounds the time-Lipschitz constants of t -> J_t^{-1} and t -> Q^W_t for
    W of degree <= N under unit-speed controls, using sampled sups over B_r.
    T: min(1, lambda / (M sup|W_j|), r / sup|V|) so phi stays inside B_r.
    """
    rng = np.random.default_rng(seed)
    x = cert.point
    lam = cert.lam
    frame_vals = [evaluate(w.field, x) for w in cert.frame]
    r = 1.0
    for _ in range(40):
        pts = _ball_points(x, r, samples, rng)
        dev = max(np.max(np.linalg.norm(evaluate(w.field, pts) - fv, axis=1))
                  for w, fv in zip(cert.frame, frame_vals))
        if dev <= 0.9 * lam:
            break
        r *= 0.5
    pts = _ball_points(x, r, samples, rng)

    levels = bracket_sets(sys, cert.degree + 1)
    lower = [w for lvl in levels[:cert.degree] for w in lvl if not w.field.is_zero]
    # G bounds |sum_i grad V_i u_i| for |u| <= 1
    G = _op_norm_sup(sys.fields, pts)
    k_sup = np.exp(G)
    bracket_rate = 0.0
    if lower:
        for w in lower:
            cols = [evaluate(lie_bracket(Vi, w.field), pts) for Vi in sys.fields]
            rate = np.sqrt(sum(np.sum(c * c, axis=1) for c in cols))
            bracket_rate = max(bracket_rate, float(np.max(rate)))
    M = max(k_sup * G, k_sup * bracket_rate)
    L = max((_op_norm_sup([w.field], pts) for w in lower), default=0.0)
    w_sup = max(float(np.max(np.linalg.norm(evaluate(w.field, pts), axis=1))) for w in cert.frame)
    v_sup = max(np.linalg.norm(sys.matrix(p), 2) for p in pts)
    T = 1.0
    if M > 0 and w_sup > 0:
        T = min(T, lam / (M * w_sup))
    if v_sup > 0:
        T = min(T, r / v_sup)
    return replace(cert, radius=float(r), horizon=float(T), lipschitz=float(M),
                   field_lipschitz=float(L))


def _field_from_dict(doc, n, path):
    if not isinstance(doc, dict) or "terms" not in doc:
        raise SystemFormatError(path, "expected an object with a 'terms' list")
    if not isinstance(doc["terms"], list):
        raise SystemFormatError(f"{path}.terms", "expected a list")
    terms = {}
    for t, term in enumerate(doc["terms"]):
        tp = f"{path}.terms[{t}]"
        if not isinstance(term, dict):
            raise SystemFormatError(tp, "expected an object")
        exps = term.get("exponents")
        coeffs = term.get("coeffs")
        if not isinstance(exps, list) or len(exps) != n or not all(
                isinstance(e, int) and not isinstance(e, bool) and e >= 0 for e in exps):
            raise SystemFormatError(f"{tp}.exponents", f"expected {n} non-negative integers")
        if not isinstance(coeffs, list) or len(coeffs) != n or not all(
                isinstance(c, (int, float)) and not isinstance(c, bool) for c in coeffs):
            raise SystemFormatError(f"{tp}.coeffs", f"expected {n} numbers")
        key = tuple(exps)
        prev = terms.get(key)
        vec = np.asarray(coeffs, dtype=float)
        terms[key] = vec if prev is None else prev + vec
    return VectorField(n, terms)


def system_from_dict(doc: dict) -> VectorFieldSystem:
    """Parse ``{"n", "d", "fields": [...], "drift": {...}}``."""
    if not isinstance(doc, dict):
        raise SystemFormatError("$", "expected an object")
    for key in ("n", "d"):
        v = doc.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise SystemFormatError(key, "expected a positive integer")
    n, d = doc["n"], doc["d"]
    fields = doc.get("fields")
    if not isinstance(fields, list) or len(fields) != d:
        raise SystemFormatError("fields", f"expected a list of {d} fields")
    vfs = [_field_from_dict(f, n, f"fields[{i}]") for i, f in enumerate(fields)]
    drift = _field_from_dict(doc["drift"], n, "drift") if doc.get("drift") is not None \
        else VectorField.zero(n)
    return VectorFieldSystem(n, d, tuple(vfs), drift)


def system_to_dict(sys: VectorFieldSystem) -> dict:
    return {"n": sys.n, "d": sys.d, "fields": [f.to_dict() for f in sys.fields],
            "drift": sys.drift.to_dict()}


def load_system(path: str | Path) -> VectorFieldSystem:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SystemFormatError("$", f"invalid JSON ({exc})") from exc
    return system_from_dict(doc)
