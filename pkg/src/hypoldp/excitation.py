"""Excitation controls that restore non-degeneracy of the skeleton covariance.

Short coordinate pulses are chained and followed by their time reversal.  The
chain leaves the skeleton, its Jacobian and the inverse Jacobian where it
started, but its presence makes the deterministic covariance invertible.  The
chain ``k^tau`` is prepended to a control after squeezing the original
control into the remaining time.

Driving-field indices are 0-based throughout this module.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .skeleton import (CMPath, CovarianceReport, concat, covariance, reparametrize, reverse,
                       solve_skeleton)
from .vectorfields import (BracketWord, HormanderCertificate, VectorFieldSystem,
                           estimate_constants, hormander_degree, lie_bracket)

__all__ = [
    "ExcitationError",
    "ExcitationSchedule",
    "DirectionalResult",
    "CertifyResult",
    "elementary_path",
    "excursion",
    "schedule",
    "build_ktau",
    "perturb",
    "directional_excitation",
    "induction_bound",
    "initial_tau",
    "certify_nondegenerate",
]


class ExcitationError(RuntimeError):
    pass


def elementary_path(tau: float, i: int, kappa: int, d: int) -> CMPath:
    """Single pulse of length tau with derivative kappa * e_i."""
    if not 0 <= i < d:
        raise ValueError(f"index {i} outside 0..{d - 1}")
    if kappa not in (1, -1):
        raise ValueError("kappa must be +1 or -1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    slope = np.zeros((1, d))
    slope[0, i] = kappa
    return CMPath(np.array([0.0, tau]), slope)


def excursion(h: CMPath) -> CMPath:
    """h followed by its reversal; ends at 0 and returns the skeleton to its start."""
    return concat(h, reverse(h))


@dataclass(frozen=True)
class ExcitationSchedule:
    tau: float
    N: int
    d: int
    taus: tuple
    lam: float
    M: float
    beta: float

    @property
    def partial_sums(self) -> np.ndarray:
        """T_l = tau_1 + ... + tau_l for l = 0..N-1."""
        return np.concatenate([[0.0], np.cumsum(self.taus)])

    @property
    def n_excursions(self) -> int:
        return (2 * self.d) ** (self.N - 1) if self.N > 1 else 0

    def excursion_boundaries(self) -> np.ndarray:
        span = 2.0 * self.partial_sums[-1]
        return span * np.arange(1, self.n_excursions + 1)

    def tuples(self) -> list[tuple]:
        """All ((i_1, kappa_1), ..., (i_{N-1}, kappa_{N-1})) in concatenation order."""
        if self.N <= 1:
            return []
        letters = [(i, k) for i in range(self.d) for k in (1, -1)]
        return list(itertools.product(letters, repeat=self.N - 1))

    def to_dict(self) -> dict:
        return {"tau": self.tau, "N": self.N, "d": self.d, "taus": list(self.taus),
                "lambda": self.lam, "M": self.M, "beta": self.beta,
                "T": list(self.partial_sums[1:]), "excursions": self.n_excursions}


def schedule(cert: HormanderCertificate, tau: float, d: int) -> ExcitationSchedule:
    """tau_1 = tau and tau_l = 2 (lambda tau / 4M)^(2^(l-2)) for 2 <= l <= N-1."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    N = cert.degree
    M = cert.lipschitz if cert.lipschitz else 0.0
    taus = []
    if N >= 2:
        taus.append(float(tau))
        for l in range(2, N):
            if M <= 0:
                raise ExcitationError("Lipschitz bound M must be positive for degree >= 3")
            taus.append(2.0 * (cert.lam * tau / (4.0 * M)) ** (2 ** (l - 2)))
    beta = 2.0 * sum(taus) * (2 * d) ** (N - 1) if N >= 2 else 0.0
    return ExcitationSchedule(float(tau), N, d, tuple(taus), cert.lam, M, beta)


def _chain(tup, taus, d) -> CMPath:
    pieces = [elementary_path(t, i, k, d) for (i, k), t in zip(tup, taus)]
    out = pieces[0]
    for p in pieces[1:]:
        out = concat(out, p)
    return out


def build_ktau(cert: HormanderCertificate, tau: float, d: int) -> tuple[CMPath, ExcitationSchedule]:
    """Concatenate the excursions of every pulse chain, lexicographic order, kappa=+1 first."""
    sch = schedule(cert, tau, d)
    if sch.N <= 1:
        return CMPath.empty(d), sch
    if sch.beta >= 1.0:
        raise ExcitationError(f"total excitation length beta={sch.beta:.4g} must be < 1")
    if cert.horizon is not None and sch.partial_sums[-1] > cert.horizon:
        raise ExcitationError(
            f"T_(N-1)={sch.partial_sums[-1]:.4g} exceeds the horizon T={cert.horizon:.4g}")
    grids, slopes = [0.0], []
    t = 0.0
    for tup in sch.tuples():
        ex = excursion(_chain(tup, sch.taus, d))
        for dt, s in zip(ex.dts, ex.slopes):
            t += dt
            grids.append(t)
            slopes.append(s)
    return CMPath(np.array(grids), np.array(slopes)), sch


def perturb(h: CMPath, ktau: CMPath, beta: float | None = None) -> CMPath:
    """k^tau on [0, beta], then h squeezed onto [beta, T]."""
    if ktau.is_empty:
        return h
    beta = ktau.horizon if beta is None else beta
    if abs(beta - ktau.horizon) > 1e-12:
        raise ValueError("beta must equal the excitation length")
    if beta >= h.horizon:
        raise ValueError("excitation is longer than the control horizon")
    return concat(ktau, reparametrize(h, h.horizon - beta))


def induction_bound(lam: float, M: float, tau: float, N: int) -> float:
    """Lower bound on the final pulse value: lambda tau for N=2, 4M (lambda tau/4M)^(2^(N-2)) beyond."""
    if N <= 1:
        return lam
    if N == 2:
        return lam * tau
    return 4.0 * M * (lam * tau / (4.0 * M)) ** (2 ** (N - 2))


@dataclass(frozen=True)
class DirectionalResult:
    path: CMPath
    value: float
    bound: float
    word: BracketWord
    letters: tuple

    @property
    def achieved(self) -> bool:
        return self.value >= self.bound


def directional_excitation(sys: VectorFieldSystem, cert: HormanderCertificate, v,
                           tau: float, substeps: int = 32) -> DirectionalResult:
    """Pulse chain eta pushing <v, Q^U> away from zero down the bracket word of v.

    The word W_j of the frame maximising |<v, W_j(x)>| is peeled one letter at
    a time: driving by V_{j_l} moves <v, Q^{U_(l+1)}> at rate kappa <v, Q^{U_l}>,
    and kappa is chosen so that the running value grows in absolute value.
    Words shorter than N are padded with their last letter, which keeps the
    final Q constant because [V_j, V_j] = 0.
    """
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    x = cert.point
    N = cert.degree
    sch = schedule(cert, tau, sys.d)
    F = cert.frame_matrix
    j = int(np.argmax(np.abs(v @ F)))
    word = cert.frame[j]
    letters = word.word
    # U_l = [V_{j_l}, [..., V_{j_k}]]; U_{k} is the plain field
    suffixes = [_suffix_field(sys, letters[l:]) for l in range(len(letters))]
    chosen = []
    h = CMPath.empty(sys.d)
    for l in range(N - 1):
        if l + 1 < len(letters):
            traj = solve_skeleton(sys, x, h, substeps)
            Kend, pend = traj.Kinv[-1], traj.phi[-1]
            a = v @ (Kend @ suffixes[l](pend))
            b = v @ (Kend @ suffixes[l + 1](pend))
            kappa = 1 if (a >= 0) == (b >= 0) else -1
            letter = (letters[l], kappa)
        else:
            letter = (letters[-1], 1)
        chosen.append(letter)
        h = concat(h, elementary_path(sch.taus[l], letter[0], letter[1], sys.d))
    traj = solve_skeleton(sys, x, h, substeps)
    value = abs(v @ (traj.Kinv[-1] @ suffixes[-1](traj.phi[-1])))
    return DirectionalResult(h, float(value), induction_bound(cert.lam, sch.M, tau, N), word,
                             tuple(chosen))


def _suffix_field(sys, letters):
    fld = sys.fields[letters[-1]]
    for j in reversed(letters[:-1]):
        fld = lie_bracket(sys.fields[j], fld)
    return fld


@dataclass(frozen=True)
class CertifyResult:
    h_beta: CMPath
    report: CovarianceReport
    before: CovarianceReport
    schedule: ExcitationSchedule | None
    floor: float
    endpoint_shift: float
    attempts: int

    @property
    def certified(self) -> bool:
        return self.report.min_eig > self.floor


def _floor(rep: CovarianceReport, rel: float) -> float:
    n = rep.sigma.shape[0]
    return rel * float(np.trace(rep.sigma)) / n


def initial_tau(cert: HormanderCertificate, safety: float = 1.0) -> float:
    T = cert.horizon if cert.horizon else 1.0
    return min(0.02, T / (2 * max(cert.degree, 1))) * safety


def certify_nondegenerate(sys: VectorFieldSystem, x0, h: CMPath, tau: float | None = None,
                          cert: HormanderCertificate | None = None, substeps: int = 32,
                          rel_floor: float = 1e-10, max_halvings: int = 8) -> CertifyResult:
    """Return h^beta with non-degenerate covariance and the same endpoint as h."""
    x0 = np.asarray(x0, dtype=float)
    if cert is None:
        cert = estimate_constants(sys, hormander_degree(sys, x0))
    elif cert.horizon is None:
        cert = estimate_constants(sys, cert)
    base = solve_skeleton(sys, x0, h, substeps)
    before = covariance(sys, base)
    if before.min_eig > _floor(before, rel_floor) or cert.degree <= 1:
        return CertifyResult(h, before, before, None, _floor(before, rel_floor), 0.0, 0)
    tau = initial_tau(cert) if tau is None else tau
    last = None
    for attempt in range(max_halvings + 1):
        try:
            ktau, sch = build_ktau(cert, tau, sys.d)
        except ExcitationError:
            tau *= 0.5
            continue
        hb = perturb(h, ktau)
        traj = solve_skeleton(sys, x0, hb, substeps)
        rep = covariance(sys, traj)
        shift = float(np.linalg.norm(traj.end - base.end))
        last = CertifyResult(hb, rep, before, sch, _floor(rep, rel_floor), shift, attempt + 1)
        if last.certified:
            return last
        tau *= 0.5
    if last is None:
        raise ExcitationError("no admissible tau found")
    return last
