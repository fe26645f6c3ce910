"""Compiled inner loops for polynomial vector-field systems.

A driving system is packed as ``exps`` (T, n) integer exponents and ``coefs``
(T, n, d) so that ``V(x)[k, i] = sum_t coefs[t, k, i] * x**exps[t]``.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True, inline="always")
def _monomials(exps, x, out):
    T, n = exps.shape
    for t in range(T):
        v = 1.0
        for j in range(n):
            xj = x[j]
            for _ in range(exps[t, j]):
                v *= xj
        out[t] = v


@njit(cache=True, nogil=True, inline="always")
def _monomial_grads(exps, x, out):
    T, n = exps.shape
    for t in range(T):
        for j in range(n):
            ej = exps[t, j]
            if ej == 0:
                out[t, j] = 0.0
                continue
            v = float(ej)
            xj = x[j]
            for _ in range(ej - 1):
                v *= xj
            for k in range(n):
                if k != j:
                    xk = x[k]
                    for _ in range(exps[t, k]):
                        v *= xk
            out[t, j] = v


@njit(cache=True, nogil=True, inline="always")
def field_matrix(exps, coefs, x, mono, out):
    """out[k, i] = V_i(x)^k."""
    T, n, d = coefs.shape
    _monomials(exps, x, mono)
    for k in range(n):
        for i in range(d):
            s = 0.0
            for t in range(T):
                s += coefs[t, k, i] * mono[t]
            out[k, i] = s


@njit(cache=True, nogil=True, inline="always")
def field_jacobians(exps, coefs, x, dmono, out):
    """out[k, j, i] = d V_i^k / d x_j."""
    T, n, d = coefs.shape
    _monomial_grads(exps, x, dmono)
    for k in range(n):
        for j in range(n):
            for i in range(d):
                s = 0.0
                for t in range(T):
                    s += coefs[t, k, i] * dmono[t, j]
                out[k, j, i] = s


@njit(cache=True, nogil=True, inline="always")
def _velocity(exps, coefs, y, u, mono, vm, out):
    field_matrix(exps, coefs, y, mono, vm)
    n, d = vm.shape
    for k in range(n):
        s = 0.0
        for i in range(d):
            s += vm[k, i] * u[i]
        out[k] = s


@njit(cache=True, nogil=True, inline="always")
def _generator(exps, coefs, y, u, dmono, dv, out):
    """out = sum_i grad V_i(y) u_i."""
    field_jacobians(exps, coefs, y, dmono, dv)
    n = dv.shape[0]
    d = dv.shape[2]
    for k in range(n):
        for j in range(n):
            s = 0.0
            for i in range(d):
                s += dv[k, j, i] * u[i]
            out[k, j] = s


@njit(cache=True, nogil=True)
def skeleton_rk4(exps, coefs, x0, J0, K0, slopes, dts, substeps):
    """Classical RK4 for the coupled (phi, J, K) system, constant control per segment.

    Returns node values at every substep boundary.
    """
    T, n, d = coefs.shape
    nseg = slopes.shape[0]
    M = nseg * substeps
    phi = np.empty((M + 1, n))
    J = np.empty((M + 1, n, n))
    K = np.empty((M + 1, n, n))
    phi[0] = x0
    J[0] = J0
    K[0] = K0
    mono = np.empty(T)
    dmono = np.empty((T, n))
    vm = np.empty((n, d))
    dv = np.empty((n, n, d))
    A = np.empty((n, n))
    kp = np.empty((4, n))
    kJ = np.empty((4, n, n))
    kK = np.empty((4, n, n))
    y = np.empty(n)
    Jy = np.empty((n, n))
    Ky = np.empty((n, n))
    m = 0
    for s in range(nseg):
        u = slopes[s]
        h = dts[s] / substeps
        for _ in range(substeps):
            for stage in range(4):
                if stage == 0:
                    c = 0.0
                elif stage == 3:
                    c = h
                else:
                    c = 0.5 * h
                if stage == 0:
                    y[:] = phi[m]
                    Jy[:, :] = J[m]
                    Ky[:, :] = K[m]
                else:
                    y[:] = phi[m] + c * kp[stage - 1]
                    Jy[:, :] = J[m] + c * kJ[stage - 1]
                    Ky[:, :] = K[m] + c * kK[stage - 1]
                _velocity(exps, coefs, y, u, mono, vm, kp[stage])
                _generator(exps, coefs, y, u, dmono, dv, A)
                kJ[stage] = A @ Jy
                kK[stage] = -(Ky @ A)
            phi[m + 1] = phi[m] + (h / 6.0) * (kp[0] + 2.0 * kp[1] + 2.0 * kp[2] + kp[3])
            J[m + 1] = J[m] + (h / 6.0) * (kJ[0] + 2.0 * kJ[1] + 2.0 * kJ[2] + kJ[3])
            K[m + 1] = K[m] + (h / 6.0) * (kK[0] + 2.0 * kK[1] + 2.0 * kK[2] + kK[3])
            m += 1
    return phi, J, K


@njit(cache=True, nogil=True)
def endpoint_forward(exps, coefs, x0, slopes, dts, substeps):
    """RK4 for phi alone. Returns node states (M+1, n) and stage inputs (M, 4, n)."""
    T, n, d = coefs.shape
    nseg = slopes.shape[0]
    M = nseg * substeps
    phi = np.empty((M + 1, n))
    stages = np.empty((M, 4, n))
    mono = np.empty(T)
    vm = np.empty((n, d))
    kp = np.empty((4, n))
    phi[0] = x0
    m = 0
    for s in range(nseg):
        u = slopes[s]
        h = dts[s] / substeps
        for _ in range(substeps):
            stages[m, 0] = phi[m]
            _velocity(exps, coefs, stages[m, 0], u, mono, vm, kp[0])
            stages[m, 1] = phi[m] + 0.5 * h * kp[0]
            _velocity(exps, coefs, stages[m, 1], u, mono, vm, kp[1])
            stages[m, 2] = phi[m] + 0.5 * h * kp[1]
            _velocity(exps, coefs, stages[m, 2], u, mono, vm, kp[2])
            stages[m, 3] = phi[m] + h * kp[2]
            _velocity(exps, coefs, stages[m, 3], u, mono, vm, kp[3])
            phi[m + 1] = phi[m] + (h / 6.0) * (kp[0] + 2.0 * kp[1] + 2.0 * kp[2] + kp[3])
            m += 1
    return phi, stages


@njit(cache=True, nogil=True)
def endpoint_backprop(exps, coefs, slopes, dts, substeps, stages, gnodes):
    """Reverse-mode sweep through ``endpoint_forward``.

    ``gnodes[m]`` is the cotangent injected at node m. Returns the cotangent of
    the slopes (nseg, d) and of the initial state (n,).
    """
    T, n, d = coefs.shape
    nseg = slopes.shape[0]
    mono = np.empty(T)
    dmono = np.empty((T, n))
    vm = np.empty((n, d))
    dv = np.empty((n, n, d))
    A = np.empty((n, n))
    ubar = np.zeros((nseg, d))
    ybar = gnodes[nseg * substeps].copy()
    kbar = np.empty((4, n))
    m = nseg * substeps
    for s in range(nseg - 1, -1, -1):
        u = slopes[s]
        h = dts[s] / substeps
        for _ in range(substeps):
            m -= 1
            kbar[0] = (h / 6.0) * ybar
            kbar[1] = (h / 3.0) * ybar
            kbar[2] = (h / 3.0) * ybar
            kbar[3] = (h / 6.0) * ybar
            acc = ybar.copy()
            for stage in range(3, -1, -1):
                y = stages[m, stage]
                field_matrix(exps, coefs, y, mono, vm)
                _generator(exps, coefs, y, u, dmono, dv, A)
                g = A.T @ kbar[stage]
                for i in range(d):
                    t = 0.0
                    for k in range(n):
                        t += vm[k, i] * kbar[stage, k]
                    ubar[s, i] += t
                acc += g
                if stage == 3:
                    kbar[2] += h * g
                elif stage == 2:
                    kbar[1] += 0.5 * h * g
                elif stage == 1:
                    kbar[0] += 0.5 * h * g
            ybar = acc + gnodes[m]
    return ubar, ybar


@njit(cache=True, nogil=True)
def wong_zakai_block(exps, coefs, dexps, dcoefs, x0, eps, dW, dt, shift, substeps, bound,
                     paths, store, ends, status):
    """RK4 along polygonal drivers eps*W + shift with drift eps^2 V0.

    ``dW`` (B, K, d) are Brownian increments over segments of length dt and
    ``shift`` (K, d) the increments of a deterministic path added to the
    driver.  status[b] is 1 when path b left the ball of radius ``bound`` or
    became non-finite.
    """
    T, n, d = coefs.shape
    T0 = dexps.shape[0]
    B, K, _ = dW.shape
    mono = np.empty(T)
    vm = np.empty((n, d))
    mono0 = np.empty(T0)
    vm0 = np.empty((n, 1))
    kp = np.empty((4, n))
    y = np.empty(n)
    ys = np.empty(n)
    u = np.empty(d)
    e2 = eps * eps
    h = dt / substeps
    for b in range(B):
        for k in range(n):
            y[k] = x0[k]
        status[b] = 0
        if store:
            for k in range(n):
                paths[b, 0, k] = x0[k]
        for j in range(K):
            for i in range(d):
                u[i] = (eps * dW[b, j, i] + shift[j, i]) / dt
            for _ in range(substeps):
                for stage in range(4):
                    if stage == 0:
                        c = 0.0
                    elif stage == 3:
                        c = h
                    else:
                        c = 0.5 * h
                    for k in range(n):
                        ys[k] = y[k] + c * kp[stage - 1, k] if stage > 0 else y[k]
                    field_matrix(exps, coefs, ys, mono, vm)
                    if T0 > 0:
                        field_matrix(dexps, dcoefs, ys, mono0, vm0)
                    for k in range(n):
                        s = e2 * vm0[k, 0] if T0 > 0 else 0.0
                        for i in range(d):
                            s += vm[k, i] * u[i]
                        kp[stage, k] = s
                for k in range(n):
                    y[k] += (h / 6.0) * (kp[0, k] + 2.0 * kp[1, k] + 2.0 * kp[2, k] + kp[3, k])
            ok = True
            for k in range(n):
                if not np.isfinite(y[k]) or abs(y[k]) > bound:
                    ok = False
            if not ok:
                status[b] = 1
                break
            if store:
                for k in range(n):
                    paths[b, j + 1, k] = y[k]
        for k in range(n):
            ends[b, k] = y[k]
