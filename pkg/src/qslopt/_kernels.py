"""Compiled propagation kernels for real symmetric tridiagonal Hamiltonians.

Both bundled models share this structure: a constant off-diagonal coupling
and a diagonal that depends on the controls. Every control derivative is
therefore a diagonal operator, which keeps the exact step-averaged gradient
cheap to evaluate.

Model kinds
-----------
KIND_LZ    : dim 2, params = [omega], controls = [Gamma]
KIND_CHAIN : dim N, params = [J],     controls = [C, d]

``shift`` is a per-node scalar added to every diagonal entry (c(t) * I).
"""
from __future__ import annotations

import numpy as np
from numba import njit

KIND_LZ = 0
KIND_CHAIN = 1


@njit(cache=True)
def fill_diagonal(kind, params, x, shift, out):
    n = out.shape[0]
    if kind == KIND_LZ:
        out[0] = x[0] + shift
        out[1] = -x[0] + shift
    else:
        J = params[0]
        C = x[0]
        d = x[1]
        for m in range(n):
            z = 2.0
            if m == 0 or m == n - 1:
                z = 1.0
            out[m] = C * (m - d) ** 2 + J * z + shift


@njit(cache=True)
def offdiagonal(kind, params):
    if kind == KIND_LZ:
        return params[0]
    return -params[0]


@njit(cache=True)
def fill_derivatives(kind, params, x, out):
    """out[k, m] = d diag_m / d x_k."""
    n = out.shape[1]
    if kind == KIND_LZ:
        out[0, 0] = 1.0
        out[0, 1] = -1.0
    else:
        C = x[0]
        d = x[1]
        for m in range(n):
            out[0, m] = (m - d) ** 2
            out[1, m] = -2.0 * C * (m - d)


@njit(cache=True)
def tridiag_eigh(diag, off, E, Q):
    n = diag.shape[0]
    if n == 2:
        a = diag[0]
        c = diag[1]
        mean = 0.5 * (a + c)
        h = 0.5 * (a - c)
        r = np.hypot(h, off)
        th = 0.5 * np.arctan2(off, h)
        cs = np.cos(th)
        sn = np.sin(th)
        E[0] = mean - r
        E[1] = mean + r
        Q[0, 0] = -sn
        Q[1, 0] = cs
        Q[0, 1] = cs
        Q[1, 1] = sn
        return
    H = np.zeros((n, n))
    for m in range(n):
        H[m, m] = diag[m]
        if m + 1 < n:
            H[m, m + 1] = off
            H[m + 1, m] = off
    w, v = np.linalg.eigh(H)
    E[:] = w
    Q[:, :] = v


@njit(cache=True)
def apply_step(E, Q, dt, sign, vin, vout, tmp):
    """vout = Q exp(-i*sign*E*dt) Q^T vin; sign=+1 forward, -1 adjoint."""
    n = E.shape[0]
    for a in range(n):
        s = 0.0 + 0.0j
        for m in range(n):
            s += Q[m, a] * vin[m]
        ph = -sign * E[a] * dt
        tmp[a] = s * (np.cos(ph) + 1j * np.sin(ph))
    for m in range(n):
        s = 0.0 + 0.0j
        for a in range(n):
            s += Q[m, a] * tmp[a]
        vout[m] = s


@njit(cache=True)
def step_gradient(E, Q, dt, dvs, chi, psi, out, ct, pt, G, R):
    """out[k] = Im <chi| Vbar_k |psi> for diagonal derivatives dvs[k].

    Vbar is the derivative operator averaged over the step,
    (1/dt) int_0^dt exp(iHs) V exp(-iHs) ds, which makes the result the
    exact derivative of the piecewise-constant propagator. In the eigenbasis
    Vbar_ab = V_ab F_ab with F_ab = (exp(i x) - 1) / (i x), x = (E_a - E_b) dt.
    For diagonal V only Im(conj(chi_a) F_ab psi_b) is needed, so a single real
    matrix product carries the O(n^3) work.
    """
    n = E.shape[0]
    K = dvs.shape[0]
    for a in range(n):
        s1 = 0.0 + 0.0j
        s2 = 0.0 + 0.0j
        for m in range(n):
            s1 += Q[m, a] * chi[m]
            s2 += Q[m, a] * psi[m]
        ct[a] = np.conj(s1)
        pt[a] = s2
    for a in range(n):
        G[a, a] = (ct[a] * pt[a]).imag
        for b in range(a + 1, n):
            xab = (E[a] - E[b]) * dt
            if abs(xab) < 1e-5:
                f = 1.0 + 0.5j * xab - xab * xab / 6.0
            else:
                f = (np.cos(xab) - 1.0 + 1j * np.sin(xab)) / (1j * xab)
            G[a, b] = (ct[a] * f * pt[b]).imag
            G[b, a] = (ct[b] * np.conj(f) * pt[a]).imag
    R[:, :] = np.dot(Q, G)
    for k in range(K):
        out[k] = 0.0
    for m in range(n):
        sm = 0.0
        for b in range(n):
            sm += R[m, b] * Q[m, b]
        for k in range(K):
            out[k] += dvs[k, m] * sm


@njit(cache=True)
def eig_all(kind, params, x, shift, E, Q):
    M = E.shape[0]
    n = E.shape[1]
    diag = np.empty(n)
    off = offdiagonal(kind, params)
    for j in range(M):
        fill_diagonal(kind, params, x[:, j], shift[j], diag)
        tridiag_eigh(diag, off, E[j], Q[j])


@njit(cache=True)
def forward(E, Q, dt, psi0, traj):
    tmp = np.empty(psi0.shape[0], dtype=np.complex128)
    traj[0, :] = psi0
    for j in range(E.shape[0]):
        apply_step(E[j], Q[j], dt, 1.0, traj[j], traj[j + 1], tmp)


@njit(cache=True)
def backward(E, Q, dt, chiT, traj):
    M = E.shape[0]
    tmp = np.empty(chiT.shape[0], dtype=np.complex128)
    traj[M, :] = chiT
    for j in range(M - 1, -1, -1):
        apply_step(E[j], Q[j], dt, -1.0, traj[j + 1], traj[j], tmp)


@njit(cache=True)
def sequential_sweep(kind, params, x_old, shift, dt, shape, inv_lam, bounds,
                     psi0, chi, E_old, Q_old, x_new, psi, E_new, Q_new):
    """One immediate-feedback pass; returns False on a non-finite update."""
    K = x_old.shape[0]
    M = E_old.shape[0]
    n = psi0.shape[0]
    dvs = np.empty((K, n))
    g = np.empty(K)
    diag = np.empty(n)
    tmp = np.empty(n, dtype=np.complex128)
    ct = np.empty(n, dtype=np.complex128)
    pt = np.empty(n, dtype=np.complex128)
    G = np.empty((n, n))
    R = np.empty((n, n))
    off = offdiagonal(kind, params)
    x_new[:, :] = x_old
    psi[0, :] = psi0
    for j in range(M):
        if shape[j] != 0.0:
            fill_derivatives(kind, params, x_old[:, j], dvs)
            step_gradient(E_old[j], Q_old[j], dt, dvs, chi[j], psi[j], g,
                          ct, pt, G, R)
            for k in range(K):
                v = x_old[k, j] + shape[j] * inv_lam[k] * g[k]
                if not np.isfinite(v):
                    return False
                if v < bounds[k, 0]:
                    v = bounds[k, 0]
                elif v > bounds[k, 1]:
                    v = bounds[k, 1]
                x_new[k, j] = v
            fill_diagonal(kind, params, x_new[:, j], shift[j], diag)
            tridiag_eigh(diag, off, E_new[j], Q_new[j])
        else:
            E_new[j, :] = E_old[j]
            Q_new[j, :, :] = Q_old[j]
        apply_step(E_new[j], Q_new[j], dt, 1.0, psi[j], psi[j + 1], tmp)
    return True


@njit(cache=True)
def trajectory_gradient(kind, params, x, E, Q, dt, chi, psi, out):
    """out[k, j] = Im <chi_j| Vbar_k |psi_j> for a frozen pulse."""
    K = x.shape[0]
    n = psi.shape[1]
    dvs = np.empty((K, n))
    g = np.empty(K)
    ct = np.empty(n, dtype=np.complex128)
    pt = np.empty(n, dtype=np.complex128)
    G = np.empty((n, n))
    R = np.empty((n, n))
    for j in range(E.shape[0]):
        fill_derivatives(kind, params, x[:, j], dvs)
        step_gradient(E[j], Q[j], dt, dvs, chi[j], psi[j], g, ct, pt, G, R)
        out[:, j] = g
