"""Compiled selective-scan recurrence (forward and chunk-recomputing backward).

Shapes: u, delta ``[N, L, d]``; A ``[d, n]``; Bm, Cm ``[N, L, n]``; D ``[d]``.
The sequence is processed in chunks.  Per chunk the decay factors
``exp(delta * A)`` are evaluated by numpy into a reused buffer (vectorised
exp is several times faster than a scalar one inside the kernel) and the
compiled kernel runs the recurrence.  The forward pass keeps only the hidden
state at chunk boundaries; the backward pass rebuilds each chunk's states
from its boundary, so memory stays ``O(N * L / chunk * d * n)`` and the work
stays linear in ``L``.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _forward_chunk(a, u, delta, Bm, Cm, D, h, y, t0):
    nb, T, d, n = a.shape
    for b in range(nb):
        for c in range(d):
            for i in range(T):
                t = t0 + i
                dt = delta[b, t, c]
                ut = u[b, t, c]
                acc = 0.0
                for s in range(n):
                    v = a[b, i, c, s] * h[b, c, s] + dt * Bm[b, t, s] * ut
                    h[b, c, s] = v
                    acc += Cm[b, t, s] * v
                y[b, t, c] = acc + D[c] * ut


@njit(cache=True)
def _backward_chunk(a, gy, u, delta, A, Bm, Cm, D, h0, carry,
                    du, ddelta, dA, dB, dC, dD, t0, hbuf):
    nb, T, d, n = a.shape
    for b in range(nb):
        for c in range(d):
            Ac = A[c]
            for s in range(n):
                hbuf[0, s] = h0[b, c, s]
            for i in range(T):
                t = t0 + i
                dt = delta[b, t, c]
                ut = u[b, t, c]
                for s in range(n):
                    hbuf[i + 1, s] = a[b, i, c, s] * hbuf[i, s] + dt * Bm[b, t, s] * ut
            for i in range(T - 1, -1, -1):
                t = t0 + i
                dt = delta[b, t, c]
                ut = u[b, t, c]
                gyt = gy[b, t, c]
                dD[c] += gyt * ut
                gu = D[c] * gyt
                gdt = 0.0
                for s in range(n):
                    g = carry[b, c, s] + gyt * Cm[b, t, s]
                    dC[b, t, s] += gyt * hbuf[i + 1, s]
                    at = a[b, i, c, s]
                    bs = Bm[b, t, s]
                    gu += g * dt * bs
                    dB[b, t, s] += g * dt * ut
                    gh = g * hbuf[i, s] * at
                    gdt += g * bs * ut + gh * Ac[s]
                    dA[c, s] += gh * dt
                    carry[b, c, s] = g * at
                du[b, t, c] = gu
                ddelta[b, t, c] = gdt


@njit(cache=True)
def _fill_delta_a(delta, A, t0, a):
    nb, T, d, n = a.shape
    for b in range(nb):
        for i in range(T):
            for c in range(d):
                dt = delta[b, t0 + i, c]
                for s in range(n):
                    a[b, i, c, s] = dt * A[c, s]


def _decay(delta, A, t0, t1, buf):
    a = buf[:, : t1 - t0]
    _fill_delta_a(delta, A, t0, a)
    np.exp(a, out=a)
    return a


def scan_forward(u, delta, A, Bm, Cm, D, chunk, save):
    """Return ``y`` and, when ``save``, the states at every chunk start."""
    nb, L, d = u.shape
    n = A.shape[1]
    nchunks = (L + chunk - 1) // chunk
    y = np.empty_like(u)
    h = np.zeros((nb, d, n), dtype=u.dtype)
    hs = np.empty((nchunks, nb, d, n), dtype=u.dtype) if save else None
    buf = np.empty((nb, min(chunk, L), d, n), dtype=u.dtype)
    for k in range(nchunks):
        t0, t1 = k * chunk, min(L, (k + 1) * chunk)
        if save:
            hs[k] = h
        _forward_chunk(_decay(delta, A, t0, t1, buf), u, delta, Bm, Cm, D, h, y, t0)
    return y, hs


def scan_backward(gy, u, delta, A, Bm, Cm, D, hs, chunk):
    nb, L, d = u.shape
    n = A.shape[1]
    du = np.empty_like(u)
    ddelta = np.empty_like(u)
    dA = np.zeros_like(A)
    dB = np.zeros_like(Bm)
    dC = np.zeros_like(Cm)
    dD = np.zeros_like(D)
    carry = np.zeros((nb, d, n), dtype=u.dtype)
    buf = np.empty((nb, min(chunk, L), d, n), dtype=u.dtype)
    hbuf = np.empty((min(chunk, L) + 1, n), dtype=u.dtype)
    for k in range(hs.shape[0] - 1, -1, -1):
        t0, t1 = k * chunk, min(L, (k + 1) * chunk)
        _backward_chunk(_decay(delta, A, t0, t1, buf), gy, u, delta, A, Bm, Cm, D, hs[k],
                        carry, du, ddelta, dA, dB, dC, dD, t0, hbuf)
    return du, ddelta, dA, dB, dC, dD
