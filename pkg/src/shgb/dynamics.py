"""Beam-parameter ODEs on a fixed surface, SSP-RK3 stepping and hop-time location.

All routines work on a batch of trajectories at once: a :class:`DynamicState`
holds arrays with a leading trajectory axis, and surfaces are given as flat
extended indices (``k < n`` plain, ``k >= n`` conjugated).

Trajectories on conjugated surfaces are stored by the complex conjugate of
their beam, so their parameters always evolve under the plain coefficients of
the base surface.  Only the leave rate, which reads a column of the extended
coupling matrix, depends on the conjugation flag.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Optional

import numba
import numpy as np

from .beam import GaussianBeam, symmetrize

__all__ = [
    "DynamicState",
    "IntegrationError",
    "rhs",
    "rk3_step",
    "leave_rates",
    "survival_bracket",
    "HopBracket",
    "refine_hop_time",
    "hermite_crossing",
    "default_dt",
]

HOP_TOL = 1e-10


def default_dt(epsilon):
    return min(0.01, epsilon / 4.0)


class IntegrationError(ArithmeticError):
    """Raised when a step leaves the admissible beam manifold (M not PD, non-finite).

    ``index`` is the position of the first offending trajectory in the batch.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass
class DynamicState:
    """A batch of beams with log-weights ``omega`` and clocks ``t``.

    Array shapes: ``X, P`` (B, m); ``M, N`` (B, m, m); ``S, t`` (B,);
    ``A, omega`` (B,) complex.
    """

    X: np.ndarray
    P: np.ndarray
    S: np.ndarray
    A: np.ndarray
    M: np.ndarray
    N: np.ndarray
    omega: np.ndarray
    t: np.ndarray

    @classmethod
    def from_beam(cls, beam, omega=0.0, t=0.0):
        return cls(
            X=beam.X[None].copy(),
            P=beam.P[None].copy(),
            S=np.array([beam.S]),
            A=np.array([beam.A], dtype=complex),
            M=beam.M[None].copy(),
            N=beam.N[None].copy(),
            omega=np.array([omega], dtype=complex),
            t=np.array([float(t)]),
        )

    @classmethod
    def empty(cls, size, m):
        return cls(
            X=np.zeros((size, m)),
            P=np.zeros((size, m)),
            S=np.zeros(size),
            A=np.zeros(size, dtype=complex),
            M=np.zeros((size, m, m)),
            N=np.zeros((size, m, m)),
            omega=np.zeros(size, dtype=complex),
            t=np.zeros(size),
        )

    def __len__(self):
        return self.S.shape[0]

    @property
    def m(self):
        return self.X.shape[1]

    def beam(self, k=0):
        return GaussianBeam(self.M[k], self.N[k], self.X[k], self.P[k], self.S[k], self.A[k])

    def take(self, idx):
        return DynamicState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def put(self, idx, other):
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def copy(self):
        return DynamicState(**{f.name: np.array(getattr(self, f.name), copy=True) for f in fields(self)})

    def axpy(self, h, d):
        """Return ``self + h * d`` for the evolving fields (``t`` unchanged)."""
        h = np.asarray(h, dtype=float)
        h1 = h[:, None]
        h2 = h[:, None, None]
        return DynamicState(
            X=self.X + h1 * d.X,
            P=self.P + h1 * d.P,
            S=self.S + h * d.S,
            A=self.A + h * d.A,
            M=self.M + h2 * d.M,
            N=self.N + h2 * d.N,
            omega=self.omega + h * d.omega,
            t=self.t,
        )

    def combine(self, a, other, b):
        """Return ``a * self + b * other`` for the evolving fields."""
        return DynamicState(
            X=a * self.X + b * other.X,
            P=a * self.P + b * other.P,
            S=a * self.S + b * other.S,
            A=a * self.A + b * other.A,
            M=a * self.M + b * other.M,
            N=a * self.N + b * other.N,
            omega=a * self.omega + b * other.omega,
            t=self.t,
        )


def _surface_array(sys, surface, size):
    if hasattr(surface, "base_surface"):
        surface = surface.flat(sys.n)
    k = np.broadcast_to(np.asarray(surface, dtype=np.int64), (size,))
    if k.size and (k.min() < 0 or k.max() >= sys.n_extended):
        raise IndexError(f"surface index out of range for {sys.n_extended} surfaces")
    return k


def leave_rates(sys, surface, t, X):
    """Total hop rate ``sum_{j != k} |G[j, k]|`` out of extended surface ``k``.

    The sum runs over rows in index order so that every code path that reads
    the same column produces the same bits.
    """
    X = np.atleast_2d(X)
    k = _surface_array(sys, surface, X.shape[0])
    G = sys.extended_coupling(t, X)
    return _column_rates(G, k)


def _column_rates(G, k):
    rate = np.empty(G.shape[0])
    _column_rates_kernel(np.asarray(G, dtype=complex), k, rate)
    return rate


@numba.njit(cache=True)
def _column_rates_kernel(G, k, rate):
    for b in range(k.shape[0]):
        col = k[b]
        tot = 0.0
        for j in range(G.shape[1]):
            if j != col:
                tot = tot + abs(G[b, j, col])
        rate[b] = tot


def rhs(sys, surface, t, state):
    """Time derivative of every evolving field in ``state``.

    ``surface`` is a flat extended index (scalar or per trajectory) or an
    :class:`~shgb.problems.ExtendedIndex`.  The returned ``omega`` derivative is
    the real leave rate; the imaginary part only changes at hops.
    """
    B = len(state)
    k = _surface_array(sys, surface, B)
    base = k % sys.n
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    alpha, J, hpa, beta, gbeta, hbeta, G = sys.coefficients(t, state.X, state.P)
    out = DynamicState.empty(B, state.m)
    rate = np.empty(B)
    _assemble(
        np.asarray(alpha, dtype=float), np.asarray(J, dtype=float),
        np.asarray(hpa, dtype=float), np.asarray(beta, dtype=float),
        np.asarray(gbeta, dtype=float), np.asarray(hbeta, dtype=float),
        np.asarray(G, dtype=complex), k, base,
        state.M, state.N, state.P, state.A,
        out.X, out.P, out.S, out.A, out.M, out.N, rate,
    )
    out.omega = rate.astype(complex)
    out.t = np.ones(B)
    return out


@numba.njit(cache=True)
def _assemble(alpha, J, hpa, beta, gbeta, hbeta, G, k, base, M, N, P, A,
              dX, dP, dS, dA, dM, dN, rate):
    B = k.shape[0]
    m = M.shape[1]
    ne = G.shape[1]
    for b in range(B):
        s = base[b]
        dS[b] = beta[b, s]
        dA[b] = G[b, s, s] * A[b]
        for i in range(m):
            dX[b, i] = alpha[b, s, i]
            acc = gbeta[b, s, i]
            for j in range(m):
                acc -= J[b, s, j, i] * P[b, j]
            dP[b, i] = acc
        for i in range(m):
            for j in range(m):
                am = 0.0
                an = 0.0
                for q in range(m):
                    # (M J)_ij + (J^T M)_ij
                    am += M[b, i, q] * J[b, s, q, j] + J[b, s, q, i] * M[b, q, j]
                    an += N[b, i, q] * J[b, s, q, j] + J[b, s, q, i] * N[b, q, j]
                dM[b, i, j] = -am
                dN[b, i, j] = hpa[b, s, i, j] - hbeta[b, s, i, j] - an
        # leave rate, summed over rows in index order
        col = k[b]
        tot = 0.0
        for j in range(ne):
            if j != col:
                tot = tot + abs(G[b, j, col])
        rate[b] = tot


def _check_pd(sys, surface, state, t0, h):
    M = state.M
    ok = np.all(np.isfinite(M), axis=(1, 2)) & np.all(np.isfinite(state.X), axis=1)
    ok &= np.isfinite(state.A.real) & np.isfinite(state.A.imag) & np.isfinite(state.S)
    if state.m == 1:
        ok &= M[:, 0, 0] > 0
    elif state.m == 2:
        ok &= (M[:, 0, 0] > 0) & (M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] ** 2 > 0)
    else:
        try:
            np.linalg.cholesky(np.where(ok[:, None, None], M, np.eye(state.m)))
        except np.linalg.LinAlgError:
            # locate the offending beams one by one
            for b in np.flatnonzero(ok):
                try:
                    np.linalg.cholesky(M[b])
                except np.linalg.LinAlgError:
                    ok[b] = False
    if not ok.all():
        b = int(np.flatnonzero(~ok)[0])
        raise IntegrationError(
            f"M lost positive definiteness (or the state became non-finite) "
            f"in the step from t={float(np.atleast_1d(t0)[b]):.17g} with "
            f"dt={float(np.atleast_1d(h)[b]):.3g} on surface {int(np.atleast_1d(surface)[b])}: "
            f"M={M[b].tolist()}, X={state.X[b].tolist()}",
            b,
        )


def rk3_step(sys, surface, state, dt, k1=None):
    """One Shu-Osher SSP-RK3 step of size ``dt`` (scalar or per trajectory).

    ``k1`` may carry a precomputed ``rhs`` at the start of the step.  ``M`` and
    ``N`` are re-symmetrized afterwards and ``M`` is checked to stay positive
    definite.
    """
    B = len(state)
    h = np.broadcast_to(np.asarray(dt, dtype=float), (B,)).copy()
    if np.any(h < 0):
        raise ValueError("dt must be nonnegative")
    t0 = state.t
    if k1 is None:
        k1 = rhs(sys, surface, t0, state)
    y1 = state.axpy(h, k1)
    k2 = rhs(sys, surface, t0 + h, y1)
    y2 = state.combine(0.75, y1.axpy(h, k2), 0.25)
    k3 = rhs(sys, surface, t0 + 0.5 * h, y2)
    out = state.combine(1.0 / 3.0, y2.axpy(h, k3), 2.0 / 3.0)
    out.M = symmetrize(out.M)
    out.N = symmetrize(out.N)
    out.t = t0 + h
    _check_pd(sys, surface, out, t0, h)
    return out


class HopBracket(NamedTuple):
    t0: float
    t1: float
    omega0: float
    omega1: float
    threshold: float


def hop_threshold(omega_tilde, Y):
    """Value of Re(omega) at which ``exp(omega_tilde - Re omega) = 1 - Y``."""
    return omega_tilde - np.log1p(-np.asarray(Y, dtype=float))


def survival_bracket(state_before, state_after, omega_tilde, Y):
    """Return a :class:`HopBracket` if the survival factor drops to ``1 - Y`` in the step.

    Works on single-trajectory states; see :func:`crossed` for batches.
    """
    w0 = float(np.real(state_before.omega[0]))
    w1 = float(np.real(state_after.omega[0]))
    thr = float(hop_threshold(omega_tilde, Y))
    if w1 < thr:
        return None
    return HopBracket(float(state_before.t[0]), float(state_after.t[0]), w0, w1, thr)


def crossed(omega_after, omega_tilde, Y):
    return np.real(omega_after) >= hop_threshold(omega_tilde, Y)


def hermite_crossing(h, w0, w1, r0, r1, target, iters=60):
    """Solve ``H(s) = target`` for the monotone cubic Hermite interpolant on ``[0, h]``.

    ``H`` matches values ``w0, w1`` and slopes ``r0, r1`` (limited with the
    Fritsch-Carlson rule so that ``H`` is monotone).  Vectorized over arrays.
    Returns ``s`` in ``[0, h]``.
    """
    h, w0, w1, r0, r1, target = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (h, w0, w1, r0, r1, target))
    )
    dw = w1 - w0
    flat = dw <= 0
    delta = np.where(flat, 1.0, dw / np.where(h > 0, h, 1.0))
    a = np.where(flat, 0.0, np.maximum(r0, 0.0) / delta)
    b = np.where(flat, 0.0, np.maximum(r1, 0.0) / delta)
    norm = np.hypot(a, b)
    tau = np.where(norm > 3.0, 3.0 / np.where(norm > 0, norm, 1.0), 1.0)
    m0 = tau * a * dw  # slopes times h, in units of the unit interval
    m1 = tau * b * dw

    def H(u):
        u2 = u * u
        u3 = u2 * u
        return (2 * u3 - 3 * u2 + 1) * w0 + (u3 - 2 * u2 + u) * m0 + (-2 * u3 + 3 * u2) * w1 + (u3 - u2) * m1

    def dH(u):
        u2 = u * u
        return (6 * u2 - 6 * u) * w0 + (3 * u2 - 4 * u + 1) * m0 + (-6 * u2 + 6 * u) * w1 + (3 * u2 - 2 * u) * m1

    lo = np.zeros_like(h)
    hi = np.ones_like(h)
    u = np.where(flat, 0.0, np.clip((target - w0) / np.where(flat, 1.0, dw), 0.0, 1.0))
    scale = 4e-16 * np.maximum(np.abs(target), 1.0)
    for _ in range(iters):
        f = H(u) - target
        lo = np.where(f <= 0, u, lo)
        hi = np.where(f > 0, u, hi)
        if np.all((np.abs(f) <= scale) | (hi - lo <= 1e-15) | flat):
            break
        d = dH(u)
        un = u - f / np.where(d > 0, d, 1.0)
        bad = (d <= 0) | ~np.isfinite(un) | (un <= lo) | (un >= hi)
        u = np.where(bad, 0.5 * (lo + hi), un)
    u = np.where(flat, 0.0, u)
    return np.clip(u, 0.0, 1.0) * h


def refine_hop_time(
    sys,
    surface,
    state_at_t,
    dt,
    omega_tilde,
    Y,
    state_after=None,
    rate0=None,
    rate1=None,
    boundary_tol=1e-12,
    newton_iters=6,
):
    """Locate the hop time inside a bracketed step and re-integrate up to it.

    Returns ``(t_hop, state)`` where ``state`` results from one RK3 step of size
    ``t_hop - t`` from ``state_at_t``; a crossing within ``boundary_tol`` of the
    step end is reported at the end of the step.  Vectorized: ``surface``,
    ``dt``, ``omega_tilde`` and ``Y`` may be per-trajectory arrays.
    """
    B = len(state_at_t)
    k = _surface_array(sys, surface, B)
    h = np.broadcast_to(np.asarray(dt, dtype=float), (B,)).astype(float)
    omega_tilde = np.broadcast_to(np.asarray(omega_tilde, dtype=float), (B,))
    Y = np.broadcast_to(np.asarray(Y, dtype=float), (B,))
    t0 = state_at_t.t
    if rate0 is None:
        rate0 = leave_rates(sys, k, t0, state_at_t.X)
    if state_after is None:
        state_after = rk3_step(sys, k, state_at_t, h)
    if rate1 is None:
        rate1 = leave_rates(sys, k, t0 + h, state_after.X)
    w0 = np.real(state_at_t.omega)
    w1 = np.real(state_after.omega)
    target = hop_threshold(omega_tilde, Y)
    if np.any(w1 < target):
        raise AssertionError("refine_hop_time called without a bracketed crossing")

    s = hermite_crossing(h, w0, w1, rate0, rate1, target)
    at_end = s >= h - boundary_tol
    s = np.where(at_end, h, s)
    out = state_after.copy()
    inner = np.flatnonzero(~at_end)
    if inner.size:
        sub = state_at_t.take(inner)
        ks = k[inner]
        si = s[inner]
        tgt = target[inner]
        lim = h[inner]
        tol = HOP_TOL / np.maximum(1.0 - Y[inner], 1e-300) * 0.5
        st = rk3_step(sys, ks, sub, si)
        for _ in range(newton_iters):
            resid = np.real(st.omega) - tgt
            need = np.abs(resid) >= tol
            if not need.any():
                break
            r = leave_rates(sys, ks, st.t, st.X)
            ok = need & (r > 0)
            if not ok.any():
                break
            si = np.where(ok, np.clip(si - resid / np.where(r > 0, r, 1.0), 0.0, lim), si)
            redo = np.flatnonzero(ok)
            st.put(redo, rk3_step(sys, ks[redo], sub.take(redo), si[redo]))
        s[inner] = si
        out.put(inner, st)
    return t0 + s, out
