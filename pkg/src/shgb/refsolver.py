"""Grid reference solver for two-dimensional transport systems.

Method of lines on the node grid of a :class:`FieldGrid`:

* the advective term ``alpha . grad u`` uses third-order upwind WENO
  differences per direction, upwinded on the sign of the velocity component
  at each node (``a+ D- u + a- D+ u``);
* the phase, coupling and conjugate-coupling terms are evaluated pointwise;
* SSP-RK3 advances in time with a fixed step that lands exactly on ``T``.

Values outside the grid are zero (two ghost nodes per side), so nothing
flows in through the boundary.
"""

from __future__ import annotations

import math
import warnings

import numba
import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_positive
from .beam import FieldGrid

__all__ = ["reference_solve", "ReferenceSolver", "ResolutionWarning", "stable_dt"]


class ResolutionWarning(UserWarning):
    """The grid has fewer than three nodes per oscillation wavelength."""


@numba.njit(cache=True, inline="always")
def _get(u, s, i, j):
    if i < 0 or j < 0 or i >= u.shape[1] or j >= u.shape[2]:
        return 0j
    return u[s, i, j]


@numba.njit(cache=True, inline="always")
def _sq(z):
    return z.real * z.real + z.imag * z.imag


@numba.njit(cache=True, inline="always")
def _weno_minus(um2, um1, u0, up1, epsw):
    """Left-biased WENO3 difference (times dx) at a node."""
    # flux at i+1/2 from (i-1, i, i+1)
    b0 = _sq(u0 - um1)
    b1 = _sq(up1 - u0)
    a0 = (1.0 / 3.0) / (b0 + epsw) ** 2
    a1 = (2.0 / 3.0) / (b1 + epsw) ** 2
    fr = (a0 * (1.5 * u0 - 0.5 * um1) + a1 * (0.5 * u0 + 0.5 * up1)) / (a0 + a1)
    # flux at i-1/2 from (i-2, i-1, i)
    b0 = _sq(um1 - um2)
    b1 = _sq(u0 - um1)
    a0 = (1.0 / 3.0) / (b0 + epsw) ** 2
    a1 = (2.0 / 3.0) / (b1 + epsw) ** 2
    fl = (a0 * (1.5 * um1 - 0.5 * um2) + a1 * (0.5 * um1 + 0.5 * u0)) / (a0 + a1)
    return fr - fl


@numba.njit(cache=True)
def _operator(u, vel, phase, gamma, nu, has_nu, dx0, dx1, epsw, out):
    n = u.shape[0]
    n0 = u.shape[1]
    n1 = u.shape[2]
    r0 = 1.0 / dx0
    r1 = 1.0 / dx1
    for s in range(n):
        for i in range(n0):
            for j in range(n1):
                u0 = u[s, i, j]
                acc = 0j
                a = vel[s, 0, i, j]
                if a > 0:
                    d = _weno_minus(_get(u, s, i - 2, j), _get(u, s, i - 1, j), u0,
                                    _get(u, s, i + 1, j), epsw)
                    acc -= a * d * r0
                elif a < 0:
                    # mirror of the left-biased difference
                    d = _weno_minus(_get(u, s, i + 2, j), _get(u, s, i + 1, j), u0,
                                    _get(u, s, i - 1, j), epsw)
                    acc += a * d * r0
                a = vel[s, 1, i, j]
                if a > 0:
                    d = _weno_minus(_get(u, s, i, j - 2), _get(u, s, i, j - 1), u0,
                                    _get(u, s, i, j + 1), epsw)
                    acc -= a * d * r1
                elif a < 0:
                    d = _weno_minus(_get(u, s, i, j + 2), _get(u, s, i, j + 1), u0,
                                    _get(u, s, i, j - 1), epsw)
                    acc += a * d * r1
                acc += 1j * phase[s, i, j] * u0
                for q in range(n):
                    acc += gamma[s, q, i, j] * u[q, i, j]
                    if has_nu:
                        acc += nu[s, q, i, j] * np.conj(u[q, i, j])
                out[s, i, j] = acc


def _coefficients(sys, grid, t):
    x = grid.nodes()
    tt = np.full(x.shape[:-1], float(t))
    vel = np.moveaxis(np.asarray(sys.drift(tt, x), dtype=float), (-2, -1), (0, 1))
    phase = np.moveaxis(np.asarray(sys.phase(tt, x), dtype=float), -1, 0) / sys.epsilon
    gamma = np.moveaxis(np.asarray(sys.coupling(tt, x), dtype=complex), (-2, -1), (0, 1))
    if sys.conjugate_coupling is not None:
        nu = np.moveaxis(np.asarray(sys.conjugate_coupling(tt, x), dtype=complex), (-2, -1), (0, 1))
    else:
        nu = np.zeros((1, 1, 1, 1), dtype=complex)
    return (np.ascontiguousarray(vel), np.ascontiguousarray(phase),
            np.ascontiguousarray(gamma), np.ascontiguousarray(nu))


def stable_dt(vel, phase, gamma, nu, spacing, cfl, epsilon):
    """Largest step with the advective CFL number ``cfl`` and the source bound."""
    adv = np.abs(vel[:, 0]) / spacing[0] + np.abs(vel[:, 1]) / spacing[1]
    src = np.abs(phase) + np.sum(np.abs(gamma), axis=1)
    if nu.shape[-1] > 1:
        src = src + np.sum(np.abs(nu), axis=1)
    rate = float(np.max(adv + src))
    dt = 0.5 * epsilon if rate == 0 else min(cfl / rate, 0.5 * epsilon)
    return dt


def reference_solve(sys, initial, T, cfl=0.8, weno_eps=None, t0=0.0, callback=None):
    """Advance ``initial`` (a FieldGrid with ``sys.n`` surfaces) to time ``T``.

    ``weno_eps`` is the WENO smoothness regularizer; the default
    ``(dx max|u0| / eps)^2`` keeps the weights near their linear values
    wherever the solution is resolved on the scale ``eps``.
    """
    if sys.m != 2 or initial.m != 2:
        raise ValueError("the reference solver handles two-dimensional problems only")
    if initial.n_surfaces != sys.n:
        raise ValueError(f"initial data has {initial.n_surfaces} surfaces, system has {sys.n}")
    T = check_positive("T", T)
    cfl = check_positive("cfl", cfl)
    if cfl > 1:
        raise ValueError(f"cfl must be at most 1, got {cfl}")
    h = initial.spacing
    if sys.epsilon * math.pi / float(h.max()) < 3:
        warnings.warn(
            f"grid spacing {h.max():.3g} resolves wavelengths of order eps={sys.epsilon:.3g} "
            "with fewer than 3 nodes", ResolutionWarning, stacklevel=2,
        )
    vel, phase, gamma, nu = _coefficients(sys, initial, t0)
    frozen = all(
        np.array_equal(a, b) for a, b in zip((vel, phase, gamma, nu), _coefficients(sys, initial, t0 + T))
    )
    has_nu = sys.conjugate_coupling is not None
    u = np.ascontiguousarray(np.moveaxis(initial.values, -1, 0))
    umax = float(np.abs(u).max()) if u.size else 0.0
    if weno_eps is None:
        # an all-zero field still needs a positive regularizer
        weno_eps = (float(h.max()) * (umax if umax > 0 else 1.0) / sys.epsilon) ** 2
    dt_max = stable_dt(vel, phase, gamma, nu, h, cfl, sys.epsilon)
    n_steps = max(1, math.ceil(T / dt_max - 1e-12))
    dt = T / n_steps
    k = np.empty_like(u)

    def L(v, t):
        nonlocal vel, phase, gamma, nu
        if not frozen:
            vel, phase, gamma, nu = _coefficients(sys, initial, t)
        _operator(v, vel, phase, gamma, nu, has_nu, h[0], h[1], weno_eps, k)
        return k

    t = t0
    for step in range(n_steps):
        u1 = u + dt * L(u, t)
        u2 = 0.75 * u + 0.25 * (u1 + dt * L(u1, t + dt))
        u = (1.0 / 3.0) * u + (2.0 / 3.0) * (u2 + dt * L(u2, t + 0.5 * dt))
        t = t0 + (step + 1) * dt
        if callback is not None:
            callback(step, t, u)
    return FieldGrid(initial.axes, initial.n_surfaces, np.moveaxis(u, 0, -1))


class ReferenceSolver(BaseEstimator):
    """Estimator-style wrapper: ``fit(initial)`` solves, ``predict(X)`` interpolates.

    Interpolation is linear on the node grid; points outside the grid map to 0.
    """

    def __init__(self, problem="ex1", epsilon=0.1, T=0.5, cfl=0.8, weno_eps=None):
        self.problem = problem
        self.epsilon = epsilon
        self.T = T
        self.cfl = cfl
        self.weno_eps = weno_eps

    def fit(self, initial, y=None):
        from .problems import CoefficientBundle, get_problem

        if isinstance(self.problem, CoefficientBundle):
            sys = self.problem
        else:
            sys = get_problem(self.problem, epsilon=check_positive("epsilon", self.epsilon))
        self.system_ = sys
        self.field_ = reference_solve(sys, initial, self.T, self.cfl, self.weno_eps)
        return self

    def predict(self, X):
        from scipy.interpolate import RegularGridInterpolator
        from sklearn.utils.validation import check_is_fitted

        from ._validation import check_points

        check_is_fitted(self, "field_")
        X = check_points(X, 2)
        g = self.field_
        axes = [g.coords(d) for d in range(g.m)]
        interp = RegularGridInterpolator(axes, g.values, bounds_error=False, fill_value=0.0)
        return interp(X)
