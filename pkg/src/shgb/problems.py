"""Transport systems as evaluable coefficient bundles, plus the built-in problems.

A system has the form

    du_i/dt + alpha_i . grad u_i = (i/eps) beta_i u_i + sum_j gamma_ij u_j
                                   + sum_j nu_ij conj(u_j)

with ``nu`` absent for the plain form.  Every coefficient callable takes
``(t, x)`` with ``x`` of shape ``(..., m)`` and returns the values for *all*
surfaces stacked along the leading axes after ``...``.  Surfaces are indexed
from 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

__all__ = [
    "CoefficientBundle",
    "ExtendedIndex",
    "effective_gamma",
    "as_doubled",
    "builtin_ex1",
    "builtin_ex2",
    "builtin_tully_ecr",
    "builtin_single_crossing",
    "qcle_from_potential",
    "get_problem",
    "PROBLEMS",
]


class ExtendedIndex(NamedTuple):
    """Surface index in the conjugate-doubled system."""

    base_surface: int
    conjugated: bool = False

    def flat(self, n):
        return self.base_surface + n * int(self.conjugated)

    @classmethod
    def from_flat(cls, k, n):
        return cls(int(k) % n, bool(k >= n))


@dataclass(frozen=True)
class CoefficientBundle:
    """Coefficients of a transport system with first and second derivatives.

    Parameters
    ----------
    m, n : int
        Spatial dimension and number of surfaces.
    epsilon : float
        Semiclassical parameter.
    drift : callable
        ``drift(t, x) -> (..., n, m)``, the transport velocities ``alpha_i``.
    drift_jacobian : callable
        ``(t, x) -> (..., n, m, m)`` with ``J[i, a, b] = d alpha_i[a] / d x[b]``.
    drift_momentum_hessian : callable
        ``(t, x, p) -> (..., n, m, m)``, Hessian of ``p . alpha_i`` in ``x``.
        Must be linear in ``p``.
    phase, phase_gradient, phase_hessian : callable
        ``beta_i`` and its derivatives: ``(..., n)``, ``(..., n, m)``,
        ``(..., n, m, m)``.
    coupling : callable
        ``(t, x) -> (..., n, n)`` complex, ``coupling[..., i, j] = gamma_ij``.
    conjugate_coupling : callable, optional
        Same layout for ``nu_ij``.  ``None`` for the plain system.
    evaluate : callable, optional
        ``(t, x, p)`` returning everything :meth:`coefficients` returns, for
        bundles that can share work between the coefficients.  It must agree
        bit for bit with the individual callables.
    """

    m: int
    n: int
    epsilon: float
    drift: Callable
    drift_jacobian: Callable
    drift_momentum_hessian: Callable
    phase: Callable
    phase_gradient: Callable
    phase_hessian: Callable
    coupling: Callable
    conjugate_coupling: Optional[Callable] = None
    evaluate: Optional[Callable] = None
    name: str = "custom"
    surface_names: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")
        if not self.surface_names:
            object.__setattr__(
                self, "surface_names", tuple(f"u{i + 1}" for i in range(self.n))
            )

    @property
    def extended(self):
        return self.conjugate_coupling is not None

    @property
    def n_extended(self):
        return 2 * self.n if self.extended else self.n

    # per-surface views, mostly for inspection and tests
    def alpha(self, i, t, x):
        return self.drift(t, np.asarray(x, dtype=float))[..., i, :]

    def grad_alpha(self, i, t, x):
        return self.drift_jacobian(t, np.asarray(x, dtype=float))[..., i, :, :]

    def hess_p_dot_alpha(self, i, t, x, p):
        x = np.asarray(x, dtype=float)
        p = np.broadcast_to(np.asarray(p, dtype=float), x.shape)
        return self.drift_momentum_hessian(t, x, p)[..., i, :, :]

    def beta(self, i, t, x):
        return self.phase(t, np.asarray(x, dtype=float))[..., i]

    def grad_beta(self, i, t, x):
        return self.phase_gradient(t, np.asarray(x, dtype=float))[..., i, :]

    def hess_beta(self, i, t, x):
        return self.phase_hessian(t, np.asarray(x, dtype=float))[..., i, :, :]

    def gamma(self, i, j, t, x):
        return self.coupling(t, np.asarray(x, dtype=float))[..., i, j]

    def nu(self, i, j, t, x):
        x = np.asarray(x, dtype=float)
        if self.conjugate_coupling is None:
            return np.zeros(x.shape[:-1], dtype=complex)
        return self.conjugate_coupling(t, x)[..., i, j]

    def coefficients(self, t, x, p):
        """All coefficients at once.

        Returns ``(drift, drift_jacobian, drift_momentum_hessian, phase,
        phase_gradient, phase_hessian, extended_coupling)``.
        """
        if self.evaluate is not None:
            return self.evaluate(t, x, p)
        return (
            self.drift(t, x),
            self.drift_jacobian(t, x),
            self.drift_momentum_hessian(t, x, p),
            self.phase(t, x),
            self.phase_gradient(t, x),
            self.phase_hessian(t, x),
            self.extended_coupling(t, x),
        )

    def extended_coupling(self, t, x):
        """Coupling matrix over the extended index set.

        For the plain system this is ``gamma``.  With conjugate couplings it
        is the doubled matrix ``[[gamma, nu], [conj(nu), conj(gamma)]]`` acting
        on ``(u, conj(u))``.
        """
        g = np.asarray(self.coupling(t, x), dtype=complex)
        if self.conjugate_coupling is None:
            return g
        v = np.asarray(self.conjugate_coupling(t, x), dtype=complex)
        top = np.concatenate([g, v], axis=-1)
        bottom = np.concatenate([np.conj(v), np.conj(g)], axis=-1)
        return np.concatenate([top, bottom], axis=-2)


def effective_gamma(sys, frm, to, t, x):
    """Coupling that carries amplitude from surface ``frm`` to surface ``to``.

    This is the ``(to, frm)`` entry of the extended coupling matrix; hops
    from ``frm`` to ``to`` happen at rate ``|effective_gamma|``.
    """
    frm = ExtendedIndex(*frm) if not isinstance(frm, ExtendedIndex) else frm
    to = ExtendedIndex(*to) if not isinstance(to, ExtendedIndex) else to
    for idx in (frm, to):
        if not 0 <= idx.base_surface < sys.n:
            raise IndexError(f"surface {idx.base_surface} out of range for n={sys.n}")
        if idx.conjugated and not sys.extended:
            raise IndexError("conjugated surfaces exist only with conjugate couplings")
    x = np.asarray(x, dtype=float)
    i, j = to.base_surface, frm.base_surface
    if not to.conjugated and not frm.conjugated:
        return sys.gamma(i, j, t, x)
    if not to.conjugated and frm.conjugated:
        return sys.nu(i, j, t, x)
    if to.conjugated and not frm.conjugated:
        return np.conj(sys.nu(i, j, t, x))
    return np.conj(sys.gamma(i, j, t, x))


def as_doubled(sys):
    """Rewrite a conjugate-coupled system as a plain system on ``2n`` surfaces.

    Surfaces ``n..2n-1`` carry ``w = conj(u)``: same drift, negated phase,
    conjugated couplings.
    """
    if not sys.extended:
        raise ValueError("system has no conjugate couplings to double")

    def tile(f):
        def g(*args):
            v = f(*args)
            return np.concatenate([v, v], axis=-3)
        return g

    def mirror(f, axis):
        def g(t, x):
            v = f(t, x)
            return np.concatenate([v, -v], axis=axis)
        return g

    def coupling(t, x):
        return sys.extended_coupling(t, x)

    def evaluate(t, x, p):
        a, j, hpa, b, gb, hb, g = sys.coefficients(t, x, p)
        return (
            np.concatenate([a, a], axis=-2),
            np.concatenate([j, j], axis=-3),
            np.concatenate([hpa, hpa], axis=-3),
            np.concatenate([b, -b], axis=-1),
            np.concatenate([gb, -gb], axis=-2),
            np.concatenate([hb, -hb], axis=-3),
            g,
        )

    return CoefficientBundle(
        m=sys.m,
        n=2 * sys.n,
        epsilon=sys.epsilon,
        drift=lambda t, x: np.concatenate([sys.drift(t, x)] * 2, axis=-2),
        drift_jacobian=tile(sys.drift_jacobian),
        drift_momentum_hessian=tile(sys.drift_momentum_hessian),
        phase=mirror(sys.phase, -1),
        phase_gradient=mirror(sys.phase_gradient, -2),
        phase_hessian=mirror(sys.phase_hessian, -3),
        coupling=coupling,
        conjugate_coupling=None,
        evaluate=evaluate,
        name=sys.name + "-doubled",
        surface_names=tuple(sys.surface_names)
        + tuple("conj(" + s + ")" for s in sys.surface_names),
        params=dict(sys.params, conjugate_half=sys.n),
    )


def _lead(x):
    return x.shape[:-1]


# ----------------------------------------------------------------------------
# Example 1: linear drift, quadratic phase, constant couplings.
#
# Transport terms written on the right-hand side in the source problem move
# to the left with flipped sign:  du/dt - a . grad u  ->  alpha = -a.
# ----------------------------------------------------------------------------

_EX1_JAC = np.array(
    [
        [[-1.0, -1.0], [-2.0, 1.0]],
        [[-0.5, -1.0], [-1.0, 0.5]],
    ]
)
_EX1_GAMMA = np.array([[-1.0, 0.5], [2.0 / 3.0, -2.0]], dtype=complex)


def _ex1_drift(t, x):
    x1, x2 = x[..., 0], x[..., 1]
    a1 = np.stack([-(x1 + x2 + 1.0), -(2.0 * x1 - x2 - 1.0)], axis=-1)
    a2 = np.stack([-(0.5 * x1 + x2 - 1.0), -(x1 - 0.5 * x2 + 1.0)], axis=-1)
    return np.stack([a1, a2], axis=-2)


def _ex1_phase(t, x):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 * x1 + x2 * x2, (x1 + x2) ** 2], axis=-1)


def _ex1_phase_gradient(t, x):
    x1, x2 = x[..., 0], x[..., 1]
    s = 2.0 * (x1 + x2)
    return np.stack([2.0 * x, np.stack([s, s], axis=-1)], axis=-2)


def builtin_ex1(epsilon=0.1):
    """Two surfaces in 2D with linear drift; Gaussian beams are exact here."""
    hess = np.array([[[2.0, 0.0], [0.0, 2.0]], [[2.0, 2.0], [2.0, 2.0]]])
    return CoefficientBundle(
        m=2,
        n=2,
        epsilon=float(epsilon),
        drift=_ex1_drift,
        drift_jacobian=lambda t, x: np.broadcast_to(_EX1_JAC, _lead(x) + (2, 2, 2)),
        drift_momentum_hessian=lambda t, x, p: np.zeros(_lead(x) + (2, 2, 2)),
        phase=_ex1_phase,
        phase_gradient=_ex1_phase_gradient,
        phase_hessian=lambda t, x: np.broadcast_to(hess, _lead(x) + (2, 2, 2)),
        coupling=lambda t, x: np.broadcast_to(_EX1_GAMMA, _lead(x) + (2, 2)),
        name="ex1",
        params={"epsilon": float(epsilon)},
    )


# ----------------------------------------------------------------------------
# Example 2: trigonometric drift and phase, couplings scaled by |x|^2.
# ----------------------------------------------------------------------------

_E = np.array([[1.0, 1.0], [1.0, 1.0]])
_F = np.array([[1.0, -1.0], [-1.0, 1.0]])


def _ex2_drift(t, x):
    s = x[..., 0] + x[..., 1]
    d = x[..., 0] - x[..., 1]
    a1 = np.stack([-np.sin(s), -np.cos(d)], axis=-1)
    a2 = np.stack([-np.sin(d), -np.cos(s)], axis=-1)
    return np.stack([a1, a2], axis=-2)


def _ex2_jacobian(t, x):
    s = x[..., 0] + x[..., 1]
    d = x[..., 0] - x[..., 1]
    cs, ss, cd, sd = np.cos(s), np.sin(s), np.cos(d), np.sin(d)
    j1 = np.stack(
        [np.stack([-cs, -cs], axis=-1), np.stack([sd, -sd], axis=-1)], axis=-2
    )
    j2 = np.stack(
        [np.stack([-cd, cd], axis=-1), np.stack([ss, ss], axis=-1)], axis=-2
    )
    return np.stack([j1, j2], axis=-3)


def _ex2_momentum_hessian(t, x, p):
    s = x[..., 0] + x[..., 1]
    d = x[..., 0] - x[..., 1]
    p1 = p[..., 0, None, None]
    p2 = p[..., 1, None, None]
    h1 = p1 * np.sin(s)[..., None, None] * _E + p2 * np.cos(d)[..., None, None] * _F
    h2 = p1 * np.sin(d)[..., None, None] * _F + p2 * np.cos(s)[..., None, None] * _E
    return np.stack([h1, h2], axis=-3)


def _ex2_phase(t, x):
    r2 = np.sum(x * x, axis=-1)
    return np.stack([np.sin(r2), np.cos(r2)], axis=-1)


def _ex2_phase_gradient(t, x):
    r2 = np.sum(x * x, axis=-1)[..., None]
    return np.stack([2.0 * np.cos(r2) * x, -2.0 * np.sin(r2) * x], axis=-2)


def _ex2_phase_hessian(t, x):
    r2 = np.sum(x * x, axis=-1)[..., None, None]
    xx = x[..., :, None] * x[..., None, :]
    eye = np.eye(2)
    h1 = 2.0 * np.cos(r2) * eye - 4.0 * np.sin(r2) * xx
    h2 = -2.0 * np.sin(r2) * eye - 4.0 * np.cos(r2) * xx
    return np.stack([h1, h2], axis=-3)


def _ex2_coupling(t, x):
    r2 = np.sum(x * x, axis=-1)[..., None, None]
    base = np.array([[-1.0, 5.0], [-5.0, -0.5]], dtype=complex)
    return r2 * base


def builtin_ex2(epsilon=0.08):
    """Two surfaces in 2D with nonlinear coefficients."""
    return CoefficientBundle(
        m=2,
        n=2,
        epsilon=float(epsilon),
        drift=_ex2_drift,
        drift_jacobian=_ex2_jacobian,
        drift_momentum_hessian=_ex2_momentum_hessian,
        phase=_ex2_phase,
        phase_gradient=_ex2_phase_gradient,
        phase_hessian=_ex2_phase_hessian,
        coupling=_ex2_coupling,
        name="ex2",
        params={"epsilon": float(epsilon)},
    )


# ----------------------------------------------------------------------------
# Third-order jets for the scalar functions of r in the QCLE potentials.
# ----------------------------------------------------------------------------


class Jet:
    """Value and first three derivatives of a scalar function of one variable."""

    __slots__ = ("d",)

    def __init__(self, d0, d1=0.0, d2=0.0, d3=0.0):
        self.d = tuple(np.asarray(v, dtype=float) for v in (d0, d1, d2, d3))

    @classmethod
    def variable(cls, r):
        r = np.asarray(r, dtype=float)
        return cls(r, np.ones_like(r), np.zeros_like(r), np.zeros_like(r))

    @classmethod
    def constant(cls, c, like):
        z = np.zeros_like(like, dtype=float)
        return cls(z + c, z, z, z)

    def __add__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.d[0] + other, *self.d[1:])
        return Jet(*(a + b for a, b in zip(self.d, other.d)))

    __radd__ = __add__

    def __neg__(self):
        return Jet(*(-a for a in self.d))

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(*(a * other for a in self.d))
        f0, f1, f2, f3 = self.d
        g0, g1, g2, g3 = other.d
        return Jet(
            f0 * g0,
            f1 * g0 + f0 * g1,
            f2 * g0 + 2.0 * f1 * g1 + f0 * g2,
            f3 * g0 + 3.0 * f2 * g1 + 3.0 * f1 * g2 + f0 * g3,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return self * (1.0 / other)
        return self * other.reciprocal()

    def compose(self, g0, g1, g2, g3):
        """Chain rule for ``g(self)`` given ``g`` and its derivatives at self."""
        f1, f2, f3 = self.d[1:]
        return Jet(
            g0,
            g1 * f1,
            g2 * f1 * f1 + g1 * f2,
            g3 * f1 ** 3 + 3.0 * g2 * f1 * f2 + g1 * f3,
        )

    def reciprocal(self):
        u = self.d[0]
        if np.any(u == 0):
            raise ZeroDivisionError("jet reciprocal of zero")
        return self.compose(1.0 / u, -1.0 / u ** 2, 2.0 / u ** 3, -6.0 / u ** 4)

    def sqrt(self):
        u = self.d[0]
        s = np.sqrt(u)
        return self.compose(s, 0.5 / s, -0.25 / (u * s), 0.375 / (u * u * s))

    def arctan(self):
        u = self.d[0]
        q = 1.0 + u * u
        return self.compose(
            np.arctan(u), 1.0 / q, -2.0 * u / q ** 2, (6.0 * u * u - 2.0) / q ** 3
        )


def qcle_from_potential(potential, epsilon, name="qcle", params=None):
    """QCLE bundle on phase space ``x = (r, p)`` from a real symmetric 2x2 potential.

    ``potential(r_jet) -> (V11, V22, V12)`` as :class:`Jet` objects.  Surfaces
    are ordered ``(u11, u22, u21)``; ``u11`` lives on the upper adiabatic
    energy ``E1``.  The conjugate coupling carries the ``conj(u21)`` terms.
    """

    def adiabatic(r):
        v11, v22, v12 = potential(Jet.variable(r))
        dv = v11 - v22
        disc = dv * dv + v12 * v12 * 4.0
        root = disc.sqrt()
        tr = v11 + v22
        e1 = (tr + root) * 0.5
        e2 = (tr - root) * 0.5
        # derivative of the mixing angle; d11 = d22 = 0
        d21 = (dv.d[0] * v12.d[1] - v12.d[0] * dv.d[1]) / disc.d[0]
        return e1, e2, tr * 0.5, d21

    def _all(t, x, pvec):
        r = x[..., 0]
        p = x[..., 1]
        e1, e2, mean, d21 = adiabatic(r)
        one = np.ones_like(r)
        lead = r.shape

        drift = np.empty(lead + (3, 2))
        drift[..., :, 0] = p[..., None]
        drift[..., 0, 1] = -e1.d[1]
        drift[..., 1, 1] = -e2.d[1]
        drift[..., 2, 1] = -mean.d[1]

        jac = np.zeros(lead + (3, 2, 2))
        jac[..., :, 0, 1] = one[..., None]
        jac[..., 0, 1, 0] = -e1.d[2]
        jac[..., 1, 1, 0] = -e2.d[2]
        jac[..., 2, 1, 0] = -mean.d[2]

        hpa = None
        if pvec is not None:
            hpa = np.zeros(lead + (3, 2, 2))
            pp = pvec[..., 1]
            hpa[..., 0, 0, 0] = -(pp * e1.d[3])
            hpa[..., 1, 0, 0] = -(pp * e2.d[3])
            hpa[..., 2, 0, 0] = -(pp * mean.d[3])

        # beta(u21) = -(E2 - E1); beta(u11) = beta(u22) = 0
        beta21 = -(e2 - e1)
        beta = np.zeros(lead + (3,))
        beta[..., 2] = beta21.d[0]
        gbeta = np.zeros(lead + (3, 2))
        gbeta[..., 2, 0] = beta21.d[1]
        hbeta = np.zeros(lead + (3, 2, 2))
        hbeta[..., 2, 0, 0] = beta21.d[2]

        c = (p * d21).astype(complex)
        cc = np.conj(c)
        g = np.zeros(lead + (6, 6), dtype=complex)
        # plain block: gamma
        g[..., 0, 2] = cc
        g[..., 1, 2] = -cc
        g[..., 2, 0] = -c
        g[..., 2, 1] = c
        # nu block and its conjugate
        g[..., 0, 5] = c
        g[..., 1, 5] = -c
        g[..., 3, 2] = np.conj(c)
        g[..., 4, 2] = np.conj(-c)
        # conj(gamma) block
        g[..., 3, 5] = np.conj(cc)
        g[..., 4, 5] = np.conj(-cc)
        g[..., 5, 3] = np.conj(-c)
        g[..., 5, 4] = np.conj(c)
        return drift, jac, hpa, beta, gbeta, hbeta, g

    def evaluate(t, x, p):
        return _all(t, x, p)

    bundle = CoefficientBundle(
        m=2,
        n=3,
        epsilon=float(epsilon),
        drift=lambda t, x: _all(t, x, None)[0],
        drift_jacobian=lambda t, x: _all(t, x, None)[1],
        drift_momentum_hessian=lambda t, x, p: _all(t, x, p)[2],
        phase=lambda t, x: _all(t, x, None)[3],
        phase_gradient=lambda t, x: _all(t, x, None)[4],
        phase_hessian=lambda t, x: _all(t, x, None)[5],
        coupling=lambda t, x: _all(t, x, None)[6][..., :3, :3],
        conjugate_coupling=lambda t, x: _all(t, x, None)[6][..., :3, 3:],
        evaluate=evaluate,
        name=name,
        surface_names=("u11", "u22", "u21"),
        params=dict(params or {}, epsilon=float(epsilon)),
    )
    object.__setattr__(bundle, "adiabatic", adiabatic)
    return bundle


def tully_potential(delta):
    def potential(r):
        f = ((r * 100.0).arctan() + (np.pi / 2 + delta)) * (1.0 / np.pi)
        g = (r * 2.0).arctan() + np.pi / 2
        return f * (1.0 / 20.0), f * (-1.0 / 20.0), f * g * 0.1
    return potential


def single_crossing_potential(r):
    if np.any(r.d[0] == 0):
        raise ValueError("single-crossing potential is singular at r = 0")
    return r * r, r.reciprocal(), Jet.constant(0.1, r.d[0])


def builtin_tully_ecr(epsilon=1.0 / 32.0, delta=None):
    """Tully's extended coupling with reflection; ``delta`` defaults to ``5 * epsilon``."""
    if delta is None:
        delta = 5.0 * epsilon
    return qcle_from_potential(
        tully_potential(float(delta)), epsilon, name="tully_ecr",
        params={"delta": float(delta)},
    )


def builtin_single_crossing(epsilon=0.01):
    """Single avoided crossing ``V = [[r^2, 1/10], [1/10, 1/r]]``; undefined at r = 0."""
    return qcle_from_potential(single_crossing_potential, epsilon, name="single_crossing")


PROBLEMS = {
    "ex1": builtin_ex1,
    "ex2": builtin_ex2,
    "tully_ecr": builtin_tully_ecr,
    "single_crossing": builtin_single_crossing,
}


def get_problem(problem_id, **kwargs):
    try:
        factory = PROBLEMS[problem_id]
    except KeyError:
        raise ValueError(
            f"unknown problem {problem_id!r}; expected one of {sorted(PROBLEMS)}"
        ) from None
    return factory(**kwargs)
