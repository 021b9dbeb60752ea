"""Independent references for the jump-process machinery.

With coefficients frozen at a point and no transport, the coupled system
reduces to the linear ODE ``c' = Gamma(t) c`` whose solution is a matrix
exponential.  These oracles compare the Monte Carlo engine (run for real on a
synthetic bundle) against that exponential, against the truncated Dyson
series, and against the closed-form law of the jump counts and times.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.stats

from .beam import GaussianBeam
from .hopping import make_point_sampler, simulate_block
from .problems import CoefficientBundle

__all__ = [
    "FrozenSystem",
    "frozen_bundle",
    "theta_matrix",
    "dyson_truncated",
    "mc_frozen_estimate",
    "jump_density_check",
    "jump_count_probabilities",
    "random_frozen_system",
    "OracleCheck",
    "oracle_suite",
]


@dataclass
class FrozenSystem:
    """``Gamma`` is a constant ``n x n`` matrix or a callable ``t -> matrix``.

    The diagonal must vanish: diagonal couplings only rescale the beam
    amplitude and are not part of the jump process.
    """

    Gamma: Union[np.ndarray, Callable]
    i0: int = 0
    X0: Optional[np.ndarray] = None

    def __post_init__(self):
        G = self.at(0.0)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError("Gamma must be a square matrix")
        if np.any(np.diag(G) != 0):
            raise ValueError("Gamma must have a zero diagonal")
        if not 0 <= self.i0 < G.shape[0]:
            raise IndexError("i0 out of range")

    @property
    def constant(self):
        return not callable(self.Gamma)

    @property
    def n(self):
        return self.at(0.0).shape[0]

    def at(self, t):
        if callable(self.Gamma):
            return np.asarray(self.Gamma(float(t)), dtype=complex)
        return np.asarray(self.Gamma, dtype=complex)


def theta_matrix(fs, t):
    """``expm(integral of Gamma over [0, t])``.

    For a callable ``Gamma`` the integral is computed by adaptive quadrature;
    this is the solution operator only when the values of ``Gamma`` commute.
    """
    if fs.constant:
        integral = t * fs.at(0.0)
    else:
        integral, _ = scipy.integrate.quad_vec(fs.at, 0.0, t, epsabs=1e-14, epsrel=1e-13)
    return scipy.linalg.expm(integral)


def dyson_truncated(fs, t, K_max):
    """Partial sum ``sum_{K <= K_max} (t Gamma)^K / K! e_{i0}`` for constant Gamma."""
    if not fs.constant:
        raise ValueError("the closed-form Dyson terms need a constant Gamma")
    G = t * fs.at(0.0)
    term = np.zeros(fs.n, dtype=complex)
    term[fs.i0] = 1.0
    total = term.copy()
    for K in range(1, K_max + 1):
        term = G @ term / K
        total = total + term
    return total


def frozen_bundle(fs, epsilon=1.0):
    """One-dimensional bundle with no drift and no phase whose coupling is ``Gamma``."""
    n = fs.n

    def coupling(t, x):
        lead = x.shape[:-1]
        if fs.constant:
            return np.broadcast_to(fs.at(0.0), lead + (n, n))
        t = np.broadcast_to(np.asarray(t, dtype=float), lead)
        return np.stack([fs.at(ti) for ti in t.reshape(-1)]).reshape(lead + (n, n))

    return CoefficientBundle(
        m=1,
        n=n,
        epsilon=epsilon,
        drift=lambda t, x: np.zeros(x.shape[:-1] + (n, 1)),
        drift_jacobian=lambda t, x: np.zeros(x.shape[:-1] + (n, 1, 1)),
        drift_momentum_hessian=lambda t, x, p: np.zeros(x.shape[:-1] + (n, 1, 1)),
        phase=lambda t, x: np.zeros(x.shape[:-1] + (n,)),
        phase_gradient=lambda t, x: np.zeros(x.shape[:-1] + (n, 1)),
        phase_hessian=lambda t, x: np.zeros(x.shape[:-1] + (n, 1, 1)),
        coupling=coupling,
        name="frozen",
    )


def _run_frozen(fs, t, n_traj, seed, dt=None, record=False, block_size=4096):
    sys = frozen_bundle(fs)
    x0 = np.zeros(1) if fs.X0 is None else np.asarray(fs.X0, dtype=float).reshape(1)
    sampler = make_point_sampler(GaussianBeam.isotropic(x0), fs.i0)
    # with constant rates a single step per hop interval is exact
    dt = t if dt is None else dt
    out = []
    for start in range(0, n_traj, block_size):
        out.append(simulate_block(sys, sampler, t, dt, seed, start,
                                  min(block_size, n_traj - start), record=record))
    return sys, out


def mc_frozen_estimate(fs, t, n_traj, seed, dt=None):
    """Monte Carlo estimate of ``theta_matrix(fs, t)[:, i0]`` with the hopping engine.

    Returns ``(mean, stderr)``; ``stderr[i]`` is
    ``sqrt(var(Re) + var(Im)) / sqrt(n_traj)`` of the per-trajectory
    contributions ``exp(omega) delta(i, l_t)``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if dt is None and not fs.constant:
        dt = min(t, 0.01)
    _, blocks = _run_frozen(fs, t, n_traj, seed, dt=dt)
    vals = np.zeros((n_traj, fs.n), dtype=complex)
    row = 0
    for res in blocks:
        c = len(res.surfaces)
        w = np.exp(res.state.omega) * res.state.A
        vals[np.arange(row, row + c), res.surfaces] = w
        row += c
    mean = vals.mean(axis=0)
    if n_traj > 1:
        var = vals.real.var(axis=0, ddof=1) + vals.imag.var(axis=0, ddof=1)
    else:
        var = np.zeros(fs.n)
    return mean, np.sqrt(var / n_traj)


def jump_count_probabilities(rates, i0, t, K):
    """``P(K_t = k)`` for ``k = 0..K`` and ``P(K_t > K)`` for a constant-rate chain.

    ``rates[j, i]`` is the rate of jumping from ``i`` to ``j``.  Built from the
    generator of the chain on (surface, jump count) pairs.
    """
    rates = np.abs(np.asarray(rates, dtype=float))
    n = rates.shape[0]
    R = rates - np.diag(np.diag(rates))
    leave = R.sum(axis=0)
    levels = K + 2  # counts 0..K and an absorbing "more than K" level
    Q = np.zeros((n * levels, n * levels))
    for c in range(levels):
        blk = slice(c * n, (c + 1) * n)
        if c < levels - 1:
            Q[blk, blk] = -np.diag(leave)
            nxt = slice((c + 1) * n, (c + 2) * n)
            Q[nxt, blk] = R
    p0 = np.zeros(n * levels)
    p0[i0] = 1.0
    p = scipy.linalg.expm(Q * t) @ p0
    probs = p.reshape(levels, n).sum(axis=1)
    return np.clip(probs, 0.0, 1.0)


def jump_density_check(rates, t, K, n_traj, seed, i0=0):
    """Compare simulated jump counts and first-jump times with their exact laws.

    Returns a dict with the chi-square statistic and p-value of the jump
    counts (levels ``0..K`` and ``> K``, sparse tail levels merged) and the KS
    statistic and p-value of the first jump time given at least one jump,
    whose CDF is ``(1 - exp(-lam s)) / (1 - exp(-lam t))``.
    """
    rates = np.abs(np.asarray(rates, dtype=float))
    fs = FrozenSystem(rates.astype(complex), i0=i0)
    _, blocks = _run_frozen(fs, t, n_traj, seed, record=True)
    counts = np.concatenate([res.n_hops for res in blocks])
    first = np.array([rec.hops[0].t for res in blocks for rec in res.records if rec.hops])
    probs = jump_count_probabilities(rates, i0, t, K)
    observed = np.bincount(np.minimum(counts, K + 1), minlength=K + 2).astype(float)
    expected = probs * n_traj
    out = {"counts": observed, "expected": expected, "first_times": first}

    # merge trailing bins until each expected count is at least 5
    obs_m, exp_m = list(observed), list(expected)
    while len(exp_m) > 1 and exp_m[-1] < 5:
        e, o = exp_m.pop(), obs_m.pop()
        exp_m[-1] += e
        obs_m[-1] += o
    exp_m = np.array(exp_m)
    obs_m = np.array(obs_m)
    if exp_m.size > 1:
        exp_m = exp_m * obs_m.sum() / exp_m.sum()
        chi = scipy.stats.chisquare(obs_m, exp_m)
        out["chi2"], out["chi2_p"] = float(chi.statistic), float(chi.pvalue)
    else:
        out["chi2"], out["chi2_p"] = 0.0, 1.0

    lam = float(rates[:, i0].sum() - rates[i0, i0])
    if lam > 0 and first.size:
        norm = -np.expm1(-lam * t)
        ks = scipy.stats.kstest(first, lambda s: -np.expm1(-lam * np.asarray(s)) / norm)
        out["ks"], out["ks_p"] = float(ks.statistic), float(ks.pvalue)
    else:
        out["ks"], out["ks_p"] = 0.0, 1.0
    return out


def random_frozen_system(rng, max_n=5, t=1.0, max_norm_t=2.0):
    """Random complex ``Gamma`` with zero diagonal and ``||Gamma||_2 t`` in ``[0.2, max_norm_t]``."""
    n = int(rng.integers(2, max_n + 1))
    G = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    np.fill_diagonal(G, 0.0)
    G *= rng.uniform(0.2, max_norm_t) / (t * np.linalg.norm(G, 2))
    return FrozenSystem(G, i0=int(rng.integers(n)))


@dataclass
class OracleCheck:
    check: str
    case: int
    statistic: float
    threshold: float
    passed: bool


def oracle_suite(seed, systems=20, max_n=5, t=1.0, n_traj=100000, dyson_terms=20,
                 jump_traj=10000, progress=None):
    """Run the frozen-system checks on ``systems`` random constant couplings.

    For each system: the largest Monte Carlo deviation from the exponential
    in units of its standard error (must stay below 3), the Dyson remainder
    (below ``1e-10``), and the chi-square and KS p-values of the jump law of
    the absolute rates (above 0.01).  Returns a list of :class:`OracleCheck`.
    """
    master = np.random.SeedSequence(seed)
    out = []
    for case, child in enumerate(master.spawn(systems)):
        rng = np.random.default_rng(child)
        fs = random_frozen_system(rng, max_n=max_n, t=t)
        col = theta_matrix(fs, t)[:, fs.i0]
        sub = [int(v) for v in rng.integers(0, 2 ** 63, size=2)]
        mean, se = mc_frozen_estimate(fs, t, n_traj, sub[0])
        z = np.abs(mean - col) / np.maximum(se, 1e-300)
        z = np.where((se == 0) & (np.abs(mean - col) < 1e-12), 0.0, z)
        out.append(OracleCheck("mc_vs_expm_sigma", case, float(z.max()), 3.0, bool(z.max() < 3.0)))
        d = float(np.abs(dyson_truncated(fs, t, dyson_terms) - col).max())
        out.append(OracleCheck("dyson_vs_expm", case, d, 1e-10, d < 1e-10))
        jd = jump_density_check(np.abs(fs.at(0.0)), t, 8, jump_traj, sub[1], i0=fs.i0)
        out.append(OracleCheck("jump_count_chi2_p", case, jd["chi2_p"], 0.01, jd["chi2_p"] > 0.01))
        out.append(OracleCheck("first_jump_ks_p", case, jd["ks_p"], 0.01, jd["ks_p"] > 0.01))
        if progress is not None:
            progress(case, out[-4:])
    return out
