"""Monte Carlo field estimates, error norms and convergence studies."""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_axes, check_int, check_points, check_positive, check_seed
from .beam import DEFAULT_CUTOFF, FieldGrid, accumulate_beams
from .dynamics import default_dt
from .hopping import BlockResult, InitialSampler, simulate_block

__all__ = [
    "EstimatorConfig",
    "estimate",
    "l2_error",
    "relative_l2_error",
    "ErrorReport",
    "convergence_study",
    "derived_seed",
    "SurfaceHoppingGaussianBeam",
    "final_ensemble",
]


@dataclass
class EstimatorConfig:
    """Run parameters for :func:`estimate`.

    ``dt=None`` resolves to ``min(0.01, eps/4)``.  ``workers`` only changes the
    wall time, never the result.  ``on_error="drop"`` lets trajectories that
    leave the admissible beam manifold contribute zero instead of aborting
    the run; the number dropped is reported on the returned grid.
    """

    n_traj: int
    T: float
    axes: Sequence
    dt: Optional[float] = None
    master_seed: int = 0
    cutoff: float = DEFAULT_CUTOFF
    block_size: int = 1024
    workers: int = 1
    on_error: str = "raise"

    def __post_init__(self):
        if self.on_error not in ("raise", "drop"):
            raise ValueError(f"on_error must be 'raise' or 'drop', got {self.on_error!r}")
        self.n_traj = check_int("n_traj", self.n_traj, minimum=1)
        self.T = check_positive("T", self.T)
        if self.dt is not None:
            self.dt = check_positive("dt", self.dt)
        self.axes = check_axes("axes", self.axes)
        self.master_seed = check_seed("master_seed", self.master_seed)
        self.cutoff = check_positive("cutoff", self.cutoff, allow_inf=True)
        self.block_size = check_int("block_size", self.block_size, minimum=1)
        self.workers = check_int("workers", self.workers, minimum=1)

    def resolved_dt(self, epsilon):
        return self.dt if self.dt is not None else default_dt(epsilon)


def _output_surfaces(sys):
    return sys.params.get("conjugate_half", sys.n)


def _deposit_block(sys, res, grid, cutoff):
    """Add every trajectory of a block result to ``grid`` in trajectory order."""
    if res.failed is not None and res.failed.any():
        keep = ~res.failed
        res = BlockResult(res.state.take(keep), res.surfaces[keep], res.start)
    st = res.state
    k = res.surfaces
    weight = np.exp(st.omega)
    A, S, P, N = st.A, st.S, st.P, st.N
    half = sys.params.get("conjugate_half")
    if half is not None:
        # explicit 2n-surface form: surfaces >= half carry conj(u)
        w = k >= half
        weight = np.where(w, np.conj(weight), weight)
        A = np.where(w, np.conj(A), A)
        S = np.where(w, -S, S)
        P = np.where(w[:, None], -P, P)
        N = np.where(w[:, None, None], -N, N)
        base = np.where(w, k - half, k)
    else:
        base = k % sys.n
    accumulate_beams(grid, base, weight, st.X, st.M, N, P, S, A, sys.epsilon, cutoff)


def _block_bounds(n_traj, block_size):
    return [(s, min(block_size, n_traj - s)) for s in range(0, n_traj, block_size)]


_JOB = None


def _run_block(args):
    sys, sampler, cfg, dt = _JOB
    start, count = args
    res = simulate_block(sys, sampler, cfg.T, dt, cfg.master_seed, start, count, on_error=cfg.on_error)
    grid = FieldGrid(cfg.axes, _output_surfaces(sys))
    _deposit_block(sys, res, grid, cfg.cutoff)
    return grid.values, int(res.failed.sum())


def estimate(sys, sampler, cfg):
    """Monte Carlo estimate of the solution at time ``cfg.T`` on ``cfg.axes``.

    Each trajectory contributes ``exp(omega) G`` to its final surface.  For
    systems with conjugate couplings, trajectories on a conjugated surface add
    the conjugate of their contribution to the base surface, which the stored
    (already conjugated) beam gives directly.  Blocks of trajectories build
    private partial grids that are summed in block order.  The returned grid
    carries ``dropped``, the number of trajectories discarded under
    ``cfg.on_error="drop"`` (the average still divides by ``cfg.n_traj``).
    """
    if not isinstance(sampler, InitialSampler):
        raise TypeError("sampler must be an InitialSampler")
    if len(cfg.axes) != sys.m:
        raise ValueError(f"grid has {len(cfg.axes)} axes but the system has m={sys.m}")
    dt = cfg.resolved_dt(sys.epsilon)
    global _JOB
    _JOB = (sys, sampler, cfg, dt)
    blocks = _block_bounds(cfg.n_traj, cfg.block_size)
    total = FieldGrid(cfg.axes, _output_surfaces(sys))
    dropped = 0
    try:
        if cfg.workers > 1 and len(blocks) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx) as pool:
                parts = pool.map(_run_block, blocks)
                for values, nf in parts:
                    total.values += values
                    dropped += nf
        else:
            for b in blocks:
                values, nf = _run_block(b)
                total.values += values
                dropped += nf
    finally:
        _JOB = None
    total.values /= cfg.n_traj
    total.dropped = dropped
    return total


def final_ensemble(sys, sampler, T, dt, master_seed, n_traj, block_size=1024, on_error="raise"):
    """Final beams of ``n_traj`` trajectories as arrays, in output representation.

    Returns a dict with ``surface`` (output surface index), ``weight``
    (``exp(omega)``, zero for dropped trajectories) and the beam fields
    ``X, M, N, P, S, A``.
    """
    parts = []
    half = sys.params.get("conjugate_half")
    for start, count in _block_bounds(n_traj, block_size):
        res = simulate_block(sys, sampler, T, dt, master_seed, start, count, on_error=on_error)
        if res.failed.any():
            # a dropped beam may be degenerate: replace it by a zero-weight unit beam
            f = res.failed
            res.state.omega[f] = -np.inf
            res.state.M[f] = np.eye(sys.m)
            res.state.N[f] = 0
            res.state.X[f] = 0
            res.state.P[f] = 0
            res.state.S[f] = 0
            res.state.A[f] = 0
        st = res.state
        k = res.surfaces
        weight = np.exp(st.omega)
        A, S, P, N = st.A.copy(), st.S.copy(), st.P.copy(), st.N.copy()
        if half is not None:
            w = k >= half
            weight[w] = np.conj(weight[w])
            A[w] = np.conj(A[w])
            S[w] = -S[w]
            P[w] = -P[w]
            N[w] = -N[w]
            base = np.where(w, k - half, k)
        else:
            base = k % sys.n
        parts.append(dict(surface=base, weight=weight, X=st.X, M=st.M, N=N, P=P, S=S, A=A))
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def _check_pair(est, ref):
    if not est.same_grid(ref):
        raise ValueError(f"grids differ: {est!r} vs {ref!r}")


def l2_error(est, ref, component=None):
    """Discrete L2 norm of ``est - ref`` per surface, weighted by the cell volume.

    ``component`` may be ``"real"`` or ``"imag"`` to measure one part only.
    """
    _check_pair(est, ref)
    d = est.values - ref.values
    if component == "real":
        d = d.real
    elif component == "imag":
        d = d.imag
    elif component is not None:
        raise ValueError("component must be None, 'real' or 'imag'")
    axes = tuple(range(est.m))
    return np.sqrt(np.sum(np.abs(d) ** 2, axis=axes) * est.cell_volume)


def relative_l2_error(est, ref, component=None):
    """:func:`l2_error` divided by the norm of the reference (same component)."""
    zero = ref.zeros_like()
    return l2_error(est, ref, component) / l2_error(ref, zero, component)


def derived_seed(master_seed, *keys):
    """Independent 64-bit seed for a sub-run, derived from the master seed."""
    ss = np.random.SeedSequence([int(master_seed)] + [int(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])


def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass
class ErrorReport:
    """L2 errors of repeated estimates for a list of trajectory counts.

    ``errors`` has shape ``(len(n_list), repeats, n_surfaces)``; the total error
    over all surfaces is ``sqrt(sum of squares)``.
    """

    n_list: np.ndarray
    errors: np.ndarray
    relative: Optional[np.ndarray] = None

    @property
    def total(self):
        return np.sqrt(np.sum(self.errors ** 2, axis=-1))

    @property
    def mean_error(self):
        return self.total.mean(axis=1)

    @property
    def std_error(self):
        return self.total.std(axis=1, ddof=1)

    @property
    def slope(self):
        """Least-squares slope of log mean error against log N."""
        return _slope(self.n_list, self.mean_error)

    @property
    def std_slope(self):
        """Slope of the log standard deviation (across repeats) against log N."""
        return _slope(self.n_list, self.std_error)

    @property
    def repeat_slopes(self):
        return np.array([_slope(self.n_list, self.total[:, r]) for r in range(self.total.shape[1])])

    @property
    def slope_stddev(self):
        """Spread of the per-repeat slopes."""
        return float(np.std(self.repeat_slopes, ddof=1))

    @property
    def slope_ci(self):
        """Standard error of the mean slope."""
        return self.slope_stddev / math.sqrt(self.total.shape[1])

    def to_csv(self, path):
        n_surf = self.errors.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N_traj", "surface", "mean_err", "std_err"])
            for a, n in enumerate(self.n_list):
                for s in range(n_surf):
                    e = self.errors[a, :, s]
                    w.writerow([int(n), s, repr(float(e.mean())), repr(float(e.std(ddof=1)))])
                w.writerow([int(n), "all", repr(float(self.mean_error[a])),
                            repr(float(self.std_error[a]))])
            fh.write(f"# slope, stddev: {self.slope!r}, {self.slope_stddev!r}\n")
            fh.write(f"# std slope: {self.std_slope!r}\n")


def convergence_study(sys, sampler, cfg, n_list, repeats, reference, progress=None):
    """Errors against ``reference`` for each ``N`` in ``n_list``, ``repeats`` times.

    Repeat ``r`` at size ``N`` uses the seed ``derived_seed(cfg.master_seed, N, r)``.
    """
    n_list = np.asarray([check_int("n_list entry", n, 1) for n in n_list])
    if n_list.size < 2 or np.any(np.diff(n_list) <= 0):
        raise ValueError("n_list must be increasing with at least two entries")
    repeats = check_int("repeats", repeats, minimum=2)
    if not reference.same_grid(FieldGrid(cfg.axes, _output_surfaces(sys))):
        raise ValueError("reference grid does not match cfg.axes")
    errors = np.zeros((n_list.size, repeats, reference.n_surfaces))
    rel = np.zeros_like(errors)
    ref_norm = l2_error(reference, reference.zeros_like())
    for a, n in enumerate(n_list):
        for r in range(repeats):
            sub = EstimatorConfig(
                n_traj=int(n), T=cfg.T, axes=cfg.axes, dt=cfg.dt,
                master_seed=derived_seed(cfg.master_seed, n, r), cutoff=cfg.cutoff,
                block_size=cfg.block_size, workers=cfg.workers, on_error=cfg.on_error,
            )
            err = l2_error(estimate(sys, sampler, sub), reference)
            errors[a, r] = err
            rel[a, r] = err / np.where(ref_norm > 0, ref_norm, 1.0)
            if progress is not None:
                progress(int(n), r, err)
    return ErrorReport(n_list, errors, rel)


class SurfaceHoppingGaussianBeam(BaseEstimator):
    """Estimator-style front end to the surface hopping Gaussian beam solver.

    ``fit()`` runs the trajectory ensemble and stores the grid estimate in
    ``field_`` and the final beams in ``ensemble_``; ``predict(X)`` evaluates
    the ensemble average at arbitrary points and returns an array of shape
    ``(len(X), n_surfaces)``.

    Parameters
    ----------
    problem : str or CoefficientBundle
        Built-in problem id or a bundle.
    epsilon : float, optional
        Passed to the built-in problem.
    sampler : InitialSampler, optional
        Defaults to the built-in sampler of the problem.
    """

    def __init__(self, problem="ex1", epsilon=0.1, sampler=None, T=0.5, dt=None,
                 n_traj=10000, axes=((-4.0, 4.0, 81), (-4.0, 4.0, 81)), master_seed=0,
                 cutoff=DEFAULT_CUTOFF, block_size=1024, workers=1, on_error="raise"):
        self.problem = problem
        self.epsilon = epsilon
        self.sampler = sampler
        self.T = T
        self.dt = dt
        self.n_traj = n_traj
        self.axes = axes
        self.master_seed = master_seed
        self.cutoff = cutoff
        self.block_size = block_size
        self.workers = workers
        self.on_error = on_error

    def _system(self):
        from .problems import get_problem, CoefficientBundle
        from .hopping import default_sampler

        if isinstance(self.problem, CoefficientBundle):
            sys = self.problem
            if self.sampler is None:
                raise ValueError("a sampler is required for a custom problem")
        else:
            sys = get_problem(self.problem, epsilon=check_positive("epsilon", self.epsilon))
        sampler = self.sampler if self.sampler is not None else default_sampler(sys)
        return sys, sampler

    def fit(self, X=None, y=None):
        sys, sampler = self._system()
        cfg = EstimatorConfig(
            n_traj=self.n_traj, T=self.T, axes=self.axes, dt=self.dt,
            master_seed=self.master_seed, cutoff=self.cutoff,
            block_size=self.block_size, workers=self.workers, on_error=self.on_error,
        )
        self.system_ = sys
        self.field_ = estimate(sys, sampler, cfg)
        self.ensemble_ = final_ensemble(
            sys, sampler, cfg.T, cfg.resolved_dt(sys.epsilon), cfg.master_seed,
            cfg.n_traj, cfg.block_size, cfg.on_error,
        )
        self.n_surfaces_ = self.field_.n_surfaces
        return self

    def predict(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "ensemble_")
        X = check_points(X, self.system_.m)
        ens = self.ensemble_
        eps = self.system_.epsilon
        out = np.zeros((X.shape[0], self.n_surfaces_), dtype=complex)
        chunk = max(1, 2_000_000 // max(X.shape[0], 1))
        for lo in range(0, ens["X"].shape[0], chunk):
            sl = slice(lo, lo + chunk)
            d = X[None, :, :] - ens["X"][sl, None, :]
            Q = ens["M"][sl] + 1j * ens["N"][sl]
            quad = np.einsum("bki,bij,bkj->bk", d, Q, d)
            lin = np.einsum("bki,bi->bk", d, ens["P"][sl])
            amp = ens["weight"][sl] * ens["A"][sl] * np.exp(1j * ens["S"][sl] / eps)
            val = amp[:, None] * np.exp((-0.5 * quad + 1j * lin) / eps)
            for s in range(self.n_surfaces_):
                mask = ens["surface"][sl] == s
                out[:, s] += val[mask].sum(axis=0)
        return out / self.n_traj
