"""The surface hopping jump process and complete trajectories.

A trajectory starts from a beam drawn by an :class:`InitialSampler`, follows
the beam ODEs of its current surface, and hops when the survival factor
``exp(omega_tilde - Re omega)`` falls below a uniform draw ``1 - Y``.  At a hop
the target surface is drawn with probability proportional to ``|G[j, k]|`` and
``Im omega`` collects the phase of that coupling entry.

Random numbers come from one counter-based generator per trajectory, keyed by
``(trajectory index, master seed)``, so a trajectory's result never depends on
how trajectories are grouped or scheduled.  Draw order per trajectory: the
initial surface, the sampler's beam parameters, the first ``Y``, then per hop
the target draw followed by a fresh ``Y``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .beam import FieldGrid, GaussianBeam, accumulate_beam
from .dynamics import (
    DynamicState,
    IntegrationError,
    leave_rates,
    refine_hop_time,
    rhs,
    rk3_step,
)
from .problems import ExtendedIndex

__all__ = [
    "trajectory_rng",
    "JumpRecord",
    "Hop",
    "SurfaceDensity",
    "PointMassDensity",
    "InitialSampler",
    "normalize_density",
    "make_sampler_ex1",
    "make_sampler_ex2",
    "make_sampler_tully_ecr",
    "make_sampler_single_crossing",
    "make_point_sampler",
    "mixture",
    "sample_hop_target",
    "hop_phase",
    "apply_hop",
    "TrajectoryResult",
    "BlockResult",
    "simulate_block",
    "run_trajectory",
    "write_trajectory_csv",
    "TrajectoryError",
    "default_sampler",
    "initial_field",
]


def trajectory_rng(master_seed, index):
    """Generator for trajectory ``index`` under ``master_seed`` (both unsigned 64-bit)."""
    key = np.array([int(index) & 0xFFFFFFFFFFFFFFFF, int(master_seed) & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class TrajectoryError(RuntimeError):
    """A trajectory failed; carries the seed and index needed to replay it."""

    def __init__(self, message, master_seed, index):
        super().__init__(f"{message} [master_seed={master_seed}, trajectory={index}]")
        self.master_seed = master_seed
        self.index = index


# ---------------------------------------------------------------------------
# jump records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hop:
    t: float
    frm: ExtendedIndex
    to: ExtendedIndex
    phase: float
    X: tuple = ()


@dataclass
class JumpRecord:
    """Ordered hops of one trajectory."""

    initial_surface: ExtendedIndex
    hops: List[Hop] = field(default_factory=list)

    @property
    def times(self):
        return np.array([h.t for h in self.hops])

    def __len__(self):
        return len(self.hops)

    def validate(self):
        t = self.times
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise AssertionError("hop times are not strictly increasing")
        for h in self.hops:
            if h.frm == h.to:
                raise AssertionError("hop to the same surface")
            if not -math.pi < h.phase <= math.pi:
                raise AssertionError(f"phase {h.phase} outside (-pi, pi]")


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


class SurfaceDensity:
    """Probability density over beam parameters for one initial surface.

    Subclasses implement :meth:`draw`, returning ``(M, N, X, P, S, A)`` where
    ``A`` already carries the normalization constant of the density.
    """

    m: int

    def draw(self, gen):
        raise NotImplementedError


class PointMassDensity(SurfaceDensity):
    """A single fixed beam (the density is a point mass)."""

    def __init__(self, beam):
        self.beam = beam
        self.m = beam.m

    def draw(self, gen):
        b = self.beam
        return b.M, b.N, b.X, b.P, b.S, b.A


class CallableDensity(SurfaceDensity):
    def __init__(self, m, fn):
        self.m = m
        self._fn = fn

    def draw(self, gen):
        return self._fn(gen)


class InitialSampler:
    """Initial surfaces with a parameter density each.

    Parameters
    ----------
    surfaces : sequence of ExtendedIndex or int
        The surfaces carrying nonzero initial data.
    densities : sequence of SurfaceDensity
        One per surface.
    """

    def __init__(self, surfaces, densities, name="custom"):
        if len(surfaces) != len(densities) or not surfaces:
            raise ValueError("need one density per initial surface, and at least one")
        self.surfaces = tuple(
            s if isinstance(s, ExtendedIndex) else ExtendedIndex(int(s)) for s in surfaces
        )
        self.densities = tuple(densities)
        self.m = self.densities[0].m
        self.name = name

    def __repr__(self):
        return f"InitialSampler({self.name!r}, surfaces={list(self.surfaces)})"

    def draw(self, gen, n):
        """Draw ``(flat surface index, M, N, X, P, S, A)`` for one trajectory."""
        count = len(self.surfaces)
        pos = min(int(gen.random() * count), count - 1)
        M, N, X, P, S, A = self.densities[pos].draw(gen)
        return self.surfaces[pos].flat(n), M, N, X, P, S, A * count


def make_point_sampler(beam, surface=0):
    """Sampler that always starts from ``beam`` on ``surface``."""
    return InitialSampler([surface], [PointMassDensity(beam)], name="point")


def normalize_density(raw_f, raw_A, C=None, nodes=None, weights=None):
    """Turn a signed/complex parameter density into a probability density.

    ``raw_f`` and ``raw_A`` are callables on parameter points.  ``C``, the
    integral of ``|raw_f|``, is either given or computed as
    ``sum(weights * |raw_f(nodes)|)``.  Returns ``(f, A, C)`` with ``f = |raw_f| / C``
    and ``A = raw_A * C * raw_f / |raw_f|``, so ``f * A == raw_f * raw_A``.
    """
    if C is None:
        if nodes is None or weights is None:
            raise ValueError("give either C or quadrature nodes and weights")
        C = float(np.sum(np.asarray(weights) * np.abs(raw_f(nodes))))
    C = float(C)
    if not C > 0 or not math.isfinite(C):
        raise ValueError(f"density normalization must be positive and finite, got {C}")

    def f(theta):
        return np.abs(raw_f(theta)) / C

    def A(theta):
        rf = np.asarray(raw_f(theta))
        mag = np.abs(rf)
        phase = np.where(mag > 0, rf / np.where(mag > 0, mag, 1.0), 1.0)
        return raw_A(theta) * C * phase

    return f, A, C


def make_sampler_ex1(epsilon):
    """Centers ``X ~ Normal(0, (1 - eps) I)``, unit width, amplitude ``1/eps``.

    Superposes to ``exp(-|x|^2 / 2)`` on surface 0.
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    sd = math.sqrt(1.0 - epsilon)
    eye = np.eye(2)
    zero = np.zeros((2, 2))
    p0 = np.zeros(2)
    amp = 1.0 / epsilon

    def draw(gen):
        return eye, zero, sd * gen.standard_normal(2), p0, 0.0, amp

    return InitialSampler([0], [CallableDensity(2, draw)], name="ex1")


def make_sampler_ex2(epsilon=None):
    """The single unit beam ``exp(-|x|^2 / 2 eps)`` at the origin on surface 0."""
    return InitialSampler(
        [0], [PointMassDensity(GaussianBeam.isotropic(np.zeros(2)))], name="ex2"
    )


def make_sampler_tully_ecr(epsilon, r0=-1.5, p0=1.5):
    """One beam of width ``M = 2I`` on ``u22`` centred at ``(r0, p0)``."""
    beam = GaussianBeam(
        2.0 * np.eye(2), np.zeros((2, 2)), [r0, p0], [0.0, 0.0], 0.0,
        1.0 / (math.sqrt(32.0 * math.pi) * epsilon),
    )
    return InitialSampler([1], [PointMassDensity(beam)], name="tully_ecr")


def single_crossing_beam(q1, p1, q2, p2, epsilon, r0, p0):
    """Beam parameters for one draw of the coherent-state pair decomposition.

    Returns ``(X, P, S, A)``; the width is ``M = 2I`` and ``N = 0``.
    """
    X = np.array([0.5 * (q1 + q2), 0.5 * (p1 + p2)])
    P = np.array([p1 - p2, -(q1 - q2)])
    S = -0.5 * (q1 - q2) * (p1 + p2)
    phase = ((p1 + 2.0 * p0) * (q1 - r0) - (p2 + 2.0 * p0) * (q2 - r0)) / (3.0 * epsilon)
    A = 6.0 / math.sqrt(math.pi * epsilon) * np.exp(1j * phase)
    return X, P, S, A


def make_sampler_single_crossing(epsilon, r0=0.4, p0=1.0):
    """Initial data ``sqrt(2/(pi eps)) exp(-(r-r0)^2/2eps - 2(p-p0)^2/eps)`` on ``u11``.

    The Wigner-type initial value is written as a superposition of beams
    indexed by two phase-space points ``(q1, p1)``, ``(q2, p2)``; the points
    have independent normal laws with variance ``3 eps`` in position and
    ``3 eps / 2`` in momentum.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    sq = math.sqrt(3.0 * epsilon)
    sp = math.sqrt(1.5 * epsilon)
    M = 2.0 * np.eye(2)
    zero = np.zeros((2, 2))

    def draw(gen):
        z = gen.standard_normal(4)
        q1, p1, q2, p2 = r0 + sq * z[0], p0 + sp * z[1], r0 + sq * z[2], p0 + sp * z[3]
        X, P, S, A = single_crossing_beam(q1, p1, q2, p2, epsilon, r0, p0)
        return M, zero, X, P, S, A

    return InitialSampler([0], [CallableDensity(2, draw)], name="single_crossing")


def mixture(first, second, theta):
    """Sampler for the initial data ``theta * first + (1 - theta) * second``.

    Each trajectory draws one extra uniform to pick a component; amplitudes are
    unchanged, so the estimate of the mixture is the weighted sum.
    """
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1]")

    class _Mixture(InitialSampler):
        def __init__(self):
            self.surfaces = first.surfaces + second.surfaces
            self.m = first.m
            self.name = f"mixture({first.name},{second.name})"

        def draw(self, gen, n):
            pick = first if gen.random() < theta else second
            return pick.draw(gen, n)

    return _Mixture()


# ---------------------------------------------------------------------------
# hops
# ---------------------------------------------------------------------------


def _as_index(sys, s):
    if isinstance(s, ExtendedIndex):
        return s
    return ExtendedIndex.from_flat(int(s), sys.n)


def _invert_column(col, k, u):
    """Cumulative inversion over the rates ``col`` (self entry ``k`` excluded)."""
    total = 0.0
    for j in range(col.size):
        if j != k:
            total = total + col[j]
    if not total > 0:
        raise RuntimeError("hop drawn from a surface with zero total rate")
    level = u * total
    cum = 0.0
    last = -1
    for j in range(col.size):
        if j == k or col[j] == 0:
            continue
        cum = cum + col[j]
        last = j
        if cum >= level:
            return j
    return last


def sample_hop_target(sys, frm, t, X, rng):
    """Draw the surface to hop to from ``frm``.

    ``rng`` is a Generator or an already drawn uniform in ``[0, 1)``.  Targets
    are scanned in extended-index order; zero-rate entries are skipped.
    """
    frm = _as_index(sys, frm)
    u = rng if isinstance(rng, (float, np.floating)) else rng.random()
    X = np.asarray(X, dtype=float)
    G = sys.extended_coupling(np.asarray([t], dtype=float), X[None])[0]
    k = frm.flat(sys.n)
    col = np.abs(G[:, k])
    return ExtendedIndex.from_flat(_invert_column(col, k, u), sys.n)


def hop_phase(g):
    """``arg g`` in ``(-pi, pi]``; ``-0.0`` imaginary parts do not give ``-pi``."""
    ph = float(np.angle(g))
    return math.pi if ph <= -math.pi else ph


def apply_hop(state, frm, to, gamma_val):
    """Return the state after a hop from ``frm`` to ``to``.

    ``gamma_val`` is the extended coupling entry ``G[to, frm]``.  ``Im omega``
    gains its argument; when the conjugation flag changes, the stored beam is
    replaced by its conjugate (``A -> conj A, S -> -S, P -> -P, N -> -N,
    omega -> conj omega``).  States on conjugated surfaces are stored
    conjugated, so the phase enters with a minus sign there.
    """
    if gamma_val == 0:
        raise ValueError("hop along a zero coupling")
    frm = frm if isinstance(frm, ExtendedIndex) else ExtendedIndex(*frm)
    to = to if isinstance(to, ExtendedIndex) else ExtendedIndex(*to)
    out = state.copy()
    ph = hop_phase(gamma_val)
    out.omega = out.omega + 1j * (-ph if frm.conjugated else ph)
    if frm.conjugated != to.conjugated:
        _switch(out, slice(None))
    return out


def _switch(state, idx):
    state.A[idx] = np.conj(state.A[idx])
    state.S[idx] = -state.S[idx]
    state.P[idx] = -state.P[idx]
    state.N[idx] = -state.N[idx]
    state.omega[idx] = np.conj(state.omega[idx])


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryResult:
    final_state: DynamicState
    final_surface: ExtendedIndex
    record: JumpRecord
    trace: Optional[list] = None

    @property
    def weight(self):
        return complex(np.exp(self.final_state.omega[0]))


@dataclass
class BlockResult:
    """Final states of a block of trajectories.

    ``surfaces`` holds flat extended indices.  ``records`` and ``traces`` are
    filled only when requested.  ``failed`` marks trajectories dropped under
    ``on_error="drop"``; their state is left where the failure happened.
    """

    state: DynamicState
    surfaces: np.ndarray
    start: int
    records: Optional[list] = None
    traces: Optional[list] = None
    n_hops: Optional[np.ndarray] = None
    failed: Optional[np.ndarray] = None


_RELAX_STEPS = 8


def simulate_block(
    sys,
    sampler,
    T,
    dt,
    master_seed,
    start,
    count,
    record=False,
    trace=False,
    end_tol=1e-12,
    on_error="raise",
    max_halvings=6,
):
    """Run trajectories ``start .. start+count-1`` to time ``T``, vectorized.

    Each loop iteration advances every unfinished trajectory by
    ``min(dt, T - t)``; trajectories that hop within the step stop at the hop
    time and continue from there on the next iteration.

    A step that leaves the admissible beam manifold is retried for that
    trajectory with the step halved, up to ``max_halvings`` times; the
    reduced step relaxes back one level after ``_RELAX_STEPS`` good steps.
    Trajectories that never fail are unaffected.  When halving is exhausted
    the run raises :class:`TrajectoryError` naming the trajectory, or with
    ``on_error="drop"`` marks it in ``failed`` and stops it; the others are
    unaffected because each one draws from its own random stream.
    """
    if on_error not in ("raise", "drop"):
        raise ValueError("on_error must be 'raise' or 'drop'")
    if not T > 0:
        raise ValueError("T must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = sys.n
    m = sys.m
    if sampler.m != m:
        raise ValueError(f"sampler dimension {sampler.m} does not match system m={m}")
    gens = [trajectory_rng(master_seed, start + b) for b in range(count)]
    st = DynamicState.empty(count, m)
    surf = np.empty(count, dtype=np.int64)
    Y = np.empty(count)
    for b, gen in enumerate(gens):
        k, M, N, X, P, S, A = sampler.draw(gen, n)
        surf[b] = k
        st.M[b] = M
        st.N[b] = N
        st.X[b] = X
        st.P[b] = P
        st.S[b] = S
        st.A[b] = A
        Y[b] = gen.random()
    if np.any(surf >= sys.n_extended):
        raise ValueError("sampler surface outside the system")
    wt = np.zeros(count)  # Re(omega) at the last hop
    n_hops = np.zeros(count, dtype=np.int64)
    records = (
        [JumpRecord(ExtendedIndex.from_flat(k, n)) for k in surf] if record else None
    )
    traces = [[] for _ in range(count)] if trace else None
    if trace:
        for b in range(count):
            traces[b].append(_trace_row(st, surf, b, n))

    active = np.arange(count)
    failed = np.zeros(count, dtype=bool)
    level = np.zeros(count, dtype=np.int64)  # step is dt / 2**level
    calm = np.zeros(count, dtype=np.int64)

    def fail(exc, b):
        if on_error == "raise" or exc.index is None:
            raise TrajectoryError(str(exc), master_seed, start + b) from exc
        failed[b] = True

    dt = float(dt)
    while active.size:
        sub = st.take(active)
        ks = surf[active]
        h = np.minimum(dt / 2.0 ** level[active], T - sub.t)
        try:
            k1 = rhs(sys, ks, sub.t, sub)
            new = rk3_step(sys, ks, sub, h, k1=k1)
        except IntegrationError as exc:
            b = active[exc.index]
            if exc.index is not None and level[b] < max_halvings:
                level[b] += 1
                calm[b] = 0
            else:
                fail(exc, b)
                active = active[~failed[active]]
            continue
        calm[active] += 1
        relax = active[(calm[active] >= _RELAX_STEPS) & (level[active] > 0)]
        level[relax] -= 1
        calm[relax] = 0
        thr = wt[active] - np.log1p(-Y[active])
        hop = np.real(new.omega) >= thr
        if hop.any():
            hi = np.flatnonzero(hop)
            ka = ks[hi]
            after = new.take(hi)
            rate1 = leave_rates(sys, ka, after.t, after.X)
            try:
                th, hs = refine_hop_time(
                    sys, ka, sub.take(hi), h[hi], wt[active[hi]], Y[active[hi]],
                    state_after=after, rate0=np.real(k1.omega[hi]), rate1=rate1,
                )
            except IntegrationError as exc:
                fail(exc, active[hi[exc.index]])
                active = active[~failed[active]]
                continue
            hs.t = th
            G = sys.extended_coupling(th, hs.X)
            for q, j in enumerate(hi):
                b = active[j]
                gen = gens[b]
                kf = int(ka[q])
                col = np.abs(G[q, :, kf])
                kt = _invert_column(col, kf, gen.random())
                g = G[q, kt, kf]
                ph = hop_phase(g)
                frm_conj = kf >= n
                hs.omega[q] = hs.omega[q] + 1j * (-ph if frm_conj else ph)
                if frm_conj != (kt >= n):
                    _switch(hs, q)
                surf[b] = kt
                Y[b] = gen.random()
                wt[b] = np.real(hs.omega[q])
                n_hops[b] += 1
                if record:
                    records[b].hops.append(
                        Hop(float(th[q]), ExtendedIndex.from_flat(kf, n),
                            ExtendedIndex.from_flat(kt, n), ph, tuple(hs.X[q]))
                    )
            new.put(hi, hs)
        done = new.t >= T - end_tol * max(1.0, T)
        new.t[done] = T
        st.put(active, new)
        if trace:
            for j, b in enumerate(active):
                traces[b].append(_trace_row(st, surf, b, n))
        active = active[~done]
    return BlockResult(st, surf, start, records, traces, n_hops, failed)


def _trace_row(st, surf, b, n):
    k = int(surf[b])
    return (
        float(st.t[b]), k % n, int(k >= n), *st.X[b].tolist(), *st.P[b].tolist(),
        float(np.real(st.omega[b])), float(np.imag(st.omega[b])),
    )


def run_trajectory(sys, sampler, T, dt, rng_seed, index=0, trace=False):
    """Run one trajectory; ``(rng_seed, index)`` selects its random stream."""
    res = simulate_block(sys, sampler, T, dt, rng_seed, index, 1, record=True, trace=trace)
    return TrajectoryResult(
        final_state=res.state,
        final_surface=ExtendedIndex.from_flat(int(res.surfaces[0]), sys.n),
        record=res.records[0],
        trace=res.traces[0] if trace else None,
    )


def write_trajectory_csv(path, result, n):
    """Dump a traced trajectory: one row per step plus ``HOP`` rows.

    Step rows are ``t, surface, conj, X..., P..., Re_omega, Im_omega``.  Hop rows
    are ``HOP, t_k, from, to, phase`` with ``from``/``to`` as flat extended
    indices (``surface + n * conj``) and written before the first step row at
    or after the hop.
    """
    if result.trace is None:
        raise ValueError("trajectory was run without trace=True")
    m = result.final_state.m
    header = ["t", "surface", "conj"] + [f"X{d}" for d in range(m)] + [
        f"P{d}" for d in range(m)
    ] + ["Re_omega", "Im_omega"]
    hops = list(result.record.hops)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        hi = 0
        for row in result.trace:
            while hi < len(hops) and hops[hi].t <= row[0]:
                h = hops[hi]
                w.writerow(["HOP", repr(h.t), h.frm.flat(n), h.to.flat(n), repr(h.phase)])
                hi += 1
            w.writerow([repr(row[0]), row[1], row[2]] + [repr(v) for v in row[3:]])


def default_sampler(sys, **kwargs):
    """The initial data that goes with a built-in problem."""
    makers = {
        "ex1": make_sampler_ex1,
        "ex2": make_sampler_ex2,
        "tully_ecr": make_sampler_tully_ecr,
        "single_crossing": make_sampler_single_crossing,
    }
    name = sys.name[: -len("-doubled")] if sys.name.endswith("-doubled") else sys.name
    if name not in makers:
        raise ValueError(f"no default initial data for problem {sys.name!r}")
    return makers[name](sys.epsilon, **kwargs)


def initial_field(sys, axes, **kwargs):
    """The exact initial data of a built-in problem on a node grid.

    This is what the default sampler reconstructs in expectation; keyword
    arguments are the sampler's (``r0``, ``p0`` for the QCLE problems).
    """
    name = sys.name[: -len("-doubled")] if sys.name.endswith("-doubled") else sys.name
    grid = FieldGrid(axes, sys.params.get("conjugate_half", sys.n))
    x = grid.nodes()
    eps = sys.epsilon
    if name == "ex1":
        grid.values[..., 0] = np.exp(-0.5 * np.sum(x * x, axis=-1))
    elif name == "ex2":
        grid.values[..., 0] = np.exp(-0.5 * np.sum(x * x, axis=-1) / eps)
    elif name == "tully_ecr":
        sampler = make_sampler_tully_ecr(eps, **kwargs)
        beam = sampler.densities[0].beam
        accumulate_beam(grid, sampler.surfaces[0].base_surface, 1.0, beam, eps, cutoff=np.inf)
    elif name == "single_crossing":
        r0 = kwargs.get("r0", 0.4)
        p0 = kwargs.get("p0", 1.0)
        q = (x[..., 0] - r0) ** 2 / (2.0 * eps) + 2.0 * (x[..., 1] - p0) ** 2 / eps
        grid.values[..., 0] = math.sqrt(2.0 / (math.pi * eps)) * np.exp(-q)
    else:
        raise ValueError(f"no built-in initial data for problem {sys.name!r}")
    return grid
