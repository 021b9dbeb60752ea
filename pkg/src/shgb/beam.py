"""Gaussian beams and the uniform grids they are deposited on."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = [
    "GaussianBeam",
    "FieldGrid",
    "eval_beam",
    "accumulate_beam",
    "accumulate_beams",
    "beam_l2_norm",
    "BeamError",
    "DEFAULT_CUTOFF",
]

DEFAULT_CUTOFF = 40.0


class BeamError(ValueError):
    """A beam parameter set violates the symmetric/positive-definite invariants."""


def symmetrize(a):
    """Mirror the upper triangle of the trailing square axes onto the lower one."""
    a = np.array(a, dtype=float, copy=True)
    iu = np.triu_indices(a.shape[-1], 1)
    a[..., iu[1], iu[0]] = a[..., iu[0], iu[1]]
    return a


@dataclass(frozen=True)
class GaussianBeam:
    """Parameters of ``A exp(-(x-X)^T (M + iN)(x-X)/2eps + iP.(x-X)/eps + iS/eps)``.

    ``M`` and ``N`` are mirrored from their upper triangles on construction, and
    ``M`` must be positive definite.
    """

    M: np.ndarray
    N: np.ndarray
    X: np.ndarray
    P: np.ndarray
    S: float
    A: complex

    def __post_init__(self):
        X = np.array(self.X, dtype=float).reshape(-1)
        m = X.size
        M = symmetrize(np.asarray(self.M, dtype=float).reshape(m, m))
        N = symmetrize(np.asarray(self.N, dtype=float).reshape(m, m))
        P = np.array(self.P, dtype=float).reshape(m)
        S = float(self.S)
        A = complex(self.A)
        if not (
            np.all(np.isfinite(M)) and np.all(np.isfinite(N)) and np.all(np.isfinite(X))
            and np.all(np.isfinite(P)) and math.isfinite(S)
            and math.isfinite(A.real) and math.isfinite(A.imag)
        ):
            raise BeamError("beam parameters must be finite")
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise BeamError(f"M is not positive definite: {M.tolist()}") from None
        for name, val in (("M", M), ("N", N), ("X", X), ("P", P), ("S", S), ("A", A)):
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def m(self):
        return self.X.size

    @classmethod
    def isotropic(cls, X, width=1.0, A=1.0):
        X = np.asarray(X, dtype=float)
        m = X.size
        return cls(width * np.eye(m), np.zeros((m, m)), X, np.zeros(m), 0.0, A)


def eval_beam(beam, epsilon, x):
    """Evaluate a beam at points ``x`` of shape ``(m,)`` or ``(..., m)``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != beam.m:
        raise ValueError(f"point dimension {x.shape[-1]} does not match beam m={beam.m}")
    if np.isnan(x).any():
        raise ValueError("NaN in evaluation point")
    d = x - beam.X
    Q = beam.M + 1j * beam.N
    quad = np.einsum("...i,ij,...j->...", d, Q, d)
    lin = d @ beam.P
    val = beam.A * np.exp((-0.5 * quad + 1j * (lin + beam.S)) / epsilon)
    return val[()] if val.ndim == 0 else val


def beam_l2_norm(beam, epsilon):
    """Closed-form L2 norm ``|A| (pi eps)^(m/4) det(M)^(-1/4)``."""
    return abs(beam.A) * (math.pi * epsilon) ** (beam.m / 4) * np.linalg.det(beam.M) ** -0.25


class FieldGrid:
    """Complex values on a uniform node grid, one layer per surface.

    ``values`` has shape ``(*counts, n_surfaces)``.  Axis ``d`` holds the nodes
    ``linspace(min_d, max_d, count_d)``.  Monte Carlo estimates set
    ``dropped`` to the number of discarded trajectories.
    """

    dropped = 0

    def __init__(self, axes, n_surfaces, values=None):
        axes = [(float(lo), float(hi), int(c)) for lo, hi, c in axes]
        if not axes:
            raise ValueError("a grid needs at least one axis")
        for d, (lo, hi, c) in enumerate(axes):
            if c < 2:
                raise ValueError(f"axis {d}: count must be >= 2, got {c}")
            if not hi > lo:
                raise ValueError(f"axis {d}: max must exceed min")
        if int(n_surfaces) < 1:
            raise ValueError("n_surfaces must be >= 1")
        self.axes = tuple(axes)
        self.n_surfaces = int(n_surfaces)
        shape = self.counts + (self.n_surfaces,)
        if values is None:
            values = np.zeros(shape, dtype=complex)
        else:
            values = np.asarray(values, dtype=complex)
            if values.size != np.prod(shape):
                raise ValueError(f"values size {values.size} does not match grid {shape}")
            values = values.reshape(shape)
        self.values = values

    @property
    def m(self):
        return len(self.axes)

    @property
    def counts(self):
        return tuple(c for _, _, c in self.axes)

    @property
    def spacing(self):
        return np.array([(hi - lo) / (c - 1) for lo, hi, c in self.axes])

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def coords(self, d):
        lo, hi, c = self.axes[d]
        return np.linspace(lo, hi, c)

    def nodes(self):
        """All node coordinates, shape ``(*counts, m)``."""
        mesh = np.meshgrid(*[self.coords(d) for d in range(self.m)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def surface(self, i):
        return self.values[..., i]

    def zeros_like(self):
        return FieldGrid(self.axes, self.n_surfaces)

    def copy(self):
        return FieldGrid(self.axes, self.n_surfaces, self.values.copy())

    def same_grid(self, other):
        return self.axes == other.axes and self.n_surfaces == other.n_surfaces

    def subsample(self, stride):
        """Grid on every ``stride``-th node; each axis count must fit exactly."""
        axes = []
        for lo, hi, c in self.axes:
            if (c - 1) % stride:
                raise ValueError(f"count {c} is not compatible with stride {stride}")
            axes.append((lo, hi, (c - 1) // stride + 1))
        sl = tuple(slice(None, None, stride) for _ in self.axes)
        return FieldGrid(axes, self.n_surfaces, self.values[sl].copy())

    def restrict(self, axes):
        """Values on a sub-box whose nodes coincide with nodes of this grid."""
        sl = []
        out_axes = []
        for d, ((lo, hi, c), (slo, shi, sc)) in enumerate(zip(self.axes, axes)):
            h = (hi - lo) / (c - 1)
            i0 = (slo - lo) / h
            i1 = (shi - lo) / h
            step = (shi - slo) / (sc - 1) / h
            ri0, ri1, rstep = round(i0), round(i1), round(step)
            tol = 1e-9 * max(1.0, abs(i1))
            if (abs(i0 - ri0) > tol or abs(i1 - ri1) > tol or abs(step - rstep) > tol
                    or rstep < 1 or ri0 < 0 or ri1 > c - 1):
                raise ValueError(f"axis {d}: ({slo}, {shi}, {sc}) is not a node sub-box")
            sl.append(slice(ri0, ri1 + 1, rstep))
            out_axes.append((float(slo), float(shi), int(sc)))
        return FieldGrid(out_axes, self.n_surfaces, self.values[tuple(sl)].copy())

    def __repr__(self):
        return f"FieldGrid(axes={list(self.axes)}, n_surfaces={self.n_surfaces})"

    def to_csv(self, path):
        idx = np.indices(self.values.shape).reshape(self.values.ndim, -1).T
        flat = self.values.reshape(-1)
        with open(path, "w") as fh:
            for d, (lo, hi, c) in enumerate(self.axes):
                fh.write(f"# axis {d}: {lo!r} {hi!r} {c}\n")
            cols = [idx[:, k].astype(str) for k in range(idx.shape[1])]
            re = np.char.mod("%.17g", flat.real)
            im = np.char.mod("%.17g", flat.imag)
            lines = cols + [re, im]
            body = lines[0]
            for col in lines[1:]:
                body = np.char.add(np.char.add(body, ","), col)
            fh.write("\n".join(body.tolist()))
            fh.write("\n")

    @classmethod
    def from_csv(cls, path):
        axes = []
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    head, _, rest = line[1:].partition(":")
                    if not head.strip().startswith("axis"):
                        continue
                    lo, hi, c = rest.split()
                    axes.append((float(lo), float(hi), int(c)))
                else:
                    rows.append(line)
        if not axes:
            raise ValueError(f"{path}: no axis header lines")
        data = np.loadtxt(rows, delimiter=",", ndmin=2)
        m = len(axes)
        n_surfaces = int(data[:, m].max()) + 1
        grid = cls(axes, n_surfaces)
        index = tuple(data[:, k].astype(int) for k in range(m + 1))
        grid.values[index] = data[:, m + 1] + 1j * data[:, m + 2]
        return grid


def _check_grid_beam(grid, surface, m):
    if grid.m != m:
        raise ValueError(f"grid dimension {grid.m} does not match beam dimension {m}")
    if not 0 <= surface < grid.n_surfaces:
        raise IndexError(f"surface {surface} out of range for {grid.n_surfaces} surfaces")


def accumulate_beam(grid, surface, weight, beam, epsilon, cutoff=DEFAULT_CUTOFF):
    """Add ``weight * beam`` to one surface of ``grid`` in place and return the grid.

    Nodes with ``(x-X)^T M (x-X) > 2 eps cutoff`` are skipped.
    """
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    _check_grid_beam(grid, surface, beam.m)
    if weight == 0:
        return grid
    accumulate_beams(
        grid,
        np.array([surface]),
        np.array([complex(weight)]),
        beam.X[None],
        beam.M[None],
        beam.N[None],
        beam.P[None],
        np.array([beam.S]),
        np.array([beam.A]),
        epsilon,
        cutoff,
    )
    return grid


def accumulate_beams(grid, surfaces, weights, X, M, N, P, S, A, epsilon, cutoff=DEFAULT_CUTOFF):
    """Deposit a batch of beams, in order, into ``grid.values`` (in place)."""
    surfaces = np.asarray(surfaces, dtype=np.int64)
    if surfaces.size == 0:
        return grid
    if surfaces.min() < 0 or surfaces.max() >= grid.n_surfaces:
        raise IndexError("surface index out of range")
    X = np.ascontiguousarray(X, dtype=float)
    if X.shape[1] != grid.m:
        raise ValueError(f"grid dimension {grid.m} does not match beam dimension {X.shape[1]}")
    # fold weight, amplitude and the constant phase into one complex factor
    amp = np.asarray(weights, dtype=complex) * np.asarray(A, dtype=complex) * np.exp(
        1j * np.asarray(S, dtype=float) / epsilon
    )
    args = (
        surfaces,
        amp,
        X,
        np.ascontiguousarray(M, dtype=float),
        np.ascontiguousarray(N, dtype=float),
        np.ascontiguousarray(P, dtype=float),
        float(epsilon),
        float(cutoff),
    )
    if grid.m == 2 and numba is not None:
        lo = np.array([a[0] for a in grid.axes])
        h = grid.spacing
        _deposit2d(grid.values, lo, h, *args)
    else:
        _deposit_generic(grid, *args)
    return grid


def _deposit_generic(grid, surfaces, amp, X, M, N, P, epsilon, cutoff):
    lo = np.array([a[0] for a in grid.axes])
    h = grid.spacing
    counts = np.array(grid.counts)
    r2 = 2.0 * epsilon * cutoff
    for b in range(surfaces.size):
        if amp[b] == 0:
            continue
        if math.isinf(cutoff):
            start = np.zeros(grid.m, dtype=int)
            stop = counts - 1
        else:
            half = np.sqrt(r2 * np.diag(np.linalg.inv(M[b])))
            start = np.maximum(np.ceil((X[b] - half - lo) / h), 0).astype(int)
            stop = np.minimum(np.floor((X[b] + half - lo) / h), counts - 1).astype(int)
        if np.any(stop < start):
            continue
        axes = [lo[d] + h[d] * np.arange(start[d], stop[d] + 1) for d in range(grid.m)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        d = pts - X[b]
        qm = np.einsum("...i,ij,...j->...", d, M[b], d)
        qn = np.einsum("...i,ij,...j->...", d, N[b], d)
        val = amp[b] * np.exp((-0.5 * (qm + 1j * qn) + 1j * (d @ P[b])) / epsilon)
        val[qm > r2] = 0.0
        sl = tuple(slice(start[k], stop[k] + 1) for k in range(grid.m))
        grid.values[sl + (surfaces[b],)] += val


_REFRESH = 64

if numba is not None:

    @numba.njit(cache=True)
    def _deposit2d(values, lo, h, surfaces, amp, X, M, N, P, epsilon, cutoff):
        n0 = values.shape[0]
        n1 = values.shape[1]
        r2 = 2.0 * epsilon * cutoff
        inv_eps = 1.0 / epsilon
        for b in range(surfaces.shape[0]):
            a = amp[b]
            if a == 0:
                continue
            s = surfaces[b]
            m11 = M[b, 0, 0]
            m12 = M[b, 0, 1]
            m22 = M[b, 1, 1]
            q11 = complex(m11, N[b, 0, 0])
            q12 = complex(m12, N[b, 0, 1])
            q22 = complex(m22, N[b, 1, 1])
            x0 = X[b, 0]
            x1 = X[b, 1]
            p0 = P[b, 0]
            p1 = P[b, 1]
            det = m11 * m22 - m12 * m12
            if math.isinf(r2):
                i_lo = 0
                i_hi = n0 - 1
            else:
                half0 = math.sqrt(r2 * m22 / det)
                i_lo = max(int(math.ceil((x0 - half0 - lo[0]) / h[0])), 0)
                i_hi = min(int(math.floor((x0 + half0 - lo[0]) / h[0])), n0 - 1)
            # second difference of the exponent along a row is constant
            step2 = np.exp(-q22 * h[1] * h[1] * inv_eps)
            for i in range(i_lo, i_hi + 1):
                dx = lo[0] + i * h[0] - x0
                if math.isinf(r2):
                    j_lo = 0
                    j_hi = n1 - 1
                else:
                    disc = m12 * m12 * dx * dx - m22 * (m11 * dx * dx - r2)
                    if disc < 0.0:
                        continue
                    root = math.sqrt(disc)
                    ylo = x1 + (-m12 * dx - root) / m22
                    yhi = x1 + (-m12 * dx + root) / m22
                    j_lo = max(int(math.ceil((ylo - lo[1]) / h[1])), 0)
                    j_hi = min(int(math.floor((yhi - lo[1]) / h[1])), n1 - 1)
                if j_hi < j_lo:
                    continue
                dy0 = lo[1] - x1
                # E as a function of dy: -(q11 dx^2 + 2 q12 dx dy + q22 dy^2)/2eps + i(p0 dx + p1 dy)/eps
                e0 = (-0.5 * q11 * dx * dx + 1j * p0 * dx) * inv_eps
                e1 = (-q12 * dx + 1j * p1) * inv_eps
                e2 = -0.5 * q22 * inv_eps
                j = j_lo
                while j <= j_hi:
                    dy = dy0 + j * h[1]
                    val = a * np.exp(e0 + e1 * dy + e2 * dy * dy)
                    # ratio E(j+1) - E(j) = e1 h + e2 h (2 dy + h)
                    ratio = np.exp(e1 * h[1] + e2 * h[1] * (2.0 * dy + h[1]))
                    stop = min(j + _REFRESH, j_hi + 1)
                    for jj in range(j, stop):
                        values[i, jj, s] += val
                        val *= ratio
                        ratio *= step2
                    j = stop
