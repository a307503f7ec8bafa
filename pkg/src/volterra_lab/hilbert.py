"""
Grid model of L2([0, 1]).

Functions are stored by their values on the nodes of a :class:`TimeGrid` and
integrated with the grid's quadrature weights (trapezoidal by default). The
module provides inner products, Gram matrices and determinants, modified
Gram--Schmidt with re-orthogonalization, orthogonal projections, and a
discrete Schur test for nonnegative integral kernels.

Step functions follow a left-closed convention: ``indicator(grid, a, b)`` is 1
on the nodes in ``[a, b)`` and 0 elsewhere (the last node is included when
``b`` is the right end of the grid). With this convention indicators of
adjacent intervals have disjoint node supports, so they stay exactly
orthogonal.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GridMismatchError(ValueError):
    pass


class NearDependenceError(ValueError):
    """Raised when a family of grid functions is numerically dependent."""

    def __init__(self, index: int, ratio: float):
        super().__init__(
            f"function {index} is numerically dependent on its predecessors "
            f"(residual/trace = {ratio:.3e})"
        )
        self.index = index


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    w = np.zeros_like(nodes)
    d = np.diff(nodes)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Quadrature grid on [0, 1].

    Parameters
    ----------
    nodes : array
        Strictly increasing, ``nodes[0] == 0`` and ``nodes[-1] == 1``.
    weights : array
        Nonnegative quadrature weights summing to one.
    scheme : str
        Label of the weight rule (``"trapezoid"`` or ``"rectangle"``).
    """

    nodes: np.ndarray
    weights: np.ndarray
    scheme: str = "trapezoid"

    def __post_init__(self):
        nodes = _freeze(self.nodes)
        weights = _freeze(self.weights)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a grid needs at least two nodes")
        if nodes[0] != 0.0 or nodes[-1] != 1.0:
            raise ValueError("grid nodes must start at 0 and end at 1")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        if weights.shape != nodes.shape or np.any(weights < 0):
            raise ValueError("weights must be nonnegative, one per node")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, M: int, scheme: str = "trapezoid") -> "TimeGrid":
        """Uniform grid with ``M`` cells (``M + 1`` nodes)."""
        if M < 1:
            raise ValueError("M must be positive")
        nodes = np.linspace(0.0, 1.0, M + 1)
        if scheme == "trapezoid":
            w = trapezoid_weights(nodes)
        elif scheme == "rectangle":
            w = np.full(M + 1, 1.0 / M)
            w[-1] = 0.0
        else:
            raise ValueError(f"unknown quadrature scheme {scheme!r}")
        w = w / w.sum()
        return cls(nodes, w, scheme)

    @classmethod
    def from_nodes(cls, nodes: Sequence[float]) -> "TimeGrid":
        nodes = np.asarray(nodes, dtype=float)
        w = trapezoid_weights(nodes)
        return cls(nodes, w / w.sum(), "trapezoid")

    @classmethod
    def geometric(cls, q: float, n_min: int, n_max: int) -> "TimeGrid":
        """Grid ``0, q**n_max, ..., q**n_min, 1`` used by the LIL experiment."""
        if not 0 < q < 1:
            raise ValueError("q must lie in (0, 1)")
        if n_min > n_max:
            raise ValueError("need n_min <= n_max")
        pts = q ** np.arange(n_max, n_min - 1, -1, dtype=float)
        nodes = np.concatenate([[0.0], pts[pts < 1.0], [1.0]])
        return cls.from_nodes(nodes)

    @property
    def M(self) -> int:
        return self.nodes.size - 1

    @property
    def cells(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    def nearest(self, t: float) -> int:
        """Index of the node closest to ``t``."""
        return int(np.abs(self.nodes - t).argmin())

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.scheme.encode())
        h.update(self.nodes.tobytes())
        h.update(self.weights.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return (
            self is other
            or (
                self.scheme == other.scheme
                and np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.weights, other.weights)
            )
        )

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class GridFunction:
    """An element of L2([0, 1]) sampled on the nodes of a grid."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = _freeze(self.values)
        if v.shape != self.grid.nodes.shape:
            raise ValueError(
                f"expected {self.grid.nodes.size} values, got {v.shape}"
            )
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: TimeGrid, f) -> "GridFunction":
        return cls(grid, np.asarray(f(grid.nodes), dtype=float) * np.ones_like(grid.nodes))

    @classmethod
    def constant(cls, grid: TimeGrid, c: float = 1.0) -> "GridFunction":
        return cls(grid, np.full_like(grid.nodes, c))

    @classmethod
    def indicator(cls, grid: TimeGrid, a: float, b: float) -> "GridFunction":
        """Left-closed step function 1 on [a, b); endpoints snap to nodes."""
        ia, ib = grid.nearest(a), grid.nearest(b)
        v = np.zeros_like(grid.nodes)
        v[ia:ib] = 1.0
        if ib == grid.M and ib > ia:
            v[ib] = 1.0
        return cls(grid, v)

    def norm_sq(self) -> float:
        return float(np.dot(self.grid.weights, self.values**2))

    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq()))

    def _check(self, other: "GridFunction"):
        if self.grid != other.grid:
            raise GridMismatchError("grid functions live on different grids")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check(other)
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check(other)
        return GridFunction(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> "GridFunction":
        return GridFunction(self.grid, c * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return GridFunction(self.grid, -self.values)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,value\n")
        for t, v in zip(self.grid.nodes, self.values):
            buf.write(f"{t:.17g},{v:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, grid: TimeGrid | None = None) -> "GridFunction":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != {"t", "value"}:
            raise ValueError("expected CSV header 't,value'")
        t = np.array([float(r["t"]) for r in rows])
        v = np.array([float(r["value"]) for r in rows])
        if grid is None:
            grid = TimeGrid.from_nodes(t)
        elif not np.array_equal(grid.nodes, t):
            raise GridMismatchError("CSV nodes do not match the supplied grid")
        return cls(grid, v)


@dataclass(frozen=True)
class GramResult:
    matrix: np.ndarray
    determinant: float
    singular: bool = False


def inner_product(f: GridFunction, g: GridFunction) -> float:
    f._check(g)
    return float(np.dot(f.grid.weights, f.values * g.values))


def _common_grid(fs: Sequence[GridFunction]) -> TimeGrid:
    if len(fs) == 0:
        raise ValueError("need at least one function")
    grid = fs[0].grid
    for f in fs[1:]:
        if f.grid != grid:
            raise GridMismatchError("grid functions live on different grids")
    return grid


def gram_matrix(fs: Sequence[GridFunction]) -> np.ndarray:
    grid = _common_grid(fs)
    V = np.stack([f.values for f in fs])
    A = (V * grid.weights) @ V.T
    return 0.5 * (A + A.T)


def ldl_determinant(A: np.ndarray, rel_tol: float = 1e-14) -> tuple[float, bool]:
    """Determinant of a symmetric PSD matrix via an LDL^T sweep.

    Pivots below ``rel_tol * trace`` are clamped to zero and flag the matrix
    as numerically singular.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    tr = float(np.trace(A))
    L = np.eye(n)
    d = np.zeros(n)
    singular = False
    for j in range(n):
        dj = A[j, j] - np.dot(L[j, :j] ** 2, d[:j])
        if dj <= rel_tol * tr:
            d[j] = 0.0
            singular = True
            continue
        d[j] = dj
        for i in range(j + 1, n):
            L[i, j] = (A[i, j] - np.dot(L[i, :j] * L[j, :j], d[:j])) / dj
    return float(np.prod(d)), singular


def gram(fs: Sequence[GridFunction]) -> GramResult:
    """Gram matrix and determinant of a family of grid functions."""
    A = gram_matrix(fs)
    det, singular = ldl_determinant(A)
    return GramResult(A, max(det, 0.0), singular)


def gram_schmidt(fs: Sequence[GridFunction], rel_tol: float = 1e-12) -> list[GridFunction]:
    """Unnormalized orthogonal system via modified Gram--Schmidt.

    Each vector is orthogonalized twice against its predecessors. The first
    element is returned unchanged.
    """
    grid = _common_grid(fs)
    w = grid.weights
    trace = sum(f.norm_sq() for f in fs)
    basis: list[np.ndarray] = []
    norms: list[float] = []
    for i, f in enumerate(fs):
        v = np.array(f.values, dtype=float)
        for _ in range(2):
            for b, nb in zip(basis, norms):
                v = v - (np.dot(w, v * b) / nb) * b
        nv = float(np.dot(w, v * v))
        if nv <= rel_tol * trace:
            raise NearDependenceError(i, nv / trace if trace > 0 else 0.0)
        basis.append(v)
        norms.append(nv)
    return [GridFunction(grid, b) for b in basis]


def project(h: GridFunction, fs: Sequence[GridFunction]) -> tuple[GridFunction, float]:
    """Orthogonal projection of ``h`` onto span(fs) and its squared norm."""
    ortho = gram_schmidt(fs)
    h._check(ortho[0])
    p = np.zeros_like(h.values)
    for e in ortho:
        p = p + (inner_product(h, e) / e.norm_sq()) * e.values
    ph = GridFunction(h.grid, p)
    return ph, ph.norm_sq()


def gram_quadratic_form(fs: Sequence[GridFunction], h: GridFunction) -> float:
    """<A^{-1} u, u> with A the Gram matrix of ``fs`` and u_i = <f_i, h>."""
    A = gram_matrix(fs)
    u = np.array([inner_product(f, h) for f in fs])
    return float(u @ np.linalg.solve(A, u))


@dataclass(frozen=True)
class SchurBound:
    alpha: float
    beta: float
    norm_bound_sq: float
    direct_norm_sq: float


def _power_iteration(B: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest eigenvalue of B^T B (squared top singular value of B)."""
    if not np.any(B):
        return 0.0
    x = np.random.default_rng(seed).random(B.shape[1]) + 0.5
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = B.T @ (B @ x)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    return lam


def schur_operator_bound(
    kernel: np.ndarray,
    p: GridFunction,
    q: GridFunction,
    lo: float = 0.0,
) -> SchurBound:
    """Discrete Schur test for the integral operator with a nonnegative kernel.

    ``kernel[i, j]`` holds the kernel at ``(s_i, s_j)`` on the nodes of the
    common grid of ``p`` and ``q``. Only nodes ``s >= lo`` take part; weights
    are re-derived (trapezoid) on that sub-grid so the domain is ``[lo, 1]``.

    Returns ``alpha = max (K q)/p``, ``beta = max (K^T p)/q``, the Schur bound
    ``alpha * beta`` and the squared operator norm of the discretized
    operator computed by power iteration.
    """
    p._check(q)
    grid = p.grid
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (grid.M + 1, grid.M + 1):
        raise ValueError("kernel must be tabulated on grid x grid")
    if np.any(kernel < 0):
        raise ValueError("Schur test needs a nonnegative kernel")
    keep = grid.nodes >= lo
    s = grid.nodes[keep]
    w = trapezoid_weights(s)
    K = kernel[np.ix_(keep, keep)]
    pv, qv = p.values[keep], q.values[keep]
    if np.any(~(pv > 0)) or np.any(~(qv > 0)):
        raise ValueError("p and q must be strictly positive on the domain")
    alpha = float(np.max((K @ (w * qv)) / pv))
    beta = float(np.max(((w * pv) @ K) / qv))
    sw = np.sqrt(w)
    B = sw[:, None] * K * sw[None, :]
    direct = _power_iteration(B)
    return SchurBound(alpha, beta, alpha * beta, direct)
