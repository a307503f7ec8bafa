"""
Seeded path ensembles for X (scalar) and Y = (X1, X2) (planar).

Two samplers:

* ``exact`` draws X on the grid from the Cholesky-type factor of the
  covariance matrix; no driving noise exists and ``noise`` is None.
* ``volterra`` draws the Wiener increments dW_j ~ N(0, dt_j) and forms
  X(t_i) = sum_{j<i} K(t_i, m_j) dW_j with m_j the cell midpoint. The
  noise is kept for coupled experiments and Fourier--Wiener weighting.

Path p of a run with seed (master, stream) only ever uses the Philox
stream keyed by (master, stream ^ p).
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import CovarianceMatrix, cov_matrix
from .hilbert import TimeGrid
from .kernels import KernelSpec, eval_kernel
from .rng import Seed, as_seed, chunked, normal_rows

PLANAR_OFFSET = 1 << 62


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    paths: np.ndarray
    noise: np.ndarray | None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for a in (self.paths, self.noise):
            if a is not None:
                a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.paths.shape[0]

    @property
    def has_noise(self) -> bool:
        return self.noise is not None

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.paths).tobytes())
        if self.noise is not None:
            h.update(np.ascontiguousarray(self.noise).tobytes())
        return h.hexdigest()

    def split(self, k: int) -> tuple["PathEnsemble", "PathEnsemble"]:
        """First k paths and the rest."""
        nz = (None, None) if self.noise is None else (self.noise[:k], self.noise[k:])
        return (
            PathEnsemble(self.grid, self.paths[:k].copy(), None if nz[0] is None else nz[0].copy(), dict(self.meta)),
            PathEnsemble(self.grid, self.paths[k:].copy(), None if nz[1] is None else nz[1].copy(), dict(self.meta)),
        )


@dataclass(frozen=True, eq=False)
class PlanarEnsemble:
    first: PathEnsemble
    second: PathEnsemble

    def __post_init__(self):
        if self.first.grid != self.second.grid or self.first.n != self.second.n:
            raise ValueError("planar components must share grid and size")

    @property
    def grid(self) -> TimeGrid:
        return self.first.grid

    @property
    def n(self) -> int:
        return self.first.n

    @property
    def kernel(self) -> KernelSpec | None:
        return self.first.meta.get("kernel")

    def digest(self) -> str:
        return hashlib.sha256((self.first.digest() + self.second.digest()).encode()).hexdigest()


def _meta(kernel, seed: Seed, sampler: str, grid: TimeGrid) -> dict:
    return {
        "kernel": kernel,
        "kernel_id": kernel.digest() if isinstance(kernel, KernelSpec) else str(kernel),
        "seed": seed.to_dict(),
        "sampler": sampler,
        "grid": grid.digest(),
    }


# exact sampler ------------------------------------------------------------------

def iter_exact(cov: CovarianceMatrix, n: int, seed):
    """Yield ``(start, paths)`` chunks of the exact sampler."""
    seed = as_seed(seed)
    L = cov.factor
    dim = L.shape[0]
    for a in range(0, n, 256):
        b = min(a + 256, n)
        yield a, normal_rows(seed, a, b, dim) @ L.T


def sample_exact(cov: CovarianceMatrix, n: int, seed, kernel=None) -> PathEnsemble:
    if n < 1:
        raise ValueError("need at least one path")
    seed = as_seed(seed)
    L = cov.factor
    dim = L.shape[0]
    parts = chunked(n, lambda a, b: normal_rows(seed, a, b, dim) @ L.T)
    paths = np.concatenate(parts, axis=0)
    meta = _meta(kernel if kernel is not None else cov.kernel_id, seed, "exact", cov.grid)
    meta["noise"] = "absent (exact sampler has no driving noise)"
    return PathEnsemble(cov.grid, paths, None, meta)


# Volterra sampler -----------------------------------------------------------------

def volterra_matrix(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """B[i, j] = K(t_i, m_j) for j < i, else 0."""
    t = grid.nodes
    B = eval_kernel(spec, t[:, None], grid.midpoints[None, :])
    return np.tril(B, -1)


def _volterra_block(spec: KernelSpec, grid: TimeGrid, B, seed: Seed, a: int, b: int):
    dw = normal_rows(seed, a, b, grid.M) * np.sqrt(grid.cells)
    x = np.zeros((b - a, grid.M + 1))
    if spec.family == "wiener":
        np.cumsum(dw, axis=1, out=x[:, 1:])
        if spec.scale != 1.0:
            x *= spec.scale
    else:
        x[:, 1:] = dw @ B[1:].T
    return x, dw


def iter_volterra(spec: KernelSpec, grid: TimeGrid, n: int, seed, chunk: int = 256):
    """Yield ``(start, paths, noise)`` chunks without holding the full ensemble."""
    seed = as_seed(seed)
    B = None if spec.family == "wiener" else volterra_matrix(spec, grid)
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        x, dw = _volterra_block(spec, grid, B, seed, a, b)
        yield a, x, dw


def sample_volterra(spec: KernelSpec, grid: TimeGrid, n: int, seed) -> PathEnsemble:
    if n < 1:
        raise ValueError("need at least one path")
    seed = as_seed(seed)
    B = None if spec.family == "wiener" else volterra_matrix(spec, grid)
    parts = chunked(n, lambda a, b: _volterra_block(spec, grid, B, seed, a, b))
    paths = np.concatenate([p[0] for p in parts], axis=0)
    noise = np.concatenate([p[1] for p in parts], axis=0)
    return PathEnsemble(grid, paths, noise, _meta(spec, seed, "volterra", grid))


def sample_planar(spec: KernelSpec, grid: TimeGrid, n: int, seed, sampler: str = "volterra") -> PlanarEnsemble:
    seed = as_seed(seed)
    seeds = (seed, seed.offset(PLANAR_OFFSET))
    if sampler == "volterra":
        comps = [sample_volterra(spec, grid, n, s) for s in seeds]
    elif sampler == "exact":
        cov = cov_matrix(spec, grid)
        comps = [sample_exact(cov, n, s, kernel=spec) for s in seeds]
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return PlanarEnsemble(*comps)


# statistics -----------------------------------------------------------------------

def empirical_cov(ens: PathEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased sample covariance and its normal-approximation standard error."""
    X = ens.paths
    n = X.shape[0]
    if n < 2:
        raise ValueError("empirical covariance needs at least two paths")
    Xc = X - X.mean(axis=0)
    R = Xc.T @ Xc / (n - 1)
    d = np.diag(R)
    se = np.sqrt(np.clip(np.outer(d, d) + R**2, 0.0, None) / n)
    return R, se


# persistence ----------------------------------------------------------------------

def ensemble_to_csv(ens: PathEnsemble) -> str:
    buf = io.StringIO()
    buf.write("path_id," + ",".join(f"t={t:.17g}" for t in ens.grid.nodes) + "\n")
    for p, row in enumerate(ens.paths):
        buf.write(f"{p}," + ",".join(f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue()


def save_ensemble(ens: PathEnsemble, out_dir: Path, stem: str, fmt: str = "csv") -> list[Path]:
    """Write paths (and noise, if any) plus a JSON sidecar; return file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    if fmt == "csv":
        p = out_dir / f"{stem}_paths.csv"
        p.write_text(ensemble_to_csv(ens))
        files.append(p)
        if ens.noise is not None:
            q = out_dir / f"{stem}_noise.csv"
            buf = io.StringIO()
            np.savetxt(buf, ens.noise, fmt="%.17g", delimiter=",")
            q.write_text(buf.getvalue())
            files.append(q)
    elif fmt == "binary":
        p = out_dir / f"{stem}_paths.npy"
        np.save(p, np.ascontiguousarray(ens.paths), allow_pickle=False)
        files.append(p)
        if ens.noise is not None:
            q = out_dir / f"{stem}_noise.npy"
            np.save(q, np.ascontiguousarray(ens.noise), allow_pickle=False)
            files.append(q)
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    side = {k: v for k, v in ens.meta.items() if k != "kernel"}
    side["n_paths"] = ens.n
    side["grid_M"] = ens.grid.M
    sp = out_dir / f"{stem}_meta.json"
    sp.write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")
    files.append(sp)
    return files


def load_paths(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1:]
