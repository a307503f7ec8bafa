"""
Volterra kernels K(t, s) on [0, 1]^2.

A :class:`KernelSpec` describes a kernel by family and parameters; it
evaluates vectorized over numpy arrays and is exactly zero for ``s > t``.

Families
--------
``wiener``      K = 1
``bridge``      K = (1 - t) / (1 - s), the canonical Volterra form of the
                Brownian bridge (covariance s (1 - t) for s <= t)
``ou``          K = exp(-rate (t - s))
``fbm``         Molchan--Golosov kernel of fractional Brownian motion;
                the scale ``c_h`` is calibrated so that Var X(1) = 1
``tabulated``   values on a grid, bilinear in between
``perturbed``   base + amplitude * bump(t, s), with |bump| <= 1

Every family accepts an overall multiplier ``scale``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import integrate, special
from scipy.interpolate import RegularGridInterpolator

from .hilbert import GridFunction, TimeGrid

FAMILIES = ("wiener", "bridge", "ou", "fbm", "tabulated", "perturbed")
STATIONARY_FAMILIES = ("wiener", "ou")

def smooth_bump(u):
    """C-infinity bump exp(1 - 1/(1 - u^2)) on (-1, 1), peak 1 at u = 0."""
    u = np.asarray(u, float)
    out = np.zeros(u.shape)
    m = np.abs(u) < 1
    out[m] = np.exp(1.0 - 1.0 / (1.0 - u[m] ** 2))
    return out


def _smooth_bump_du(u):
    u = np.asarray(u, float)
    out = np.zeros(u.shape)
    m = np.abs(u) < 1
    um = u[m]
    out[m] = np.exp(1.0 - 1.0 / (1.0 - um**2)) * (-2.0 * um / (1.0 - um**2) ** 2)
    return out


def _ones(t, s):
    return np.ones(np.broadcast(t, s).shape)


# Bump shapes b(t, s) for perturbed kernels: (value, d/dt, depends on t - s only).
# All satisfy |b| <= 1 on {0 <= s <= t <= 1}.
BUMP_SHAPES = {
    # smooth bump in the lag, supported on 0 < t - s < 1, peak at lag 1/2
    "smooth": (
        lambda t, s: smooth_bump(2 * (t - s) - 1),
        lambda t, s: 2 * _smooth_bump_du(2 * (t - s) - 1),
        True,
    ),
    "exp": (lambda t, s: np.exp(-(t - s)), lambda t, s: -np.exp(-(t - s)), True),
    "const": (_ones, lambda t, s: 0 * _ones(t, s), True),
    "ramp": (lambda t, s: t - s, _ones, True),
    "sine": (
        lambda t, s: np.sin(np.pi * t) * np.sin(np.pi * s),
        lambda t, s: np.pi * np.cos(np.pi * t) * np.sin(np.pi * s),
        False,
    ),
}


class KernelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tabulation:
    """Kernel values on a product grid; ``values[i, j] = K(t_i, s_j)``."""

    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        values = np.array(self.values, dtype=float)
        if values.shape != (nodes.size, nodes.size):
            raise KernelError("tabulated kernel must be square on its node set")
        if np.any(np.diff(nodes) <= 0):
            raise KernelError("tabulation nodes must be strictly increasing")
        nodes.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", values)
        # s > t entries are replaced by the diagonal value so that bilinear
        # interpolation below the diagonal never mixes in the structural zeros.
        filled = np.tril(values)
        i, j = np.triu_indices(nodes.size, 1)
        filled[i, j] = values[i, i]
        object.__setattr__(
            self,
            "_interp",
            RegularGridInterpolator((nodes, nodes), filled, bounds_error=False, fill_value=None),
        )

    def __call__(self, t, s):
        t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
        pts = np.stack([t.ravel(), s.ravel()], axis=-1)
        return self._interp(pts).reshape(t.shape)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    family: str
    rate: float = 1.0
    hurst: float = 0.5
    c_h: float | None = None
    table: Tabulation | None = field(default=None, repr=False)
    base: "KernelSpec | None" = None
    amplitude: float = 0.0
    shape: str = "smooth"
    scale: float = 1.0
    derivative: str = "analytic"
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        if self.family == "ou" and not self.rate > 0:
            raise KernelError("OU rate must be positive")
        if self.family == "fbm":
            if not 0 < self.hurst < 1:
                raise KernelError("Hurst index must lie in (0, 1)")
            if self.c_h is None:
                object.__setattr__(self, "c_h", calibrate_fbm(self.hurst))
        if self.family == "tabulated" and self.table is None:
            raise KernelError("tabulated kernel needs a table")
        if self.family == "perturbed":
            if self.base is None:
                raise KernelError("perturbed kernel needs a base kernel")
            if self.shape not in BUMP_SHAPES:
                raise KernelError(f"unknown bump shape {self.shape!r}")
            if self.amplitude < 0:
                raise KernelError("bump amplitude must be nonnegative")
        if self.derivative not in ("analytic", "fd"):
            raise KernelError("derivative mode must be 'analytic' or 'fd'")
        if not self.fd_step > 0:
            raise KernelError("finite-difference step must be positive")

    # constructors -----------------------------------------------------

    @classmethod
    def wiener(cls, scale: float = 1.0) -> "KernelSpec":
        return cls("wiener", scale=scale)

    @classmethod
    def bridge(cls, scale: float = 1.0) -> "KernelSpec":
        return cls("bridge", scale=scale)

    @classmethod
    def ou(cls, rate: float = 1.0, scale: float = 1.0) -> "KernelSpec":
        return cls("ou", rate=rate, scale=scale)

    @classmethod
    def fbm(cls, hurst: float, c_h: float | None = None) -> "KernelSpec":
        return cls("fbm", hurst=hurst, c_h=c_h)

    @classmethod
    def tabulated(cls, nodes, values) -> "KernelSpec":
        return cls("tabulated", table=Tabulation(nodes, values), derivative="fd")

    @classmethod
    def perturbed(cls, base: "KernelSpec", amplitude: float, shape: str = "smooth") -> "KernelSpec":
        return cls("perturbed", base=base, amplitude=amplitude, shape=shape)

    def scaled(self, factor: float) -> "KernelSpec":
        return replace(self, scale=self.scale * factor)

    # properties -------------------------------------------------------

    @property
    def stationary(self) -> bool:
        if self.family in STATIONARY_FAMILIES:
            return True
        if self.family == "perturbed":
            return self.base.stationary and BUMP_SHAPES[self.shape][2]
        return False

    @property
    def label(self) -> str:
        if self.family == "ou":
            return f"ou(rate={self.rate:g})"
        if self.family == "fbm":
            return f"fbm(H={self.hurst:g})"
        if self.family == "perturbed":
            return f"perturbed({self.base.label},a={self.amplitude:g},{self.shape})"
        return self.family

    # evaluation -------------------------------------------------------

    def __call__(self, t, s):
        return eval_kernel(self, t, s)

    def to_config(self) -> dict:
        params: dict = {}
        if self.family == "ou":
            params["rate"] = self.rate
        elif self.family == "fbm":
            params["hurst"] = self.hurst
            params["c_h"] = self.c_h
        elif self.family == "perturbed":
            params.update(base=self.base.to_config(), amplitude=self.amplitude, shape=self.shape)
        elif self.family == "tabulated":
            params["nodes"] = self.table.nodes.tolist()
            params["values"] = self.table.values.tolist()
        if self.scale != 1.0:
            params["scale"] = self.scale
        if self.derivative != "analytic" and self.family != "tabulated":
            params["derivative"] = self.derivative
            params["fd_step"] = self.fd_step
        return {"family": self.family, "params": params, "stationary": self.stationary}

    def digest(self) -> str:
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_CONFIG_PARAMS = {
    "wiener": set(),
    "bridge": set(),
    "ou": {"rate"},
    "fbm": {"hurst", "c_h"},
    "tabulated": {"nodes", "values", "csv"},
    "perturbed": {"base", "amplitude", "shape"},
}


def kernel_from_config(cfg: dict, base_dir: Path | None = None) -> KernelSpec:
    """Build a kernel from a ``{family, params, stationary}`` mapping.

    Unknown keys raise :class:`KeyError`; parameter values out of range raise
    :class:`KernelError`.
    """
    unknown = set(cfg) - {"family", "params", "stationary"}
    if unknown:
        raise KeyError(f"unknown kernel keys: {sorted(unknown)}")
    family = cfg.get("family")
    if family not in FAMILIES:
        raise KernelError(f"unknown kernel family {family!r}")
    params = dict(cfg.get("params") or {})
    allowed = _CONFIG_PARAMS[family] | {"scale", "derivative", "fd_step"}
    unknown = set(params) - allowed
    if unknown:
        raise KeyError(f"unknown kernel.params keys: {sorted(unknown)}")
    common = {k: params.pop(k) for k in ("scale", "derivative", "fd_step") if k in params}
    if family == "perturbed":
        base = kernel_from_config(params.pop("base"), base_dir)
        spec = KernelSpec("perturbed", base=base, **params, **common)
    elif family == "tabulated":
        if "csv" in params:
            path = Path(params["csv"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            spec = load_tabulated_csv(path)
        else:
            spec = KernelSpec.tabulated(params["nodes"], params["values"])
        if common:
            spec = replace(spec, **common)
    else:
        spec = KernelSpec(family, **params, **common)
    if "stationary" in cfg and bool(cfg["stationary"]) != spec.stationary:
        raise KernelError(
            f"kernel.stationary={cfg['stationary']} contradicts family {family!r}"
        )
    return spec


def load_tabulated_csv(path) -> KernelSpec:
    """Read a tabulated kernel from CSV with header ``t,s,value``."""
    text = Path(path).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or set(rows[0]) != {"t", "s", "value"}:
        raise KernelError("expected CSV header 't,s,value'")
    t = np.array([float(r["t"]) for r in rows])
    s = np.array([float(r["s"]) for r in rows])
    v = np.array([float(r["value"]) for r in rows])
    nodes = np.unique(t)
    if not np.array_equal(nodes, np.unique(s)) or t.size != nodes.size**2:
        raise KernelError("tabulated CSV must cover a full square grid")
    if nodes[0] != 0.0 or nodes[-1] != 1.0:
        raise KernelError("tabulated CSV grid must span [0, 1]")
    table = np.full((nodes.size, nodes.size), np.nan)
    table[np.searchsorted(nodes, t), np.searchsorted(nodes, s)] = v
    if np.isnan(table).any():
        raise KernelError("tabulated CSV has duplicate or missing grid points")
    return KernelSpec.tabulated(nodes, table)


def tabulated_to_csv(spec: KernelSpec) -> str:
    buf = io.StringIO()
    buf.write("t,s,value\n")
    n = spec.table.nodes
    for i, t in enumerate(n):
        for j, s in enumerate(n):
            buf.write(f"{t:.17g},{s:.17g},{spec.table.values[i, j]:.17g}\n")
    return buf.getvalue()


# fractional Brownian motion ------------------------------------------------

def _fbm_unit_kernel(H: float, t, s):
    """Molchan--Golosov kernel with unit constant, for 0 < s < t."""
    z = (t - s) / s
    if H > 0.5:
        a = H - 0.5
        # s^{1/2-H} int_s^t (u-s)^{H-3/2} u^{H-1/2} du
        integral = (t - s) ** a * s**a / a * special.hyp2f1(-a, a, a + 1, -z)
        return s ** (0.5 - H) * integral
    if H < 0.5:
        b = H + 0.5
        c = H - 1.5
        integral = (t - s) ** b * s**c / b * special.hyp2f1(-c, b, b + 1, -z)
        return (t / s) ** (H - 0.5) * (t - s) ** (H - 0.5) - (H - 0.5) * s ** (0.5 - H) * integral
    return np.ones_like(z)


def fbm_unit_kernel_quad(H: float, t: float, s: float) -> float:
    """Same kernel via adaptive quadrature of the inner integral (rtol 1e-8)."""
    if not 0 < s < t:
        return 0.0
    if H > 0.5:
        # algebraic endpoint weight (u - s)^(H - 3/2) handled by QAWS
        val, _ = integrate.quad(
            lambda u: u ** (H - 0.5), s, t, weight="alg", wvar=(H - 1.5, 0.0), epsrel=1e-8, limit=200
        )
        return s ** (0.5 - H) * val
    if H < 0.5:
        val, _ = integrate.quad(
            lambda u: (u - s) ** (H - 0.5) * u ** (H - 1.5), s, t, epsrel=1e-8, limit=200
        )
        return (t / s) ** (H - 0.5) * (t - s) ** (H - 0.5) - (H - 0.5) * s ** (0.5 - H) * val
    return 1.0


_FBM_CALIBRATION: dict[float, float] = {}


def calibrate_fbm(H: float) -> float:
    """Constant c_H making Var X(1) = int_0^1 K(1, s)^2 ds equal to one."""
    if H in _FBM_CALIBRATION:
        return _FBM_CALIBRATION[H]
    if H == 0.5:
        c = 1.0
    else:
        f = lambda s: float(_fbm_unit_kernel(H, 1.0, s)) ** 2
        # integrable endpoint singularities at s = 0 and (for H < 1/2) s = 1
        parts = [(0.0, 1e-6), (1e-6, 0.5), (0.5, 1.0 - 1e-6), (1.0 - 1e-6, 1.0)]
        with warnings.catch_warnings():
            # roundoff at 1e-11 is expected near the singular endpoints
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            total = sum(integrate.quad(f, a, b, epsrel=1e-11, epsabs=0, limit=500)[0] for a, b in parts)
        c = 1.0 / math.sqrt(total)
    _FBM_CALIBRATION[H] = c
    return c


# evaluation -------------------------------------------------------------------

def _raw(spec: KernelSpec, t, s):
    """Kernel on the closed lower triangle s <= t (values elsewhere unused)."""
    fam = spec.family
    if fam == "wiener":
        return np.ones(np.broadcast(t, s).shape)
    if fam == "ou":
        return np.exp(-spec.rate * (t - s))
    if fam == "bridge":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (1.0 - t) / (1.0 - s)
        return np.where(t >= 1.0, 0.0, out)
    if fam == "fbm":
        H = spec.hurst
        t, s = np.broadcast_arrays(t, s)
        out = np.zeros(t.shape)
        inside = (s > 0) & (s < t)
        if np.any(inside):
            out[inside] = _fbm_unit_kernel(H, t[inside], s[inside])
        if H < 0.5:
            out[(s == t) | ((s == 0) & (t > 0))] = np.inf
        elif H == 0.5:
            out[s <= t] = 1.0
        return spec.c_h * out
    if fam == "tabulated":
        return spec.table(t, s)
    if fam == "perturbed":
        bump = BUMP_SHAPES[spec.shape][0]
        return eval_kernel(spec.base, t, s) + spec.amplitude * bump(t, s)
    raise KernelError(fam)


def eval_kernel(spec: KernelSpec, t, s):
    """K(t, s), broadcasting over arrays; exactly zero when s > t."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any((t < 0) | (t > 1)) or np.any((s < 0) | (s > 1)):
        raise KernelError("kernel arguments must lie in [0, 1]")
    t, s = np.broadcast_arrays(t, s)
    lower = s <= t
    out = np.zeros(t.shape)
    if np.any(lower):
        out[lower] = spec.scale * np.asarray(_raw(spec, t[lower], s[lower]), dtype=float)
    return out if out.ndim else float(out)


def dt_kernel(spec: KernelSpec, t, s):
    """Partial derivative of K in t on s < t (zero above the diagonal)."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    t, s = np.broadcast_arrays(t, s)
    use_fd = spec.derivative == "fd" or spec.family == "tabulated"
    if use_fd or (spec.family == "fbm" and spec.hurst < 0.5):
        d = spec.fd_step
        hi = np.minimum(t + d, 1.0)
        lo = np.maximum(t - d, s)
        return (eval_kernel(spec, hi, s) - eval_kernel(spec, lo, s)) / np.where(hi > lo, hi - lo, 1.0)
    fam = spec.family
    lower = s < t
    out = np.zeros(t.shape)
    tt, ss = t[lower], s[lower]
    if fam == "wiener":
        vals = np.zeros(tt.shape)
    elif fam == "ou":
        vals = -spec.rate * np.exp(-spec.rate * (tt - ss))
    elif fam == "bridge":
        vals = -1.0 / (1.0 - ss)
    elif fam == "fbm":
        H = spec.hurst
        if H == 0.5:
            vals = np.zeros(tt.shape)
        else:
            vals = spec.c_h * ss ** (0.5 - H) * (tt - ss) ** (H - 1.5) * tt ** (H - 0.5)
    elif fam == "perturbed":
        vals = dt_kernel(spec.base, tt, ss) + spec.amplitude * BUMP_SHAPES[spec.shape][1](tt, ss)
    else:
        raise KernelError(fam)
    out[lower] = spec.scale * vals
    return out if out.ndim else float(out)


def kernel_slice(spec: KernelSpec, t: float, grid: TimeGrid) -> GridFunction:
    """g(t) = K(t, .) 1_[0, t) sampled on ``grid``.

    ``t`` snaps to the nearest node. The value at that node is zero (left-
    closed support) unless it is the last node of the grid, where the
    trapezoid weight is already a half cell.
    """
    if not 0 <= t <= 1:
        raise KernelError("t must lie in [0, 1]")
    i = grid.nearest(t)
    ti = grid.nodes[i]
    v = np.zeros_like(grid.nodes)
    if i > 0:
        v[:i] = eval_kernel(spec, ti, grid.nodes[:i])
    if i == grid.M:
        v[i] = eval_kernel(spec, ti, ti)
    return GridFunction(grid, v)


@dataclass
class ValidationReport:
    volterra_ok: bool
    sup_l2: float
    kernel_at_origin: float
    lipschitz_l: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "volterraOK": self.volterra_ok,
            "supL2": self.sup_l2,
            "kernelAtOrigin": self.kernel_at_origin,
            "lipschitzL": self.lipschitz_l,
            "warnings": list(self.warnings),
        }


def validate_kernel(spec: KernelSpec, grid: TimeGrid) -> ValidationReport:
    t = grid.nodes
    T, S = np.meshgrid(t, t, indexing="ij")
    K = eval_kernel(spec, T, S)
    notes: list[str] = []
    volterra_ok = bool(np.all(K[S > T] == 0.0))

    w = grid.weights
    rows = np.tril(K, -1)
    rows[-1, -1] = K[-1, -1]
    finite = np.isfinite(rows)
    sq = np.where(finite, rows, 0.0) ** 2
    sup_l2 = float(np.max(sq @ w))

    k00 = float(eval_kernel(spec, 0.0, 0.0))
    if not np.isfinite(k00) or abs(k00) < 1e-9:
        notes.append(
            f"K(0,0) = {k00:.3g}: the iterated-logarithm and local-time results assume K(0,0) != 0"
        )

    # difference quotients over adjacent times, on s <= t_1 where both rows live
    dt = np.diff(t)
    with np.errstate(invalid="ignore"):
        d = np.abs(K[1:] - K[:-1]) / dt[:, None]
    mask = S[:-1] <= T[:-1]
    singular_band = False
    if spec.family == "fbm" and spec.hurst < 0.5:
        # drop one cell around the diagonal and the s = 0 axis
        mask &= (S[:-1] < T[:-1] - dt[:, None]) & (S[:-1] > 0)
        singular_band = True
    d = np.where(mask & np.isfinite(d), d, 0.0)
    lip = float(d.max()) if d.size else 0.0
    if singular_band:
        notes.append(
            "fbm with H < 1/2: kernel is singular near s = t and s = 0, not Lipschitz in t; "
            "lipschitzL is the observed grid maximum off a one-cell band (reduced accuracy)"
        )
    if not np.all(finite):
        notes.append("kernel has non-finite values on the grid; they were excluded")
    return ValidationReport(volterra_ok, sup_l2, k00, lip, notes)
