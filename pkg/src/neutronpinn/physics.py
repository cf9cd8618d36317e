"""Benchmark problems: coefficients, residuals, initial conditions, geometry.

Four problems are catalogued:

* ``p1`` -- 1D slab, one group, time dependent, analytical series solution.
* ``p2`` -- 2D square, one group, time dependent, Gaussian initial flux.
* ``p3`` -- 2D two-group, two-material static problem at fixed k_eff.
* ``p4`` -- 2D-IAEA quarter core, two-group eigenvalue problem.

Residual functions are vectorised: a :class:`DerivativeBundle` holds ``N``
points and every residual returns an array of length ``N``.  All residuals are
linear in the flux and its derivatives; the matching ``*_vjp`` helpers return
the cotangent bundles used during parameter back-propagation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.fft

from .autodiff import DerivativeBundle

# --------------------------------------------------------------------------
# one-group problems
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemP1Spec:
    """Infinite slab of thickness ``a`` (SI units), zero flux at ``x = +-a/2``."""

    v: float = 2.2e3
    D: float = 0.211e-2
    L2: float = 2.1037e-4
    a: float = 1.0
    k_inf: float = 1.0041
    ic_id: str = "phi1"
    t_end: float = 0.015

    def __post_init__(self):
        for name in ("v", "D", "L2", "a", "k_inf", "t_end"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.ic_id not in ("phi1", "phi2", "cos"):
            raise ValueError(f"unknown initial condition {self.ic_id!r}")

    name = "p1"
    input_dim = 2
    time_dependent = True

    @property
    def box(self):
        return np.array([-self.a / 2, 0.0]), np.array([self.a / 2, self.t_end])

    @property
    def critical_k_inf(self) -> float:
        """k_inf that makes k_eff = k_inf / (1 + L^2 B^2) equal to one, B = pi/a."""
        return 1.0 + self.L2 * (math.pi / self.a) ** 2

    def k_eff(self, k_inf=None) -> float:
        k = self.k_inf if k_inf is None else k_inf
        return k / (1.0 + self.L2 * (math.pi / self.a) ** 2)

    def with_k(self, k_inf: float) -> "ProblemP1Spec":
        return replace(self, k_inf=k_inf)

    def center(self):
        return np.array([0.0])


@dataclass(frozen=True)
class ProblemP2Spec:
    """2D square ``[-10, 10]^2`` cm, t in [0, t_end] s, zero flux on all edges."""

    v: float = 2.2e5
    D: float = 0.211
    L2: float = 2.1037
    half_width: float = 10.0
    k_inf: float = 1.1
    t_end: float = 1.0
    ic_id: str = "gauss"

    name = "p2"
    input_dim = 3
    time_dependent = True

    def __post_init__(self):
        for name in ("v", "D", "L2", "half_width", "k_inf", "t_end"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def box(self):
        h = self.half_width
        return np.array([-h, -h, 0.0]), np.array([h, h, self.t_end])

    @property
    def critical_k_inf(self) -> float:
        return 1.0 + self.L2 * 2.0 * (math.pi / (2 * self.half_width)) ** 2

    def with_k(self, k_inf: float) -> "ProblemP2Spec":
        return replace(self, k_inf=k_inf)

    def center(self):
        return np.array([0.0, 0.0])


def initial_condition(ic_id: str, points, a: float = 1.0) -> np.ndarray:
    """Initial flux at ``points`` (spatial coordinates only).

    ``phi1``/``phi2``/``cos`` are 1D slab profiles on ``[-a/2, a/2]``;
    ``gauss`` is the 2D profile ``exp(-(x^2+y^2)/20) - exp(-100)``.
    """
    p = np.asarray(points, dtype=np.float64)
    if ic_id == "gauss":
        p = np.atleast_2d(p)
        return np.exp(-(p[:, 0] ** 2 + p[:, 1] ** 2) / 20.0) - math.exp(-100.0)
    x = p[:, 0] if p.ndim == 2 else p
    if ic_id == "phi1":
        return np.cos(np.pi * x / a) - 0.4 * np.cos(2 * np.pi * x / a) - 0.4
    if ic_id == "phi2":
        return 0.5 * np.cos(2 * np.pi * x / a) + 0.5
    if ic_id == "cos":
        return np.cos(np.pi * x / a)
    raise ValueError(f"unknown initial condition {ic_id!r}")


def residual_p1(spec: ProblemP1Spec, b: DerivativeBundle) -> np.ndarray:
    """(1/(D v)) dphi/dt - d2phi/dx2 - ((k_inf - 1)/L^2) phi."""
    return (
        b.grad[:, 1] / (spec.D * spec.v)
        - b.hess[:, 0]
        - (spec.k_inf - 1.0) / spec.L2 * b.value
    )


def residual_p1_vjp(spec: ProblemP1Spec, rbar: np.ndarray) -> DerivativeBundle:
    n = rbar.shape[0]
    cot = DerivativeBundle.zeros(n, 2)
    cot.value = -(spec.k_inf - 1.0) / spec.L2 * rbar
    cot.grad[:, 1] = rbar / (spec.D * spec.v)
    cot.hess[:, 0] = -rbar
    return cot


def residual_p2(spec: ProblemP2Spec, b: DerivativeBundle) -> np.ndarray:
    return (
        b.grad[:, 2] / (spec.D * spec.v)
        - (b.hess[:, 0] + b.hess[:, 1])
        - (spec.k_inf - 1.0) / spec.L2 * b.value
    )


def residual_p2_vjp(spec: ProblemP2Spec, rbar: np.ndarray) -> DerivativeBundle:
    n = rbar.shape[0]
    cot = DerivativeBundle.zeros(n, 3)
    cot.value = -(spec.k_inf - 1.0) / spec.L2 * rbar
    cot.grad[:, 2] = rbar / (spec.D * spec.v)
    cot.hess[:, 0] = -rbar
    cot.hess[:, 1] = -rbar
    return cot


# --------------------------------------------------------------------------
# analytical slab solution
# --------------------------------------------------------------------------


@dataclass
class SeriesSolution:
    """Separation-of-variables solution of the slab problem.

    ``phi(x, t) = sum_n c_n cos(B_n x) exp((k_n - 1) t / l_n)`` with
    ``B_n = (2n - 1) pi / a``, ``k_n = k_inf / (1 + B_n^2 L^2)`` and
    ``l_n = L^2 / (D v (1 + B_n^2 L^2))``.  The coefficients are midpoint-rule
    projections of the initial profile (evaluated all at once as a DCT-IV).
    """

    spec: ProblemP1Spec
    n_modes: int = 1 << 16
    coeffs: np.ndarray = field(init=False)
    buckling: np.ndarray = field(init=False)
    k_n: np.ndarray = field(init=False)
    l_n: np.ndarray = field(init=False)
    rates: np.ndarray = field(init=False)
    tol: float = 1e-13

    def __post_init__(self):
        if self.n_modes < 20:
            raise ValueError("at least 20 modes are required")
        s = self.spec
        M = self.n_modes
        xq = (np.arange(M) + 0.5) * (s.a / 2) / M
        self.coeffs = scipy.fft.dct(initial_condition(s.ic_id, xq, s.a), type=4) / M
        n = np.arange(1, M + 1)
        self.buckling = (2 * n - 1) * math.pi / s.a
        BL = 1.0 + self.buckling**2 * s.L2
        self.k_n = s.k_inf / BL
        self.l_n = s.L2 / (s.D * s.v * BL)
        self.rates = (self.k_n - 1.0) / self.l_n
        # algebraic decay envelope |c_n| <= K / n^3 fitted on the upper half
        half = n[M // 2 :]
        self._envelope = float(np.max(np.abs(self.coeffs[M // 2 :]) * half.astype(float) ** 3))

    def tail_bound(self, t, n_used: int) -> float:
        """Upper estimate of the neglected modes' contribution at time ``t``."""
        t = float(np.min(t))
        rate = self.rates[min(n_used, self.n_modes - 1)]
        decay = math.exp(rate * t) if rate * t < 700 else math.inf
        return self._envelope / (2.0 * n_used**2) * decay

    def _modes_needed(self, t: np.ndarray) -> np.ndarray:
        # smallest N with K/(2N^2) * exp(rate_N t) < tol, searched on a power-of-two ladder
        ladder = [2**k for k in range(5, int(math.log2(self.n_modes)) + 1)]
        need = np.full(t.shape, self.n_modes)
        for N in reversed(ladder):
            bound = self._envelope / (2.0 * N**2) * np.exp(np.minimum(self.rates[N - 1] * t, 700))
            need = np.where(bound < self.tol, N, need)
        return need

    def derivatives(self, X, order: int = 2, hess_dims=None) -> DerivativeBundle:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        x, t = X[:, 0], X[:, 1]
        n = X.shape[0]
        val = np.zeros(n)
        gx = np.zeros(n)
        gt = np.zeros(n)
        hx = np.zeros(n)
        ht = np.zeros(n)
        need = self._modes_needed(t)
        worst = 0.0
        for N in np.unique(need):
            idx = np.nonzero(need == N)[0]
            c, B, r = self.coeffs[:N], self.buckling[:N], self.rates[:N]
            for chunk in np.array_split(idx, max(1, len(idx) * N // 4_000_000 + 1)):
                xb = x[chunk, None] * B
                amp = c * np.exp(np.outer(t[chunk], r))
                cs = np.cos(xb)
                term = amp * cs
                val[chunk] = term.sum(axis=1)
                if order >= 1:
                    gx[chunk] = -(amp * np.sin(xb) * B).sum(axis=1)
                    gt[chunk] = (term * r).sum(axis=1)
                if order >= 2:
                    hx[chunk] = -(term * B**2).sum(axis=1)
                    ht[chunk] = (term * r**2).sum(axis=1)
            if N == self.n_modes:
                worst = max(worst, self.tail_bound(t[idx], N))
        if worst > 1e-9:
            warnings.warn(f"series truncation tail bound {worst:.2e} exceeds 1e-9", RuntimeWarning)
        grad = np.column_stack([gx, gt])
        hess = np.column_stack([hx, ht])
        if order < 1:
            grad[:] = np.nan
        if order < 2:
            hess[:] = np.nan
        return DerivativeBundle(val, grad, hess)

    def __call__(self, X) -> np.ndarray:
        return self.derivatives(X, order=0).value


def analytical_phi(spec: ProblemP1Spec, x, t, n_modes: int = 1 << 16) -> np.ndarray:
    x, t = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64))
    if np.any(np.abs(x) > spec.a / 2 + 1e-12) or np.any(t < 0) or np.any(t > spec.t_end + 1e-12):
        raise ValueError("point outside the slab space-time domain")
    sol = SeriesSolution(spec, n_modes)
    pts = np.column_stack([x.ravel(), t.ravel()])
    return sol(pts).reshape(x.shape)


@dataclass
class CriticalMode:
    """Time-independent critical profile ``A cos(pi x / a)``."""

    a: float = 1.0
    amplitude: float = 1.0

    def derivatives(self, X, order: int = 2, hess_dims=None) -> DerivativeBundle:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        k = math.pi / self.a
        x = X[:, 0]
        n, d = X.shape
        grad = np.zeros((n, d))
        hess = np.zeros((n, d))
        grad[:, 0] = -self.amplitude * k * np.sin(k * x)
        hess[:, 0] = -self.amplitude * k * k * np.cos(k * x)
        return DerivativeBundle(self.amplitude * np.cos(k * x), grad, hess)

    def __call__(self, X):
        return self.derivatives(X, 0).value


# --------------------------------------------------------------------------
# two-group materials and geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoGroupMaterial:
    D1: float
    D2: float
    sa1: float
    sa2: float
    nsf1: float
    nsf2: float
    s12: float
    chi1: float = 1.0
    chi2: float = 0.0
    name: str = ""

    def __post_init__(self):
        for k in ("D1", "D2", "sa1", "sa2", "nsf1", "nsf2", "s12", "chi1", "chi2"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if abs(self.chi1 + self.chi2 - 1.0) > 1e-12:
            raise ValueError("fission spectrum must sum to one")

    @property
    def sr1(self) -> float:
        return self.sa1 + self.s12

    @property
    def k_infinity(self) -> float:
        """Infinite-medium multiplication factor (flat flux, no leakage)."""
        return (self.nsf1 + self.nsf2 * self.s12 / self.sa2) / self.sr1

    @property
    def fissile(self) -> bool:
        return self.nsf1 > 0 or self.nsf2 > 0


MATERIAL_KEYS = ("D1", "D2", "sa1", "sa2", "nsf1", "nsf2", "s12", "chi1", "chi2")


def parse_materials(text: str) -> dict[int, TwoGroupMaterial]:
    """Parse ``material=<id>`` blocks of ``key=value`` lines."""
    out: dict[int, TwoGroupMaterial] = {}
    cur: dict | None = None
    cur_id = None

    def flush():
        if cur is not None:
            out[cur_id] = TwoGroupMaterial(**cur)

    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "material":
            flush()
            cur_id, cur = int(val), {}
        elif cur is None:
            raise ValueError(f"entry {key!r} outside a material block")
        elif key == "name":
            cur["name"] = val
        elif key in MATERIAL_KEYS:
            cur[key] = float(val)
        else:
            raise ValueError(f"unknown material key {key!r}")
    flush()
    return out


def format_materials(mats: dict[int, TwoGroupMaterial]) -> str:
    lines = []
    for mid in sorted(mats):
        m = mats[mid]
        lines.append(f"material={mid}")
        if m.name:
            lines.append(f"name={m.name}")
        for k in MATERIAL_KEYS:
            lines.append(f"{k}={getattr(m, k)!r}")
        lines.append("")
    return "\n".join(lines)


BC_TAGS = ("dirichlet", "neumann")
EDGES = ("left", "right", "bottom", "top")


@dataclass
class MaterialMap:
    """Rectangular grid of material ids; id 0 marks void (outside the domain).

    ``ids[j, i]`` is the cell at column ``i`` (x) and row ``j`` (y), with row
    0 at the bottom.  ``origin`` is the lower-left corner in cm.
    """

    ids: np.ndarray
    cell: float
    bc: dict
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2 or self.ids.size == 0:
            raise ValueError("material map must be a non-empty rectangle")
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        for e in EDGES:
            if self.bc.get(e) not in BC_TAGS:
                raise ValueError(f"edge {e!r} needs a tag in {BC_TAGS}")

    @property
    def ny(self) -> int:
        return self.ids.shape[0]

    @property
    def nx(self) -> int:
        return self.ids.shape[1]

    @property
    def box(self):
        x0, y0 = self.origin
        return np.array([x0, y0]), np.array([x0 + self.nx * self.cell, y0 + self.ny * self.cell])

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x0, y0 = self.origin
        fi = (p[:, 0] - x0) / self.cell
        fj = (p[:, 1] - y0) / self.cell
        eps = 1e-9
        if np.any((fi < -eps) | (fi > self.nx + eps) | (fj < -eps) | (fj > self.ny + eps)):
            raise ValueError("point outside the material map")
        i = np.clip(np.floor(fi).astype(np.int64), 0, self.nx - 1)
        j = np.clip(np.floor(fj).astype(np.int64), 0, self.ny - 1)
        return i, j

    def material_at(self, points) -> np.ndarray:
        i, j = self.cell_index(points)
        mid = self.ids[j, i]
        if np.any(mid == 0):
            raise ValueError("point lies in a void cell")
        return mid

    def inside(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lo, hi = self.box
        ok = np.all((p >= lo - 1e-9) & (p <= hi + 1e-9), axis=1)
        res = np.zeros(len(p), dtype=bool)
        if ok.any():
            i, j = self.cell_index(p[ok])
            res[ok] = self.ids[j, i] != 0
        return res

    def refine(self, factor: int) -> "MaterialMap":
        ids = np.kron(self.ids, np.ones((factor, factor), dtype=np.int64))
        return MaterialMap(ids, self.cell / factor, dict(self.bc), self.origin)

    def boundary_segments(self):
        """Outer boundary as (x0, y0, x1, y1, nx, ny, tag) segments, one per cell edge.

        An edge is on the boundary when it separates a domain cell from a
        void cell or from the outside of the map.  Edges on the map's outer
        rim take the rim tag; edges facing void cells are zero-flux.
        """
        segs = []
        h = self.cell
        x0, y0 = self.origin
        occ = self.ids != 0
        for j in range(self.ny):
            for i in range(self.nx):
                if not occ[j, i]:
                    continue
                xl, yb = x0 + i * h, y0 + j * h
                nbrs = (
                    (i - 1, j, (xl, yb, xl, yb + h), (-1.0, 0.0), "left"),
                    (i + 1, j, (xl + h, yb, xl + h, yb + h), (1.0, 0.0), "right"),
                    (i, j - 1, (xl, yb, xl + h, yb), (0.0, -1.0), "bottom"),
                    (i, j + 1, (xl, yb + h, xl + h, yb + h), (0.0, 1.0), "top"),
                )
                for ii, jj, coords, normal, edge in nbrs:
                    if 0 <= ii < self.nx and 0 <= jj < self.ny:
                        if occ[jj, ii]:
                            continue
                        tag = "dirichlet"
                    else:
                        tag = self.bc[edge]
                    segs.append((*coords, *normal, tag))
        return segs


def parse_material_map(text: str) -> MaterialMap:
    """Header ``nx ny cell left right bottom top``, then ``ny`` rows, top row first."""
    rows = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    rows = [r for r in rows if r]
    head = rows[0]
    if len(head) not in (7, 9):
        raise ValueError("map header must be: nx ny cell left right bottom top [x0 y0]")
    nx, ny, cell = int(head[0]), int(head[1]), float(head[2])
    bc = dict(zip(EDGES, (t.lower() for t in head[3:7])))
    origin = (float(head[7]), float(head[8])) if len(head) == 9 else (0.0, 0.0)
    body = rows[1:]
    if len(body) != ny or any(len(r) != nx for r in body):
        raise ValueError(f"map body must be {ny} rows of {nx} ids")
    ids = np.array([[int(v) for v in r] for r in body], dtype=np.int64)[::-1]
    return MaterialMap(ids, cell, bc, origin)


def format_material_map(m: MaterialMap) -> str:
    head = f"{m.nx} {m.ny} {m.cell!r} " + " ".join(m.bc[e] for e in EDGES)
    if tuple(m.origin) != (0.0, 0.0):
        head += f" {m.origin[0]!r} {m.origin[1]!r}"
    body = [" ".join(str(v) for v in row) for row in m.ids[::-1]]
    return "\n".join([head, *body]) + "\n"


def _data_text(name: str) -> str:
    return resources.files("neutronpinn").joinpath("data").joinpath(name).read_text()


def load_materials(path=None, builtin: str | None = None) -> dict[int, TwoGroupMaterial]:
    text = Path(path).read_text() if path else _data_text(builtin)
    return parse_materials(text)


def load_material_map(path=None, builtin: str | None = None) -> MaterialMap:
    text = Path(path).read_text() if path else _data_text(builtin)
    return parse_material_map(text)


def _coef(mats, mid, name):
    table = np.zeros(max(mats) + 1)
    for k, m in mats.items():
        table[k] = getattr(m, name)
    return table[mid]


def residual_iaea(mats, mmap: MaterialMap, points, b1: DerivativeBundle, b2: DerivativeBundle, lam):
    """Two-group residuals with eigenvalue ``lam = 1/k_eff`` and fission spectrum chi."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    mid = mmap.material_at(points)
    c = {k: _coef(mats, mid, k) for k in MATERIAL_KEYS}
    lap1 = b1.hess[:, 0] + b1.hess[:, 1]
    lap2 = b2.hess[:, 0] + b2.hess[:, 1]
    fis = c["nsf1"] * b1.value + c["nsf2"] * b2.value
    r1 = -c["D1"] * lap1 + (c["sa1"] + c["s12"]) * b1.value - lam * c["chi1"] * fis
    r2 = -c["D2"] * lap2 + c["sa2"] * b2.value - c["s12"] * b1.value - lam * c["chi2"] * fis
    return r1, r2


def residual_iaea_vjp(mats, mmap, points, b1, b2, lam, r1bar, r2bar):
    """Cotangents of both group bundles and of ``lam``."""
    mid = mmap.material_at(points)
    c = {k: _coef(mats, mid, k) for k in MATERIAL_KEYS}
    n = len(mid)
    cot1 = DerivativeBundle.zeros(n, 2)
    cot2 = DerivativeBundle.zeros(n, 2)
    src = lam * (c["chi1"] * r1bar + c["chi2"] * r2bar)
    cot1.value = (c["sa1"] + c["s12"]) * r1bar - c["s12"] * r2bar - src * c["nsf1"]
    cot2.value = c["sa2"] * r2bar - src * c["nsf2"]
    for k in (0, 1):
        cot1.hess[:, k] = -c["D1"] * r1bar
        cot2.hess[:, k] = -c["D2"] * r2bar
    fis = c["nsf1"] * b1.value + c["nsf2"] * b2.value
    lam_bar = float(-np.sum((c["chi1"] * r1bar + c["chi2"] * r2bar) * fis))
    return cot1, cot2, lam_bar


def residual_two_group(mats, mmap, points, b1, b2, k_eff):
    """Fixed-k_eff form: fission source divided by ``k_eff``."""
    if not k_eff > 0:
        raise ValueError("k_eff must be positive")
    return residual_iaea(mats, mmap, points, b1, b2, 1.0 / k_eff)


@dataclass(frozen=True)
class TwoGroupProblem:
    """Static two-group problem on a material map.

    ``k_eff`` fixes the eigenvalue (``p3``); when ``learn_k`` is set the
    eigenvalue ``lambda = 1/k_eff`` becomes a trainable parameter (``p4``).
    """

    name: str
    materials: dict
    mmap: MaterialMap
    k_eff: float = 1.0
    learn_k: bool = False

    input_dim = 2
    time_dependent = False

    @property
    def box(self):
        return self.mmap.box

    def center(self):
        lo, hi = self.box
        return 0.5 * (lo + hi)


P3_K_EFF = 0.9693


def two_group_materials() -> dict[int, TwoGroupMaterial]:
    return load_materials(builtin="p3_materials.txt")


def iaea_materials() -> dict[int, TwoGroupMaterial]:
    return load_materials(builtin="iaea_materials.txt")


def make_problem(name: str, **overrides):
    """Default problem instance by id, with keyword overrides."""
    name = name.lower()
    if name == "p1":
        return ProblemP1Spec(**overrides)
    if name == "p2":
        return ProblemP2Spec(**overrides)
    if name == "p3":
        mats = overrides.pop("materials", None) or two_group_materials()
        mmap = overrides.pop("mmap", None) or load_material_map(builtin="p3.map")
        return TwoGroupProblem("p3", mats, mmap, overrides.pop("k_eff", P3_K_EFF), False, **overrides)
    if name == "p4":
        mats = overrides.pop("materials", None) or iaea_materials()
        mmap = overrides.pop("mmap", None) or load_material_map(builtin="iaea.map")
        return TwoGroupProblem("p4", mats, mmap, overrides.pop("k_eff", 1.0), True, **overrides)
    raise ValueError(f"unknown problem {name!r}")
