"""Classical reference solvers used as ground truth.

* explicit finite differences for the one-group transient problems,
* a cell-centred two-group eigensolver (power iteration on the fission
  source, red-black Gauss-Seidel inner solves).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .physics import MaterialMap, ProblemP1Spec, ProblemP2Spec, initial_condition
from .sampling import lhs_sample

log = logging.getLogger(__name__)

GRID_MAGIC = b"NPINNFG1"


class ConvergenceError(RuntimeError):
    """An iterative oracle hit its iteration cap."""


@dataclass
class FieldGrid:
    """Fields sampled on a tensor grid.

    ``axes`` are 1D coordinate arrays (x[, y][, t]); each entry of ``fields``
    has shape ``tuple(len(a) for a in axes)`` (``ij`` indexing).  ``mask``
    flags grid nodes that belong to the domain (all by default).
    """

    names: tuple
    axes: list
    fields: dict
    mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.shape
        for k, v in self.fields.items():
            if v.shape != shape:
                raise ValueError(f"field {k!r} has shape {v.shape}, grid is {shape}")
        if self.mask is None:
            self.mask = np.ones(shape, dtype=bool)

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def spacings(self):
        return tuple(float(a[1] - a[0]) if len(a) > 1 else 0.0 for a in self.axes)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def values(self, name=None) -> np.ndarray:
        name = name or next(iter(self.fields))
        return self.fields[name].ravel()

    def slice_last(self, index: int = -1) -> "FieldGrid":
        """Grid restricted to one value of the last axis (e.g. the final time)."""
        axes = list(self.axes)
        i = index % len(axes[-1])
        axes[-1] = axes[-1][i : i + 1]
        return FieldGrid(self.names, axes, {k: v[..., i : i + 1] for k, v in self.fields.items()},
                         self.mask[..., i : i + 1], dict(self.meta))

    def to_csv(self, path) -> int:
        """Write ``coords..., field...`` rows for masked-in nodes; returns the row count."""
        pts = self.points()
        keep = self.mask.ravel()
        cols = [self.fields[k].ravel()[keep] for k in self.fields]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*self.names, *self.fields])
            for row in zip(*pts[keep].T, *cols):
                w.writerow([repr(float(v)) for v in row])
        return int(keep.sum())

    def save(self, path) -> None:
        """Binary cache: magic, JSON header (dims, spacings, names), then float64 LE arrays."""
        head = json.dumps({
            "names": list(self.names),
            "dims": list(self.shape),
            "spacings": list(self.spacings),
            "fields": list(self.fields),
            "meta": self.meta,
        }).encode()
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for a in self.axes:
                fh.write(np.asarray(a, dtype="<f8").tobytes())
            fh.write(self.mask.astype(np.uint8).tobytes())
            for v in self.fields.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FieldGrid":
        with open(path, "rb") as fh:
            if fh.read(len(GRID_MAGIC)) != GRID_MAGIC:
                raise ValueError(f"{path}: not a field-grid cache")
            (n,) = struct.unpack("<I", fh.read(4))
            head = json.loads(fh.read(n))
            dims = head["dims"]
            axes = [np.frombuffer(fh.read(8 * d), dtype="<f8").copy() for d in dims]
            size = int(np.prod(dims))
            mask = np.frombuffer(fh.read(size), dtype=np.uint8).reshape(dims).astype(bool)
            fields = {
                k: np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(dims).copy()
                for k in head["fields"]
            }
        return cls(tuple(head["names"]), axes, fields, mask, head.get("meta", {}))


# --------------------------------------------------------------------------
# explicit transient FDM
# --------------------------------------------------------------------------


def stable_dt(spec, dx: float, dy: float | None = None) -> float:
    """Largest explicit step with ``2 D v dt (1/dx^2 [+ 1/dy^2]) <= 1``."""
    inv = 1.0 / dx**2 + (1.0 / dy**2 if dy else 0.0)
    return 1.0 / (2.0 * spec.D * spec.v * inv)


def fdm_evolve(spec, nx: int = 100, nt: int = 100, dt: float | None = None, ic=None,
               courant: float = 0.8) -> FieldGrid:
    """Explicit forward-Euler / central-difference transient.

    ``nx`` nodes per spatial axis (boundaries included) and ``nt`` output
    times spanning ``[0, t_end]``.  Between output times the scheme takes
    equal substeps of ``dt`` (default ``courant`` times the stability limit,
    shrunk so it divides the output spacing).  An explicit ``dt`` that breaks
    the stability bound is rejected before any step is taken.  ``ic``
    overrides the initial profile: a callable of the spatial points, or an
    array of node values.
    """
    if nx < 3 or nt < 2:
        raise ValueError("need nx >= 3 and nt >= 2")
    if isinstance(spec, ProblemP1Spec):
        x = np.linspace(-spec.a / 2, spec.a / 2, nx)
        spatial = [x]
        dxs = (x[1] - x[0],)
    elif isinstance(spec, ProblemP2Spec):
        h = spec.half_width
        x = np.linspace(-h, h, nx)
        spatial = [x, x.copy()]
        dxs = (x[1] - x[0], x[1] - x[0])
    else:
        raise TypeError(f"fdm_evolve does not handle {spec!r}")

    t = np.linspace(0.0, spec.t_end, nt)
    out_dt = t[1] - t[0]
    limit = stable_dt(spec, *dxs)
    if dt is None:
        sub = max(1, math.ceil(out_dt / (courant * limit)))
        dt = out_dt / sub
    else:
        if dt > limit * (1 + 1e-12):
            raise ValueError(f"dt={dt:g} violates the explicit stability limit {limit:g}")
        sub = round(out_dt / dt)
        if sub < 1 or abs(sub * dt - out_dt) > 1e-9 * out_dt:
            raise ValueError("dt must divide the output time spacing")

    mesh = np.meshgrid(*spatial, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    if ic is None:
        if isinstance(spec, ProblemP1Spec):
            phi = initial_condition(spec.ic_id, pts[:, 0], spec.a)
        else:
            phi = initial_condition(spec.ic_id, pts)
    elif callable(ic):
        phi = np.asarray(ic(pts if pts.shape[1] > 1 else pts[:, 0]), dtype=np.float64)
    else:
        phi = np.array(ic, dtype=np.float64).ravel()
    phi = phi.reshape(mesh[0].shape).copy()
    _zero_edges(phi)

    Dv = spec.D * spec.v
    gain = Dv * (spec.k_inf - 1.0) / spec.L2
    r = [Dv * dt / d**2 for d in dxs]
    store = np.empty(phi.shape + (nt,))
    store[..., 0] = phi
    for n in range(1, nt):
        for _ in range(sub):
            phi = _step(phi, r, gain * dt)
        if not np.all(np.isfinite(phi)):
            raise FloatingPointError("FDM field became non-finite")
        store[..., n] = phi
    names = ("x", "t") if len(spatial) == 1 else ("x", "y", "t")
    return FieldGrid(names, [*spatial, t], {"phi": store},
                     meta={"dt": dt, "substeps": sub, "problem": spec.name})


def _zero_edges(phi):
    phi[0] = 0.0
    phi[-1] = 0.0
    if phi.ndim == 2:
        phi[:, 0] = 0.0
        phi[:, -1] = 0.0


def _step(phi, r, g):
    new = phi * (1.0 + g)
    if phi.ndim == 1:
        new[1:-1] += r[0] * (phi[2:] - 2.0 * phi[1:-1] + phi[:-2])
    else:
        c = phi[1:-1, 1:-1]
        new[1:-1, 1:-1] += r[0] * (phi[2:, 1:-1] - 2.0 * c + phi[:-2, 1:-1])
        new[1:-1, 1:-1] += r[1] * (phi[1:-1, 2:] - 2.0 * c + phi[1:-1, :-2])
    _zero_edges(new)
    return new


# --------------------------------------------------------------------------
# two-group eigensolver
# --------------------------------------------------------------------------


@dataclass
class EigenSolveResult:
    k_eff: float
    grid: FieldGrid  # fields phi1, phi2 at cell centres, jointly normalised to max 1
    iterations: int
    residual_ratio: float
    dominance_ratio: float
    k_history: list = field(default_factory=list)

    @property
    def phi1(self):
        return self.grid.fields["phi1"]

    @property
    def phi2(self):
        return self.grid.fields["phi2"]


def _coupling(Dc, occ, h, bc):
    """Face conductances (already divided by the cell area) in the four directions.

    Order: west, east, south, north.  Arrays are ``(nx, ny)`` like ``Dc``.
    """
    nx, ny = Dc.shape
    out = []
    for axis, side, edge in ((0, -1, "left"), (0, 1, "right"), (1, -1, "bottom"), (1, 1, "top")):
        nb = np.roll(Dc, -side, axis=axis)
        nb_occ = np.roll(occ, -side, axis=axis)
        # harmonic-mean conductance between two interior cells
        with np.errstate(invalid="ignore", divide="ignore"):
            inner = np.where(nb_occ, 2.0 * Dc * nb / (Dc + nb) / h**2, 2.0 * Dc / h**2)
        # cells on the map rim: the rim tag decides
        rim = np.zeros_like(occ)
        idx = [slice(None)] * 2
        idx[axis] = 0 if side < 0 else -1
        rim[tuple(idx)] = True
        rim_val = 2.0 * Dc / h**2 if bc[edge] == "dirichlet" else 0.0
        c = np.where(rim, rim_val, inner)
        out.append(np.where(occ, c, 0.0))
    return out


def _rb_gauss_seidel(phi, src, diag, cw, ce, cs, cn, colors, tol, max_sweeps, omega=1.0):
    """Red-black Gauss-Seidel (over-relaxed when ``omega > 1``) on the 5-point operator.

    Returns the number of sweeps used.
    """
    occ = colors[0] | colors[1]
    for sweep in range(1, max_sweeps + 1):
        if _kernels.HAVE_NUMBA:
            delta = _kernels.rb_sweep(phi, src, diag, cw, ce, cs, cn, occ, omega)
            if delta <= tol * max(float(np.max(np.abs(phi))), 1e-300):
                return sweep
            continue
        delta = 0.0
        for color in colors:
            nb = np.zeros_like(phi)
            nb[1:, :] += cw[1:, :] * phi[:-1, :]
            nb[:-1, :] += ce[:-1, :] * phi[1:, :]
            nb[:, 1:] += cs[:, 1:] * phi[:, :-1]
            nb[:, :-1] += cn[:, :-1] * phi[:, 1:]
            new = (src[color] + nb[color]) / diag[color]
            if omega != 1.0:
                new = phi[color] + omega * (new - phi[color])
            delta = max(delta, float(np.max(np.abs(new - phi[color]), initial=0.0)))
            phi[color] = new
        scale = float(np.max(np.abs(phi)))
        if delta <= tol * max(scale, 1e-300):
            return sweep
    return max_sweeps


def eigensolve_two_group(materials, mmap: MaterialMap, refine: int = 1, tol_k: float = 1e-8,
                         tol_src: float = 1e-7, inner_tol: float = 1e-10, max_outer: int = 5000,
                         max_inner: int = 20000, omega: float | None = None) -> EigenSolveResult:
    """Fundamental mode of the two-group problem on ``mmap`` (refined ``refine`` times).

    Cell-centred finite volumes with harmonic-mean face coefficients; void
    neighbours and Dirichlet rims sit at zero flux half a cell away.  Inner
    solves are red-black Gauss-Seidel; ``omega`` over-relaxes them (default:
    the optimal SOR factor of the Laplacian on this grid, ``omega=1`` gives
    plain Gauss-Seidel).  The converged eigenpair does not depend on it.
    """
    m = mmap.refine(refine) if refine > 1 else mmap
    ids = m.ids.T.copy()  # (nx, ny)
    occ = ids != 0
    if not occ.any():
        raise ValueError("map has no domain cells")
    h = m.cell

    def coef(name):
        table = np.zeros(max(max(materials), int(ids.max())) + 1)
        for k, mat in materials.items():
            table[k] = getattr(mat, name)
        return np.where(occ, table[ids], 0.0)

    D1, D2 = coef("D1"), coef("D2")
    sa1, sa2, s12 = coef("sa1"), coef("sa2"), coef("s12")
    nsf1, nsf2 = coef("nsf1"), coef("nsf2")
    chi1, chi2 = coef("chi1"), coef("chi2")
    if not np.any((nsf1 > 0) | (nsf2 > 0)):
        raise ValueError("no fissile cell in the map")

    c1 = _coupling(D1, occ, h, m.bc)
    c2 = _coupling(D2, occ, h, m.bc)
    diag1 = np.where(occ, sum(c1) + sa1 + s12, 1.0)
    diag2 = np.where(occ, sum(c2) + sa2, 1.0)
    ii, jj = np.meshgrid(np.arange(ids.shape[0]), np.arange(ids.shape[1]), indexing="ij")
    red = ((ii + jj) % 2 == 0) & occ
    black = ((ii + jj) % 2 == 1) & occ
    colors = (red, black)

    if omega is None:
        omega = 2.0 / (1.0 + math.sin(math.pi / max(ids.shape)))
    if not 0.0 < omega < 2.0:
        raise ValueError("omega must lie in (0, 2)")

    phi1 = occ.astype(np.float64)
    phi2 = occ.astype(np.float64) * 0.25
    fis = nsf1 * phi1 + nsf2 * phi2
    k = 1.0
    ks = []
    src_change = np.inf
    ratio_hist = []
    prev_dk = None
    for it in range(1, max_outer + 1):
        q1 = chi1 * fis / k
        _rb_gauss_seidel(phi1, q1, diag1, *c1, colors, inner_tol, max_inner, omega)
        q2 = s12 * phi1 + chi2 * fis / k
        _rb_gauss_seidel(phi2, q2, diag2, *c2, colors, inner_tol, max_inner, omega)
        new_fis = nsf1 * phi1 + nsf2 * phi2
        k_new = k * new_fis.sum() / fis.sum()
        s_old = fis / fis.max()
        s_new = new_fis / new_fis.max()
        src_change = float(np.max(np.abs(s_new - s_old)))
        dk = abs(k_new - k)
        if prev_dk and dk > 0:
            ratio_hist.append(dk / prev_dk)
        prev_dk = dk
        k = k_new
        ks.append(k)
        fis = new_fis
        if dk < tol_k and src_change < tol_src:
            break
    else:
        raise ConvergenceError(f"power iteration did not converge in {max_outer} outer iterations")

    scale = max(phi1.max(), phi2.max())
    x0, y0 = m.origin
    xs = x0 + (np.arange(ids.shape[0]) + 0.5) * h
    ys = y0 + (np.arange(ids.shape[1]) + 0.5) * h
    grid = FieldGrid(("x", "y"), [xs, ys], {"phi1": phi1 / scale, "phi2": phi2 / scale}, occ,
                     meta={"k_eff": k, "cell": h})
    dom = float(np.median(ratio_hist[-10:])) if ratio_hist else 0.0
    return EigenSolveResult(k, grid, it, src_change, dom, ks)


def anchors_from_oracle(result, n: int, rng: np.random.Generator | None = None,
                        names=("phi1", "phi2")):
    """``n`` distinct in-domain grid nodes chosen by LHS over index space.

    Returns ``(points, values)`` with one value column per field name.
    """
    grid = result.grid if isinstance(result, EigenSolveResult) else result
    rng = rng if rng is not None else np.random.default_rng(0)
    valid = np.flatnonzero(grid.mask.ravel())
    if n > len(valid):
        raise ValueError(f"asked for {n} anchors but the grid has {len(valid)} nodes")
    pts_all = grid.points()
    vals_all = np.column_stack([grid.fields[k].ravel() for k in names if k in grid.fields])
    if n == 0:
        return np.empty((0, pts_all.shape[1])), np.empty((0, vals_all.shape[1]))
    shape = grid.shape
    chosen: list[int] = []
    seen = set()
    for _ in range(100):
        need = n - len(chosen)
        if need == 0:
            break
        u = lhs_sample(need, (np.zeros(len(shape)), np.array(shape, dtype=float)), rng)
        idx = np.minimum(np.floor(u).astype(np.int64), np.array(shape) - 1)
        flat = np.ravel_multi_index(tuple(idx.T), shape)
        for f in flat:
            if f not in seen and grid.mask.ravel()[f]:
                seen.add(int(f))
                chosen.append(int(f))
    if len(chosen) < n:
        rest = [v for v in valid if v not in seen]
        chosen += list(rng.choice(rest, n - len(chosen), replace=False))
    chosen = np.array(chosen[:n])
    return pts_all[chosen], vals_all[chosen]
