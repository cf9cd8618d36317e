"""Latin-hypercube collocation sampling and residual adaptive resampling (RAR)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .physics import MaterialMap, ProblemP1Spec, ProblemP2Spec, TwoGroupProblem, initial_condition

ROLES = ("pde", "initial", "boundary", "data")


def lhs_sample(n: int, box, rng: np.random.Generator) -> np.ndarray:
    """``n`` Latin-hypercube points in the box ``(lo, hi)``.

    Each axis is cut into ``n`` equal strata and every stratum holds exactly
    one point; strata are paired across axes by independent permutations.
    """
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=np.float64)) for b in box)
    if n < 1:
        raise ValueError("n must be >= 1")
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("degenerate sampling box")
    d = lo.size
    u = np.empty((n, d))
    for k in range(d):
        u[:, k] = (rng.permutation(n) + rng.random(n)) / n
    return lo + u * (hi - lo)


def star_discrepancy_l2(points, box) -> float:
    """Warnock's closed form of the L2 star discrepancy on the unit cube."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    u = (np.asarray(points) - lo) / (hi - lo)
    n, d = u.shape
    t1 = 3.0 ** (-d)
    t2 = np.prod((1.0 - u**2) / 2.0, axis=1).sum() * 2.0 / n
    pair = np.ones((n, n))
    for k in range(d):
        pair *= 1.0 - np.maximum(u[:, None, k], u[None, :, k])
    t3 = pair.sum() / n**2
    return float(np.sqrt(max(t1 - t2 + t3, 0.0)))


@dataclass
class RarConfig:
    alpha: int = 2
    m: int = 500
    period: int = 1000
    cap: int = 5000
    initial: int = 3000

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.cap < self.initial:
            raise ValueError("cap must be >= initial pde count")

    @property
    def max_rounds(self) -> int:
        if self.m == 0:
            return 0
        return -(-(self.cap - self.initial) // self.m)


@dataclass
class SampleSet:
    """Collocation points grouped by role.

    Boundary rows with a zero ``boundary_normal`` are Dirichlet (flux = 0);
    a non-zero normal asks for a vanishing normal derivative.  ``data_values``
    has one column per network.
    """

    pde: np.ndarray
    initial: np.ndarray
    initial_values: np.ndarray
    boundary: np.ndarray
    boundary_normal: np.ndarray
    data: np.ndarray
    data_values: np.ndarray
    residual: np.ndarray | None = None
    cell: np.ndarray | None = None
    rar_rounds: int = 0
    added: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.pde.shape[1]

    def counts(self) -> dict:
        return {
            "pde": len(self.pde),
            "initial": len(self.initial),
            "boundary": len(self.boundary),
            "data": len(self.data),
        }

    def is_empty(self) -> bool:
        return sum(self.counts().values()) == 0


def cell_indices(points, box, alpha: int) -> np.ndarray:
    """Flat index of the alpha-per-axis cell holding each point (C order over axes)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    f = (np.asarray(points) - lo) / (hi - lo) * alpha
    idx = np.clip(np.floor(f).astype(np.int64), 0, alpha - 1)
    return np.ravel_multi_index(tuple(idx.T), (alpha,) * idx.shape[1])


def cell_box(cell: int, box, alpha: int):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    multi = np.array(np.unravel_index(cell, (alpha,) * lo.size))
    width = (hi - lo) / alpha
    return lo + multi * width, lo + (multi + 1) * width


def _sample_filtered(n, box, rng, keep=None, max_tries=50):
    if n <= 0:
        return np.empty((0, np.asarray(box[0]).size))
    if keep is None:
        return lhs_sample(n, box, rng)
    out, need = [], n
    for _ in range(max_tries):
        pts = lhs_sample(max(need * 2, 16), box, rng)
        pts = pts[keep(pts)]
        out.append(pts[:need])
        need -= len(out[-1])
        if need == 0:
            break
    res = np.concatenate(out)
    if len(res) < n:
        raise RuntimeError("could not place enough points inside the domain")
    return res


def rar_step(samples: SampleSet, residual_fn, cfg: RarConfig, box, rng, keep=None) -> SampleSet:
    """One residual-adaptive resampling round.

    The input box is cut into ``alpha`` slices per axis; the cell with the
    largest mean |residual| over the current PDE points receives up to ``m``
    new Latin-hypercube points (never beyond ``cap``).  Ties go to the lowest
    cell index.  Points are only ever added.
    """
    room = cfg.cap - len(samples.pde)
    n_new = min(cfg.m, room)
    if n_new <= 0:
        return samples
    res = np.abs(np.asarray(residual_fn(samples.pde), dtype=np.float64))
    cells = cell_indices(samples.pde, box, cfg.alpha)
    n_cells = cfg.alpha ** samples.dim
    sums = np.bincount(cells, weights=res, minlength=n_cells)
    cnt = np.bincount(cells, minlength=n_cells)
    means = np.full(n_cells, -np.inf)
    nz = cnt > 0
    means[nz] = sums[nz] / cnt[nz]
    best = int(np.argmax(means))
    sub = cell_box(best, box, cfg.alpha)
    new = _sample_filtered(n_new, sub, rng, keep)
    pts = np.concatenate([samples.pde, new])
    return replace(
        samples,
        pde=pts,
        residual=np.concatenate([res, np.full(len(new), np.nan)]),
        cell=cell_indices(pts, box, cfg.alpha),
        rar_rounds=samples.rar_rounds + 1,
        added=samples.added + [(best, len(new))],
    )


def _boundary_map(mmap: MaterialMap, n: int, rng):
    segs = mmap.boundary_segments()
    lengths = np.array([np.hypot(s[2] - s[0], s[3] - s[1]) for s in segs])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    u = lhs_sample(n, ([0.0], [cum[-1]]), rng)[:, 0]
    k = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, len(segs) - 1)
    frac = (u - cum[k]) / lengths[k]
    seg = np.array([s[:6] for s in segs])[k]
    pts = seg[:, 0:2] + frac[:, None] * (seg[:, 2:4] - seg[:, 0:2])
    neumann = np.array([s[6] == "neumann" for s in segs])[k]
    normal = np.where(neumann[:, None], seg[:, 4:6], 0.0)
    return pts, normal


def sample_roles(problem, counts: dict, rng, anchors=None) -> SampleSet:
    """Initial training set for ``problem``.

    ``counts`` maps role names to point numbers.  ``anchors`` is an optional
    ``(points, values)`` pair for the data role.
    """
    lo, hi = (np.asarray(b) for b in problem.box)
    d = problem.input_dim
    n_pde = counts.get("pde", 0)
    n_ini = counts.get("initial", 0)
    n_bnd = counts.get("boundary", 0)
    empty = np.empty((0, d))

    if isinstance(problem, ProblemP1Spec):
        pde = lhs_sample(n_pde, (lo, hi), rng) if n_pde else empty
        ini = empty
        ini_v = np.empty(0)
        if n_ini:
            x = lhs_sample(n_ini, ([lo[0]], [hi[0]]), rng)[:, 0]
            ini = np.column_stack([x, np.zeros(n_ini)])
            ini_v = initial_condition(problem.ic_id, x, problem.a)
        bnd = empty
        if n_bnd:
            t = lhs_sample(n_bnd, ([lo[1]], [hi[1]]), rng)[:, 0]
            side = np.where(np.arange(n_bnd) % 2 == 0, lo[0], hi[0])
            bnd = np.column_stack([side, t])
        normal = np.zeros_like(bnd)
    elif isinstance(problem, ProblemP2Spec):
        pde = lhs_sample(n_pde, (lo, hi), rng) if n_pde else empty
        ini, ini_v = empty, np.empty(0)
        if n_ini:
            xy = lhs_sample(n_ini, (lo[:2], hi[:2]), rng)
            ini = np.column_stack([xy, np.zeros(n_ini)])
            ini_v = initial_condition("gauss", xy)
        bnd = empty
        if n_bnd:
            u = lhs_sample(n_bnd, ([0.0, lo[2]], [4.0, hi[2]]), rng)
            edge = np.floor(u[:, 0]).astype(int).clip(0, 3)
            s = lo[0] + (u[:, 0] - edge) * (hi[0] - lo[0])
            x = np.choose(edge, [np.full(n_bnd, lo[0]), np.full(n_bnd, hi[0]), s, s])
            y = np.choose(edge, [s, s, np.full(n_bnd, lo[1]), np.full(n_bnd, hi[1])])
            bnd = np.column_stack([x, y, u[:, 1]])
        normal = np.zeros_like(bnd)
    elif isinstance(problem, TwoGroupProblem):
        pde = _sample_filtered(n_pde, (lo, hi), rng, problem.mmap.inside)
        ini, ini_v = empty, np.empty(0)
        if n_bnd:
            bnd, normal = _boundary_map(problem.mmap, n_bnd, rng)
        else:
            bnd, normal = empty, empty
    else:
        raise TypeError(f"unsupported problem {problem!r}")

    n_out = 2 if isinstance(problem, TwoGroupProblem) else 1
    if anchors is not None and len(anchors[0]):
        data = np.asarray(anchors[0], dtype=np.float64)
        vals = np.asarray(anchors[1], dtype=np.float64).reshape(len(data), -1)
        if vals.shape[1] != n_out:
            raise ValueError(f"anchors need {n_out} value columns")
    else:
        data, vals = empty, np.empty((0, n_out))
    return SampleSet(pde, ini, ini_v, bnd, normal, data, vals)


def domain_filter(problem):
    if isinstance(problem, TwoGroupProblem):
        return problem.mmap.inside
    return None


def export_csv(samples: SampleSet, path) -> None:
    """One row per point: role, coordinates, cached residual (pde rows only)."""
    d = samples.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["role", *[f"c{k}" for k in range(d)], "residual"])
        for role in ROLES:
            pts = getattr(samples, role)
            res = samples.residual if role == "pde" and samples.residual is not None else None
            for i, p in enumerate(pts):
                r = "" if res is None or not np.isfinite(res[i]) else repr(float(res[i]))
                w.writerow([role, *(repr(float(v)) for v in p), r])
