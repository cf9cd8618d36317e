"""k_inf search for criticality: steady-state test, bracketing and quadratic-fit searches."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import taylor_forward
from .loss import PinnModel
from .network import Network
from .physics import ProblemP1Spec, ProblemP2Spec

log = logging.getLogger(__name__)


class BracketError(ValueError):
    """phi_t has the same sign at both ends of the search interval."""


@dataclass
class SteadyStateMetric:
    phi_t: float
    dphi: float
    times: np.ndarray


def _time_derivs(pred, X):
    if isinstance(pred, PinnModel):
        pred = pred.nets[0]
    if isinstance(pred, Network):
        b, _ = taylor_forward(pred, X, order=1)
    else:
        b = pred.derivatives(X, order=1)
    return b.value, b.grad[:, -1]


def steady_state_metric(pred, problem, n_points: int = 5, window: float | None = None):
    """phi_t averaged over the last ``n_points`` times at the domain centre.

    The samples are spaced uniformly over ``[t_end - window, t_end]`` with
    ``window = t_end / 100`` by default.  ``dphi`` is the change of phi over
    the same window.
    """
    if not isinstance(problem, (ProblemP1Spec, ProblemP2Spec)):
        raise TypeError("steady-state test needs a time-dependent problem")
    window = problem.t_end / 100.0 if window is None else window
    times = np.linspace(problem.t_end - window, problem.t_end, n_points)
    c = problem.center()
    X = np.column_stack([np.tile(c, (n_points, 1)), times])
    val, dt = _time_derivs(pred, X)
    return SteadyStateMetric(float(np.mean(dt)), float(val[-1] - val[0]), times)


def early_stop_check(history, lam: float = 0.01, guard: float = 1e-14, signed: bool = True) -> bool:
    """Ratio test on the last three recorded phi_t values.

    ``(p[i+1] - p[i]) / (p[i] - p[i-1]) < lam``.  The signed ratio also stops
    when successive changes flip sign, i.e. phi_t has started to wander
    around its limit; ``signed=False`` compares magnitudes only, which
    under optimizer noise almost never drops below 0.01.  A denominator
    below ``guard`` means phi_t has stopped moving and counts as converged.
    """
    if len(history) < 3:
        return False
    a, b, c = (float(v) for v in history[-3:])
    den = b - a
    if abs(den) < guard:
        return True
    if signed:
        return (c - b) / den < lam
    return abs(c - b) / abs(den) < lam


class EarlyStopHook:
    """Training hook recording phi_t every ``period`` epochs and stopping on the ratio test."""

    def __init__(self, problem, lam: float = 0.01, period: int = 200, signed: bool = True):
        if not lam > 0:
            raise ValueError("lambda must be positive")
        self.problem = problem
        self.lam = lam
        self.signed = signed
        self.period = period
        self.history: list[float] = []

    def __call__(self, state, model) -> bool:
        self.history.append(steady_state_metric(model, self.problem).phi_t)
        return early_stop_check(self.history, self.lam, signed=self.signed)


@dataclass
class SearchConfig:
    k_lo: float = 1.0001
    k_hi: float = 1.0041
    n: int = 2
    tol: float = 1e-4
    method: str = "grid"
    early_stop: bool = False
    early_stop_lam: float = 0.01
    early_stop_rule: str = "signed"  # signed | abs
    check_period: int = 200
    max_networks: int = 64

    def __post_init__(self):
        if not self.k_lo < self.k_hi:
            raise ValueError("need k_lo < k_hi")
        if self.n < 2:
            raise ValueError("need n >= 2 partitions")
        if not self.early_stop_lam > 0:
            raise ValueError("early-stop lambda must be positive")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.early_stop_rule not in ("signed", "abs"):
            raise ValueError(f"early_stop_rule must be signed or abs, got {self.early_stop_rule!r}")
        if self.method not in ("grid", "binary", "quadfit"):
            raise ValueError(f"unknown search method {self.method!r}")


@dataclass
class Candidate:
    k: float
    phi_t: float
    dphi: float = float("nan")
    epochs: int = 0
    wall_time: float = 0.0


@dataclass
class SearchResult:
    k_star: float
    candidates: list
    method: str
    iterations: int
    bracket: tuple = ()
    wall_time: float = 0.0
    notes: list = field(default_factory=list)

    def table(self):
        return sorted(self.candidates, key=lambda c: c.k)

    def to_json(self, path) -> None:
        payload = {
            "k_star": self.k_star,
            "method": self.method,
            "iterations": self.iterations,
            "bracket": list(self.bracket),
            "wall_time": self.wall_time,
            "networks": len(self.candidates),
            "notes": self.notes,
            "candidates": [asdict(c) for c in self.table()],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "phi_t", "dphi", "epochs", "wall_time"])
            for c in self.table():
                w.writerow([repr(c.k), repr(c.phi_t), repr(c.dphi), c.epochs, repr(c.wall_time)])


class _Evaluator:
    """Memoises ``evaluate(k)`` and enforces the network budget."""

    def __init__(self, evaluate, budget):
        self.evaluate = evaluate
        self.budget = budget
        self.cache: dict[float, Candidate] = {}
        self.order: list[Candidate] = []

    def __call__(self, k: float) -> Candidate:
        k = float(k)
        if k in self.cache:
            return self.cache[k]
        if len(self.order) >= self.budget:
            raise RuntimeError(f"search exceeded its budget of {self.budget} networks")
        t0 = time.perf_counter()
        out = self.evaluate(k)
        if not isinstance(out, Candidate):
            out = Candidate(k, float(out))
        if out.wall_time == 0.0:
            out.wall_time = time.perf_counter() - t0
        self.cache[k] = out
        self.order.append(out)
        log.info("k=%.7f  phi_t=%+.6e", k, out.phi_t)
        return out


def _bracket(ev: _Evaluator, lo: float, hi: float, n: int, tol: float):
    a, b = ev(lo), ev(hi)
    if np.sign(a.phi_t) == np.sign(b.phi_t) and a.phi_t != 0:
        raise BracketError(f"phi_t does not change sign on [{lo}, {hi}]")
    rounds = 0
    while hi - lo >= tol:
        rounds += 1
        nodes = np.linspace(lo, hi, n + 1)
        vals = [ev(nodes[0])] + [ev(k) for k in nodes[1:-1]] + [ev(nodes[-1])]
        for i in range(n):
            p, q = vals[i].phi_t, vals[i + 1].phi_t
            if p == 0.0:
                return nodes[i], nodes[i], rounds
            if np.sign(p) != np.sign(q):
                lo, hi = nodes[i], nodes[i + 1]
                break
    return lo, hi, rounds


def grid_search(evaluate, cfg: SearchConfig) -> SearchResult:
    """Partition ``[k_lo, k_hi]`` into ``n`` parts, keep the sign-change cell, repeat.

    ``evaluate(k)`` returns a :class:`Candidate` (or a bare phi_t).  The
    estimate is the midpoint of the final bracket, narrower than ``tol``.
    """
    t0 = time.perf_counter()
    ev = _Evaluator(evaluate, cfg.max_networks)
    lo, hi, rounds = _bracket(ev, cfg.k_lo, cfg.k_hi, cfg.n, cfg.tol)
    method = "binary" if cfg.n == 2 else "grid"
    return SearchResult(0.5 * (lo + hi), list(ev.order), method, rounds, (lo, hi),
                        time.perf_counter() - t0)


def binary_search(evaluate, cfg: SearchConfig) -> SearchResult:
    cfg2 = SearchConfig(**{**asdict(cfg), "n": 2, "method": "binary"})
    return grid_search(evaluate, cfg2)


def fit_quadratic_root(ks, phis, lo, hi):
    """Least-squares quadratic through ``(k, phi_t)``; in-interval root nearest the sign change.

    Returns None when no real root lies in ``[lo, hi]``.
    """
    ks = np.asarray(ks, dtype=np.float64)
    phis = np.asarray(phis, dtype=np.float64)
    if len(ks) < 3:
        raise ValueError("quadratic fit needs at least three samples")
    # centre and scale k so the normal equations stay well conditioned
    c = 0.5 * (lo + hi)
    s = 0.5 * (hi - lo)
    u = (ks - c) / s
    if np.ptp(u) == 0:
        raise ValueError("degenerate fit: all samples at one k")
    A = np.column_stack([u**2, u, np.ones_like(u)])
    coef, *_ = np.linalg.lstsq(A, phis, rcond=None)
    a2, a1, a0 = coef
    # collinear data leave no curvature to fit
    scale = max(np.max(np.abs(phis)), 1e-300)
    if abs(a2) < 1e-14 * scale:
        raise ValueError("degenerate fit: samples are collinear")
    roots = np.roots([a2, a1, a0])
    roots = roots[np.abs(roots.imag) <= 1e-12 * max(1.0, np.max(np.abs(roots)))].real
    roots = roots[(roots >= -1.0 - 1e-12) & (roots <= 1.0 + 1e-12)]
    if roots.size == 0:
        return None
    order = np.argsort(ks)
    uk, ph = u[order], phis[order]
    change = None
    for i in range(len(uk) - 1):
        if np.sign(ph[i]) != np.sign(ph[i + 1]):
            change = 0.5 * (uk[i] + uk[i + 1])
            break
    ref = change if change is not None else 0.0
    r = roots[np.argmin(np.abs(roots - ref))]
    return float(c + s * r)


def quadfit_search(evaluate, cfg: SearchConfig, n_samples: int = 3) -> SearchResult:
    """Quadratic fit through ``n_samples`` equally spaced candidates.

    Falls back to bracketing refinement (reusing the trained candidates)
    when the fit has no real root inside the interval.
    """
    t0 = time.perf_counter()
    ev = _Evaluator(evaluate, cfg.max_networks)
    nodes = np.linspace(cfg.k_lo, cfg.k_hi, n_samples)
    vals = [ev(k) for k in nodes]
    root = fit_quadratic_root(nodes, [v.phi_t for v in vals], cfg.k_lo, cfg.k_hi)
    notes = []
    if root is None:
        notes.append("no real in-interval root; refined by bracketing")
        lo, hi, _ = _bracket(ev, cfg.k_lo, cfg.k_hi, max(cfg.n, n_samples - 1), cfg.tol)
        root = 0.5 * (lo + hi)
    return SearchResult(root, list(ev.order), "quadfit", 1, (cfg.k_lo, cfg.k_hi),
                        time.perf_counter() - t0, notes)


def run_search(evaluate, cfg: SearchConfig) -> SearchResult:
    if cfg.method == "quadfit":
        return quadfit_search(evaluate, cfg)
    if cfg.method == "binary":
        return binary_search(evaluate, cfg)
    return grid_search(evaluate, cfg)
