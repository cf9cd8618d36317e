"""Full-batch L-BFGS with a strong-Wolfe line search.

The line search follows the bracketing/zoom scheme of Nocedal & Wright
(Algorithms 3.5 and 3.6) with safeguarded cubic interpolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DivergenceError

log = logging.getLogger(__name__)


@dataclass
class LbfgsConfig:
    history: int = 20
    c1: float = 1e-4
    c2: float = 0.9
    max_epochs: int = 3000
    grad_tol: float = 1e-9
    loss_tol: float = 0.0
    max_ls: int = 25

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.history < 1:
            raise ValueError("history must be >= 1")


@dataclass
class TrainState:
    epoch: int = 0
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)
    best_loss: float = np.inf
    loss_history: list = field(default_factory=list)
    best_history: list = field(default_factory=list)
    grad_norm_history: list = field(default_factory=list)
    n_evals: int = 0
    ls_failures: int = 0
    discarded_pairs: int = 0
    stop_reason: str = ""
    seed: int | None = None
    best_theta: np.ndarray | None = None
    wall_time: float = 0.0

    def clear_memory(self):
        self.s_hist.clear()
        self.y_hist.clear()


def two_loop(g: np.ndarray, s_hist, y_hist) -> np.ndarray:
    """Return ``-H g`` for the L-BFGS inverse-Hessian approximation."""
    q = g.copy()
    k = len(s_hist)
    alpha = np.empty(k)
    rho = np.empty(k)
    for i in range(k - 1, -1, -1):
        rho[i] = 1.0 / (y_hist[i] @ s_hist[i])
        alpha[i] = rho[i] * (s_hist[i] @ q)
        q -= alpha[i] * y_hist[i]
    if k:
        gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        q *= gamma
    for i in range(k):
        beta = rho[i] * (y_hist[i] @ q)
        q += (alpha[i] - beta) * s_hist[i]
    return -q


def _cubic_min(a, fa, ga, b, fb, gb, lo, hi):
    """Minimiser of the cubic through (a, fa, ga), (b, fb, gb), clipped to [lo, hi]."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc >= 0:
        d2 = np.sqrt(disc) * np.sign(b - a)
        denom = gb - ga + 2.0 * d2
        if denom != 0:
            t = b - (b - a) * (gb + d2 - d1) / denom
            if np.isfinite(t):
                return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(fun, x, f0, g0, d, step, c1=1e-4, c2=0.9, max_ls=25):
    """Line search along ``d``; returns (step, f, g, n_evals, ok)."""
    dg0 = g0 @ d
    evals = 0
    a_prev, f_prev, dg_prev = 0.0, f0, dg0
    g_prev = g0
    a = step
    best = (0.0, f0, g0)

    def evaluate(alpha):
        nonlocal evals
        evals += 1
        f, g = fun(x + alpha * d)
        return f, g

    bracket = None
    for i in range(max_ls):
        f, g = evaluate(a)
        if not np.isfinite(f):
            a = 0.5 * (a_prev + a)
            continue
        dg = g @ d
        if f < best[1]:
            best = (a, f, g)
        if f > f0 + c1 * a * dg0 or (i > 0 and f >= f_prev):
            bracket = (a_prev, f_prev, dg_prev, g_prev, a, f, dg, g)
            break
        if abs(dg) <= -c2 * dg0:
            return a, f, g, evals, True
        if dg >= 0:
            bracket = (a, f, dg, g, a_prev, f_prev, dg_prev, g_prev)
            break
        a_new = _cubic_min(a_prev, f_prev, dg_prev, a, f, dg, a + 0.01 * (a - a_prev), 10.0 * a)
        a_prev, f_prev, dg_prev, g_prev = a, f, dg, g
        a = a_new
    else:
        a, f, g = best
        return a, f, g, evals, a > 0

    lo_a, lo_f, lo_dg, lo_g, hi_a, hi_f, hi_dg, hi_g = bracket
    for _ in range(max_ls):
        width = abs(hi_a - lo_a)
        if width < 1e-16 * max(1.0, abs(lo_a)):
            break
        left, right = min(lo_a, hi_a), max(lo_a, hi_a)
        aj = _cubic_min(lo_a, lo_f, lo_dg, hi_a, hi_f, hi_dg, left + 0.1 * width, right - 0.1 * width)
        fj, gj = evaluate(aj)
        if not np.isfinite(fj):
            hi_a, hi_f, hi_dg, hi_g = aj, np.inf, 0.0, gj
            continue
        dgj = gj @ d
        if fj < best[1]:
            best = (aj, fj, gj)
        if fj > f0 + c1 * aj * dg0 or fj >= lo_f:
            hi_a, hi_f, hi_dg, hi_g = aj, fj, dgj, gj
        else:
            if abs(dgj) <= -c2 * dg0:
                return aj, fj, gj, evals, True
            if dgj * (hi_a - lo_a) >= 0:
                hi_a, hi_f, hi_dg, hi_g = lo_a, lo_f, lo_dg, lo_g
            lo_a, lo_f, lo_dg, lo_g = aj, fj, dgj, gj
    a, f, g = best
    # sufficient decrease without curvature is still a usable step
    ok = a > 0 and f <= f0 + c1 * a * dg0
    return a, f, g, evals, ok


def lbfgs_minimize(fun, theta0, cfg: LbfgsConfig | None = None, state: TrainState | None = None,
                   callback=None):
    """Minimise ``fun(theta) -> (f, grad)`` starting from ``theta0``.

    ``callback(state, theta, f, g)`` runs after each epoch; returning True
    stops the run (``stop_reason = "callback"``).  Line-search failures are not
    fatal: the curvature memory is dropped and the epoch is retried along the
    steepest-descent direction; a failure along steepest descent stops the run.
    """
    cfg = cfg or LbfgsConfig()
    state = state or TrainState()
    theta = np.array(theta0, dtype=np.float64)
    f, g = fun(theta)
    state.n_evals += 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise DivergenceError(f"initial loss not finite: {f}")
    if f < state.best_loss:
        state.best_loss, state.best_theta = f, theta.copy()
    start_epoch = state.epoch
    state.stop_reason = ""
    if np.max(np.abs(g)) <= cfg.grad_tol:
        state.stop_reason = "grad_tol"
        return theta, state

    while state.epoch - start_epoch < cfg.max_epochs:
        d = two_loop(g, state.s_hist, state.y_hist)
        if g @ d >= 0:
            state.clear_memory()
            d = -g
        if state.s_hist:
            step = 1.0
        else:
            step = min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-300))
        a, f_new, g_new, nev, ok = strong_wolfe(fun, theta, f, g, d, step, cfg.c1, cfg.c2, cfg.max_ls)
        state.n_evals += nev
        if not ok:
            state.ls_failures += 1
            if state.s_hist:
                log.debug("line search failed at epoch %d; restarting from steepest descent", state.epoch)
                state.clear_memory()
                continue
            state.stop_reason = "line_search"
            break
        s = a * d
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * (y @ y):
            state.s_hist.append(s)
            state.y_hist.append(y)
            if len(state.s_hist) > cfg.history:
                state.s_hist.pop(0)
                state.y_hist.pop(0)
        else:
            state.discarded_pairs += 1
        theta = theta + s
        f_old, f, g = f, f_new, g_new
        if not np.isfinite(f):
            raise DivergenceError(f"loss diverged at epoch {state.epoch}")
        state.epoch += 1
        state.loss_history.append(float(f))
        gnorm = float(np.linalg.norm(g))
        state.grad_norm_history.append(gnorm)
        if f < state.best_loss:
            state.best_loss, state.best_theta = float(f), theta.copy()
        state.best_history.append(state.best_loss)
        if callback is not None and callback(state, theta, f, g):
            state.stop_reason = "callback"
            break
        if np.max(np.abs(g)) <= cfg.grad_tol:
            state.stop_reason = "grad_tol"
            break
        if cfg.loss_tol > 0 and abs(f_old - f) <= cfg.loss_tol * max(1.0, abs(f)):
            state.stop_reason = "loss_tol"
            break
    else:
        state.stop_reason = "max_epochs"
    return theta, state
