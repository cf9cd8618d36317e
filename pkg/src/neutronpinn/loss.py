"""Composite PINN loss: PDE residual + weighted initial/boundary/data misfits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DerivativeBundle, DivergenceError, taylor_backward, taylor_forward
from .network import Network
from .physics import (
    ProblemP1Spec,
    ProblemP2Spec,
    TwoGroupProblem,
    residual_iaea,
    residual_iaea_vjp,
    residual_p1,
    residual_p1_vjp,
    residual_p2,
    residual_p2_vjp,
)
from .sampling import SampleSet


@dataclass
class LossConfig:
    w: float = 100.0
    n_pde: int = 3000
    n_initial: int = 1000
    n_boundary: int = 1000
    n_data: int = 0

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("w must be positive")
        for k in ("n_pde", "n_initial", "n_boundary", "n_data"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")

    def counts(self) -> dict:
        return {"pde": self.n_pde, "initial": self.n_initial, "boundary": self.n_boundary,
                "data": self.n_data}


@dataclass
class LossBreakdown:
    pde: float
    initial: float
    boundary: float
    data: float
    total: float

    def as_dict(self) -> dict:
        return {"pde": self.pde, "initial": self.initial, "boundary": self.boundary,
                "data": self.data, "total": self.total}


@dataclass
class PinnModel:
    """One network per flux group plus an optional trainable ``lam = 1/k_eff``."""

    nets: list
    lam: float | None = None
    history: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(n.n_params for n in self.nets) + (1 if self.lam is not None else 0)

    def get_flat(self) -> np.ndarray:
        parts = [n.get_flat() for n in self.nets]
        if self.lam is not None:
            parts.append(np.array([self.lam]))
        return np.concatenate(parts)

    def set_flat(self, theta) -> None:
        start = 0
        for n in self.nets:
            n.set_flat(theta[start : start + n.n_params])
            start += n.n_params
        if self.lam is not None:
            self.lam = float(theta[start])

    @property
    def k_eff(self) -> float | None:
        return None if self.lam is None else 1.0 / self.lam

    def copy(self) -> "PinnModel":
        return PinnModel([n.copy() for n in self.nets], self.lam)


def as_model(obj) -> PinnModel:
    if isinstance(obj, PinnModel):
        return obj
    if isinstance(obj, Network):
        return PinnModel([obj])
    if isinstance(obj, (list, tuple)):
        return PinnModel(list(obj))
    return PinnModel([obj])


def hess_dims(problem) -> tuple:
    if isinstance(problem, ProblemP1Spec):
        return (0,)
    return (0, 1)


def _evaluate(pred, X, order, hdims, want_tape):
    if isinstance(pred, Network):
        b, tape = taylor_forward(pred, X, order, hdims)
        return b, (tape if want_tape else None)
    if want_tape:
        raise TypeError("parameter gradients need Network predictors")
    return pred.derivatives(X, order, hdims), None


def pde_residuals(problem, bundles, X, lam=None):
    """Residual arrays (one per equation) at the PDE points."""
    if isinstance(problem, ProblemP1Spec):
        return [residual_p1(problem, bundles[0])]
    if isinstance(problem, ProblemP2Spec):
        return [residual_p2(problem, bundles[0])]
    if isinstance(problem, TwoGroupProblem):
        lam = (1.0 / problem.k_eff) if lam is None else lam
        return list(residual_iaea(problem.materials, problem.mmap, X, bundles[0], bundles[1], lam))
    raise TypeError(f"unsupported problem {problem!r}")


def _pde_vjp(problem, bundles, X, rbars, lam):
    if isinstance(problem, ProblemP1Spec):
        return [residual_p1_vjp(problem, rbars[0])], 0.0
    if isinstance(problem, ProblemP2Spec):
        return [residual_p2_vjp(problem, rbars[0])], 0.0
    c1, c2, lam_bar = residual_iaea_vjp(problem.materials, problem.mmap, X, bundles[0], bundles[1],
                                        lam, rbars[0], rbars[1])
    return [c1, c2], lam_bar


def point_residual(model, problem, X) -> np.ndarray:
    """Summed |residual| over equations at ``X`` (used for RAR cell ranking)."""
    model = as_model(model)
    hd = hess_dims(problem)
    bundles = [_evaluate(p, X, 2, hd, False)[0] for p in model.nets]
    lam = model.lam
    res = pde_residuals(problem, bundles, X, lam)
    return np.sum([np.abs(r) for r in res], axis=0)


def _check(name, value):
    if not np.isfinite(value):
        raise DivergenceError(f"{name} loss is not finite ({value})")


def assemble_loss(model, samples: SampleSet, problem, cfg: LossConfig, grad: bool = False):
    """Loss breakdown (and optionally the flat parameter gradient).

    ``model`` is a :class:`PinnModel`, a single :class:`Network`, or any
    predictor exposing ``derivatives(X, order, hess_dims)`` (value-only use).
    Each term is a mean of squared errors; ``total = pde + w * (initial +
    boundary + data)``.
    """
    model = as_model(model)
    if samples.is_empty():
        raise ValueError("sample set is empty")
    nets = model.nets
    hd = hess_dims(problem)
    w = cfg.w
    lam = model.lam if model.lam is not None else (
        1.0 / problem.k_eff if isinstance(problem, TwoGroupProblem) else None)
    grads = [np.zeros(p.n_params) for p in nets] if grad else None
    lam_grad = 0.0

    # PDE residuals
    pde = 0.0
    Xp = samples.pde
    if len(Xp):
        evals = [_evaluate(p, Xp, 2, hd, grad) for p in nets]
        bundles = [e[0] for e in evals]
        res = pde_residuals(problem, bundles, Xp, lam)
        n = len(Xp)
        pde = float(sum(np.dot(r, r) for r in res) / n)
        _check("pde", pde)
        if grad:
            cots, lam_bar = _pde_vjp(problem, bundles, Xp, [2.0 * r / n for r in res], lam)
            for i, (cot, (_, tape)) in enumerate(zip(cots, evals)):
                grads[i] += taylor_backward(tape, cot)
            lam_grad += lam_bar

    # initial condition (first network only; time-dependent problems have one)
    initial = 0.0
    if len(samples.initial):
        b, tape = _evaluate(nets[0], samples.initial, 0, (), grad)
        e = b.value - samples.initial_values
        n = len(e)
        initial = float(e @ e / n)
        _check("initial", initial)
        if grad:
            cot = DerivativeBundle(w * 2.0 * e / n, np.zeros_like(b.grad), np.zeros_like(b.grad))
            grads[0] += taylor_backward(tape, cot)

    # boundary: zero flux, or zero normal derivative where a normal is given
    boundary = 0.0
    Xb = samples.boundary
    if len(Xb):
        nrm = samples.boundary_normal
        neu = np.any(nrm != 0, axis=1)
        order = 1 if neu.any() else 0
        n = len(Xb)
        for i, p in enumerate(nets):
            b, tape = _evaluate(p, Xb, order, (), grad)
            if order:
                dn = np.einsum("nd,nd->n", b.grad[:, : nrm.shape[1]], nrm)
                e = np.where(neu, dn, b.value)
            else:
                e = b.value
            boundary += float(e @ e / n)
            if grad:
                cot = DerivativeBundle.zeros(n, b.grad.shape[1])
                cot.value = np.where(neu, 0.0, w * 2.0 * e / n)
                if order:
                    cot.grad[:, : nrm.shape[1]] = np.where(neu, w * 2.0 * e / n, 0.0)[:, None] * nrm
                grads[i] += taylor_backward(tape, cot)
        _check("boundary", boundary)

    # labelled anchors
    data = 0.0
    if len(samples.data):
        n = len(samples.data)
        for i, p in enumerate(nets):
            b, tape = _evaluate(p, samples.data, 0, (), grad)
            e = b.value - samples.data_values[:, i]
            data += float(e @ e / n)
            if grad:
                cot = DerivativeBundle(w * 2.0 * e / n, np.zeros_like(b.grad), np.zeros_like(b.grad))
                grads[i] += taylor_backward(tape, cot)
        _check("data", data)

    total = pde + w * (initial + boundary + data)
    _check("total", total)
    out = LossBreakdown(pde, initial, boundary, data, total)
    if not grad:
        return out
    parts = grads + ([np.array([lam_grad])] if model.lam is not None else [])
    g = np.concatenate(parts)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("loss gradient is not finite")
    return out, g
