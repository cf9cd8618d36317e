"""Training loop: full-batch L-BFGS epochs interleaved with RAR rounds."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DivergenceError
from .lbfgs import LbfgsConfig, TrainState, lbfgs_minimize, strong_wolfe, two_loop  # noqa: F401
from .loss import LossConfig, PinnModel, as_model, assemble_loss, point_residual
from .network import load_checkpoint, save_checkpoint
from .sampling import RarConfig, SampleSet, domain_filter, rar_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "pde", "initial", "boundary", "data", "total", "grad_norm", "n_pde", "lam")


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 1000


def adam_minimize(fun, theta0, cfg: AdamConfig | None = None, state: TrainState | None = None,
                  callback=None):
    """First-order fallback with the same ``fun``/``callback`` contract as L-BFGS."""
    cfg = cfg or AdamConfig()
    state = state or TrainState()
    theta = np.array(theta0, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    state.stop_reason = "max_epochs"
    for it in range(1, cfg.max_epochs + 1):
        f, g = fun(theta)
        state.n_evals += 1
        if not np.isfinite(f):
            raise DivergenceError(f"loss diverged at epoch {state.epoch}")
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mh = m / (1 - cfg.beta1**it)
        vh = v / (1 - cfg.beta2**it)
        theta = theta - cfg.lr * mh / (np.sqrt(vh) + cfg.eps)
        state.epoch += 1
        state.loss_history.append(float(f))
        state.grad_norm_history.append(float(np.linalg.norm(g)))
        if f < state.best_loss:
            state.best_loss, state.best_theta = float(f), theta.copy()
        state.best_history.append(state.best_loss)
        if callback is not None and callback(state, theta, f, g):
            state.stop_reason = "callback"
            break
    return theta, state


@dataclass
class TrainOptions:
    """Loop-level settings that are not part of the optimizer itself."""

    log_path: str | Path | None = None
    checkpoint_dir: str | Path | None = None
    checkpoint_every: int = 0
    hooks: list = field(default_factory=list)
    optimizer: str = "lbfgs"
    adam: AdamConfig = field(default_factory=AdamConfig)


class Hook:
    """Base class for periodic training hooks; ``__call__`` returning True stops training."""

    period: int = 200

    def __call__(self, state: TrainState, model: PinnModel) -> bool:  # pragma: no cover
        return False


def save_model(model: PinnModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, net in enumerate(model.nets):
        save_checkpoint(net, directory / f"net{i}.ckpt")
    (directory / "model.json").write_text(
        json.dumps({"n_nets": len(model.nets), "lam": model.lam}, indent=1)
    )


def load_model(directory) -> PinnModel:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    nets = [load_checkpoint(directory / f"net{i}.ckpt") for i in range(meta["n_nets"])]
    return PinnModel(nets, meta["lam"])


def train(model, problem, samples: SampleSet, loss_cfg: LossConfig, opt_cfg: LbfgsConfig,
          rar_cfg: RarConfig | None = None, rng: np.random.Generator | None = None,
          options: TrainOptions | None = None):
    """Train ``model`` in place; returns ``(model, state, samples)``.

    Epochs run in segments of ``rar_cfg.period``.  After each segment (or an
    earlier optimizer stop) one RAR round is applied while the PDE cap leaves
    room, and the curvature memory is dropped because the objective changed.
    Training ends when the epoch budget is spent, a hook asks to stop, or the
    optimizer stops with no RAR round left to apply.
    """
    model = as_model(model)
    options = options or TrainOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    state = TrainState()
    keep = domain_filter(problem)
    box = problem.box
    budget = opt_cfg.max_epochs

    last_eval = {}

    def fun(theta):
        model.set_flat(theta)
        br, g = assemble_loss(model, samples, problem, loss_cfg, grad=True)
        last_eval[br.total] = br
        return br.total, g

    log_fh = None
    writer = None
    if options.log_path:
        log_fh = open(options.log_path, "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)

    good_theta = model.get_flat()

    def callback(st, theta, f, g):
        nonlocal good_theta
        good_theta = theta.copy()
        br = last_eval.get(f)
        last_eval.clear()
        if writer is not None:
            row = [st.epoch]
            row += [repr(getattr(br, k)) if br else "" for k in ("pde", "initial", "boundary", "data")]
            row += [repr(float(f)), repr(float(np.linalg.norm(g))), len(samples.pde),
                    "" if model.lam is None else repr(float(theta[-1]))]
            writer.writerow(row)
        if options.checkpoint_dir and options.checkpoint_every and st.epoch % options.checkpoint_every == 0:
            model.set_flat(theta)
            save_model(model, options.checkpoint_dir)
        stop = False
        for hook in options.hooks:
            if st.epoch % hook.period == 0:
                model.set_flat(theta)
                stop |= bool(hook(st, model))
        return stop

    t0 = time.perf_counter()
    theta = model.get_flat()
    try:
        while state.epoch < budget:
            seg = budget - state.epoch
            if rar_cfg is not None and rar_cfg.m > 0:
                seg = min(seg, rar_cfg.period - state.epoch % rar_cfg.period)
            if options.optimizer == "adam":
                acfg = AdamConfig(**{**options.adam.__dict__, "max_epochs": seg})
                theta, state = adam_minimize(fun, theta, acfg, state, callback)
            else:
                seg_cfg = LbfgsConfig(**{**opt_cfg.__dict__, "max_epochs": seg})
                theta, state = lbfgs_minimize(fun, theta, seg_cfg, state, callback)
            model.set_flat(theta)
            if state.stop_reason == "callback":
                break
            can_rar = (rar_cfg is not None and rar_cfg.m > 0 and len(samples.pde) < rar_cfg.cap)
            if not can_rar:
                if state.stop_reason != "max_epochs":
                    break
                continue
            samples = rar_step(samples, lambda X: point_residual(model, problem, X), rar_cfg, box,
                               rng, keep)
            state.clear_memory()
            log.info("epoch %d: RAR round %d, %d pde points", state.epoch, samples.rar_rounds,
                     len(samples.pde))
    except DivergenceError as exc:
        model.set_flat(good_theta)
        if options.checkpoint_dir:
            save_model(model, options.checkpoint_dir)
        exc.state = state
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    state.wall_time = time.perf_counter() - t0
    if options.checkpoint_dir:
        save_model(model, options.checkpoint_dir)
    return model, state, samples
