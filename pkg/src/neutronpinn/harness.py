"""Experiment orchestration: solve, oracle, search, sweep and report.

Every run directory holds ``config.txt`` (the canonical config echo,
seed included), so a table cell can be regenerated from its directory.
Metrics files carry no timings, which keeps them bit-reproducible.

Run directory layout (``solve``)::

    config.txt      canonical key = value echo
    metrics.csv     field,metric,value
    train_log.csv   epoch,pde,initial,boundary,data,total,grad_norm,n_pde,lam
    run.json        epochs, stop reason, wall time (not part of metrics)
    prediction.csv  coordinates, per field: truth, pred
    samples.csv     role, coordinates, residual
    checkpoint/     net*.ckpt + model.json
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, build_config
from .criticality import (
    Candidate,
    EarlyStopHook,
    SearchResult,
    run_search,
    steady_state_metric,
)
from .loss import PinnModel
from .network import init_gaussian
from .optimize import AdamConfig, TrainOptions, train
from .oracles import FieldGrid, anchors_from_oracle, eigensolve_two_group, fdm_evolve
from .physics import (
    ProblemP1Spec,
    SeriesSolution,
    TwoGroupProblem,
    load_material_map,
    load_materials,
    make_problem,
)
from .plots import heatmap, line_plot, write_columns
from .sampling import export_csv, sample_roles

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("field", "metric", "value")
DEFAULT_REFINE = {"p3": 10, "p4": 2}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class FieldMetrics:
    mse: float
    mse_final: float  # Omega_1: last slice of a time axis, nan for static fields
    e_r_mean: float
    e_r_max: float
    e_r_p95: float
    e_r_masked: int
    e_inf: float


@dataclass
class MetricsReport:
    fields: dict
    extra: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for name in sorted(self.fields):
            m = self.fields[name]
            for k, v in m.__dict__.items():
                out.append((name, k, v))
        for key in sorted(self.extra):
            name, metric = key.split(":", 1) if ":" in key else ("run", key)
            out.append((name, metric, self.extra[key]))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for name, metric, v in self.rows():
                w.writerow([name, metric, _num(v)])

    def get(self, name, metric):
        key = f"{name}:{metric}"
        if key in self.extra:
            return self.extra[key]
        if name in self.fields and hasattr(self.fields[name], metric):
            return getattr(self.fields[name], metric)
        raise KeyError(key)


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def field_metrics(pred, truth, mask=None, time_axis=False, zero_tol=0.0) -> FieldMetrics:
    """Pointwise comparison of two aligned arrays.

    ``e_r = |pred - truth| / |truth|`` is skipped (and counted in
    ``e_r_masked``) where ``|truth| <= zero_tol``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"grids not aligned: {pred.shape} vs {truth.shape}")
    mask = np.ones(truth.shape, bool) if mask is None else np.asarray(mask, bool)
    err = (pred - truth)[mask]
    tv = truth[mask]
    mse = float(np.mean(err**2))
    if time_axis:
        last = (pred - truth)[..., -1][mask[..., -1]]
        mse_final = float(np.mean(last**2))
    else:
        mse_final = math.nan
    ok = np.abs(tv) > zero_tol
    rel = np.abs(err[ok]) / np.abs(tv[ok])
    if rel.size:
        e_r_mean, e_r_max, e_r_p95 = float(rel.mean()), float(rel.max()), float(np.percentile(rel, 95))
    else:
        e_r_mean = e_r_max = e_r_p95 = math.nan
    tmax = float(np.max(np.abs(tv)))
    e_inf = float(np.max(np.abs(err)) / tmax) if tmax > 0 else math.nan
    return FieldMetrics(mse, mse_final, e_r_mean, e_r_max, e_r_p95, int((~ok).sum()), e_inf)


def compute_metrics(pred_fn, grid: FieldGrid, names=None, time_axis=None) -> MetricsReport:
    """Evaluate ``pred_fn(points) -> (n,) or (n, n_fields)`` against ``grid``."""
    names = list(names or grid.fields)
    pts = grid.points()
    out = np.asarray(pred_fn(pts), dtype=np.float64).reshape(len(pts), -1)
    if out.shape[1] != len(names):
        raise ValueError(f"prediction has {out.shape[1]} columns for {len(names)} fields")
    time_axis = (grid.names[-1] == "t") if time_axis is None else time_axis
    rep = {}
    for j, name in enumerate(names):
        rep[name] = field_metrics(out[:, j].reshape(grid.shape), grid.fields[name], grid.mask,
                                  time_axis)
    return MetricsReport(rep)


def assembly_errors(pred, truth, grid: FieldGrid, mmap, materials):
    """Assembly-averaged relative errors on the unrefined map cells.

    Returns ``(rel_power, err)`` arrays over fuel assemblies; ``rel_power``
    is the assembly mean divided by the mean over all fuel assemblies.
    """
    xs, ys = grid.axes
    ix = np.floor((xs - mmap.origin[0]) / mmap.cell).astype(int)
    iy = np.floor((ys - mmap.origin[1]) / mmap.cell).astype(int)
    IX, IY = np.meshgrid(ix, iy, indexing="ij")
    fuel = {k for k, m in materials.items() if m.fissile}
    rel, err = [], []
    tsum, psum, cnt = {}, {}, {}
    for a, b, p, t, ok in zip(IX.ravel(), IY.ravel(), pred.ravel(), truth.ravel(), grid.mask.ravel()):
        if not ok:
            continue
        key = (a, b)
        tsum[key] = tsum.get(key, 0.0) + t
        psum[key] = psum.get(key, 0.0) + p
        cnt[key] = cnt.get(key, 0) + 1
    keys = [k for k in sorted(tsum) if int(mmap.ids[k[1], k[0]]) in fuel]
    tm = np.array([tsum[k] / cnt[k] for k in keys])
    pm = np.array([psum[k] / cnt[k] for k in keys])
    rel = tm / tm.mean()
    err = np.abs(pm - tm) / tm
    return rel, err


def assembly_check(rel, err, hot=0.9, tol_hot=0.05, tol_cold=0.08) -> dict:
    """Engineering acceptance: ``tol_hot`` where relative power > ``hot``, ``tol_cold`` elsewhere."""
    h = rel > hot
    max_hot = float(err[h].max()) if h.any() else 0.0
    max_cold = float(err[~h].max()) if (~h).any() else 0.0
    return {"max_hot": max_hot, "max_cold": max_cold,
            "pass": bool(max_hot < tol_hot and max_cold < tol_cold)}


# --------------------------------------------------------------------------
# problem / oracle construction
# --------------------------------------------------------------------------


def build_problem(cfg: ExperimentConfig):
    phys = dict(cfg.physics)
    if cfg.problem in ("p3", "p4"):
        if "materials" in phys:
            phys["materials"] = load_materials(phys.pop("materials"))
        if "map" in phys:
            phys["mmap"] = load_material_map(phys.pop("map"))
    try:
        return make_problem(cfg.problem, **phys)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem parameters: {exc}") from None


def reference(cfg: ExperimentConfig, problem, method: str | None = None):
    """Oracle grid for ``problem``; returns ``(grid, info)``.

    p1 defaults to the analytical series (``method='fdm'`` selects the
    explicit scheme), p2 always uses the explicit scheme and p3/p4 the
    two-group power iteration.
    """
    method = method or cfg.oracle.method
    if cfg.problem == "p1":
        method = method or "series"
        if method == "fdm":
            return fdm_evolve(problem, cfg.oracle.nx, cfg.oracle.nt), {"method": "fdm"}
        if method != "series":
            raise ConfigError(f"p1 oracle method must be series or fdm, got {method!r}")
        lo, hi = problem.box
        x = np.linspace(lo[0], hi[0], cfg.oracle.nx)
        t = np.linspace(lo[1], hi[1], cfg.oracle.nt)
        g = FieldGrid(("x", "t"), [x, t], {"phi": np.zeros((len(x), len(t)))})
        g.fields["phi"] = SeriesSolution(problem)(g.points()).reshape(g.shape)
        g.meta["method"] = "series"
        return g, {"method": "series"}
    if cfg.problem == "p2":
        if method not in ("", "fdm"):
            raise ConfigError("p2 only has the fdm oracle")
        return fdm_evolve(problem, cfg.oracle.nx, cfg.oracle.nt), {"method": "fdm"}
    if method not in ("", "eigen"):
        raise ConfigError(f"{cfg.problem} only has the eigen oracle")
    refine = cfg.oracle.refine or DEFAULT_REFINE[cfg.problem]
    res = eigensolve_two_group(problem.materials, problem.mmap, refine=refine)
    return res.grid, {"method": "eigen", "k_eff": res.k_eff, "iterations": res.iterations,
                      "refine": refine, "result": res}


def build_model(cfg: ExperimentConfig, problem) -> PinnModel:
    n_nets = 2 if isinstance(problem, TwoGroupProblem) else 1
    nets = [init_gaussian(replace(cfg.network, seed=cfg.network.seed + 1000 * i), box=problem.box)
            for i in range(n_nets)]
    lam = 1.0 if getattr(problem, "learn_k", False) else None
    return PinnModel(nets, lam)


def predictor(model: PinnModel):
    def f(X):
        return np.column_stack([n.forward(X) for n in model.nets])
    return f


# --------------------------------------------------------------------------
# solve
# --------------------------------------------------------------------------


@dataclass
class SolveOutcome:
    model: PinnModel
    metrics: MetricsReport
    state: object
    samples: object
    out: Path


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def _train_options(cfg: ExperimentConfig, out: Path | None, hooks=()):
    return TrainOptions(
        log_path=None if out is None else out / "train_log.csv",
        checkpoint_dir=None if out is None else out / "checkpoint",
        checkpoint_every=cfg.checkpoint_every,
        hooks=list(hooks),
        optimizer=cfg.optimizer,
        adam=AdamConfig(max_epochs=cfg.optim.max_epochs),
    )


def fit(cfg: ExperimentConfig, problem, oracle_info=None, out: Path | None = None, hooks=()):
    """Sample, build and train one model; returns ``(model, state, samples)``."""
    rng = np.random.default_rng(cfg.seed)
    anchors = None
    if cfg.sampling.data:
        if oracle_info is None or "result" not in oracle_info:
            raise ConfigError("data anchors need a two-group oracle")
        anchors = anchors_from_oracle(oracle_info["result"], cfg.sampling.data,
                                      np.random.default_rng([cfg.seed, 1]))
    samples = sample_roles(problem, cfg.sampling.counts(), rng, anchors=anchors)
    model = build_model(cfg, problem)
    loss_cfg = replace(cfg.loss, **{f"n_{k}": v for k, v in cfg.sampling.counts().items()})
    rar = cfg.rar if cfg.rar.m > 0 else None
    return train(model, problem, samples, loss_cfg, cfg.optim, rar, rng,
                 _train_options(cfg, out, hooks))


def evaluate_model(cfg, problem, model, grid, info) -> MetricsReport:
    rep = compute_metrics(predictor(model), grid)
    if isinstance(problem, TwoGroupProblem):
        pts = grid.points()
        pred = predictor(model)(pts)
        for j, name in enumerate(("phi1", "phi2")):
            rel, err = assembly_errors(pred[:, j].reshape(grid.shape), grid.fields[name], grid,
                                       problem.mmap, problem.materials)
            chk = assembly_check(rel, err)
            rep.extra[f"{name}:assembly_max_hot"] = chk["max_hot"]
            rep.extra[f"{name}:assembly_max_cold"] = chk["max_cold"]
            rep.extra[f"{name}:assembly_pass"] = chk["pass"]
        k_ref = info["k_eff"]
        k_pred = model.k_eff if model.k_eff is not None else problem.k_eff
        rep.extra["k_eff:pred"] = k_pred
        rep.extra["k_eff:ref"] = k_ref
        rep.extra["k_eff:e_r"] = abs(k_pred - k_ref) / k_ref
    return rep


def solve(cfg: ExperimentConfig) -> SolveOutcome:
    out = _prepare_out(cfg.out)
    (out / "config.txt").write_text(cfg.echo())
    problem = build_problem(cfg)
    grid, info = reference(cfg, problem)
    model, state, samples = fit(cfg, problem, info, out)
    rep = evaluate_model(cfg, problem, model, grid, info)
    rep.extra["run:epochs"] = state.epoch
    rep.extra["run:n_pde"] = len(samples.pde)
    rep.extra["run:final_loss"] = state.loss_history[-1] if state.loss_history else math.nan
    rep.to_csv(out / "metrics.csv")
    _write_prediction(out / "prediction.csv", grid, predictor(model))
    export_csv(samples, out / "samples.csv")
    (out / "run.json").write_text(json.dumps({
        "epochs": state.epoch, "stop_reason": state.stop_reason, "wall_time": state.wall_time,
        "n_evals": state.n_evals, "n_pde": len(samples.pde), "oracle": info.get("method"),
    }, indent=1))
    return SolveOutcome(model, rep, state, samples, out)


def _write_prediction(path, grid: FieldGrid, pred_fn):
    pts = grid.points()
    keep = grid.mask.ravel()
    pred = np.asarray(pred_fn(pts[keep])).reshape(keep.sum(), -1)
    cols = {n: pts[keep, i] for i, n in enumerate(grid.names)}
    for j, name in enumerate(grid.fields):
        cols[f"{name}_true"] = grid.fields[name].ravel()[keep]
        cols[f"{name}_pred"] = pred[:, j]
    write_columns(path, cols)


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------


def oracle(cfg: ExperimentConfig, method: str | None = None) -> FieldGrid:
    out = _prepare_out(cfg.out)
    (out / "config.txt").write_text(cfg.echo())
    grid, info = reference(cfg, build_problem(cfg), method)
    rows = grid.to_csv(out / "oracle.csv")
    grid.save(out / "oracle.grid")
    meta = {k: v for k, v in info.items() if k != "result"}
    meta["rows"] = rows
    (out / "oracle.json").write_text(json.dumps(meta, indent=1))
    return grid


# --------------------------------------------------------------------------
# criticality search
# --------------------------------------------------------------------------


def search_evaluator(cfg: ExperimentConfig, problem, log_dir: Path | None = None):
    """``k -> Candidate``: train a fresh network (same seed) at each k_inf."""
    if not problem.time_dependent:
        raise ConfigError("criticality search needs a time-dependent problem (p1 or p2)")

    def evaluate(k: float) -> Candidate:
        p = problem.with_k(k)
        hooks = []
        if cfg.search.early_stop:
            hooks.append(EarlyStopHook(p, cfg.search.early_stop_lam, cfg.search.check_period,
                                       cfg.search.early_stop_rule == "signed"))
        sub = None
        if log_dir is not None:
            sub = log_dir / f"k_{k:.7f}"
            sub.mkdir(parents=True, exist_ok=True)
        model, state, _ = fit(cfg, p, None, sub, hooks)
        m = steady_state_metric(model, p)
        return Candidate(k, m.phi_t, m.dphi, state.epoch, state.wall_time)

    return evaluate


def search(cfg: ExperimentConfig, method: str | None = None, keep_runs: bool = False) -> SearchResult:
    out = _prepare_out(cfg.out)
    if method:
        try:
            cfg.search = replace(cfg.search, method=method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg.raw["search.method"] = method
    (out / "config.txt").write_text(cfg.echo())
    problem = build_problem(cfg)
    ev = search_evaluator(cfg, problem, out / "runs" if keep_runs else None)
    res = run_search(ev, cfg.search)
    res.to_json(out / "search.json")
    res.to_csv(out / "candidates.csv")
    return res


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

SWEEP_AXES = (
    ("depths", "network.depth", "depth"),
    ("skips", "network.skip_distance", "skip"),
    ("alphas", "rar.alpha", "alpha"),
    ("ms", "rar.m", "m"),
    ("k_values", "problem.k_inf", "k_inf"),
    ("seeds", "seed", "seed"),
)


def sweep_cells(cfg: ExperimentConfig):
    axes = [(key, label, getattr(cfg.sweep, attr)) for attr, key, label in SWEEP_AXES
            if getattr(cfg.sweep, attr)]
    if not axes:
        return []
    cells = []
    for combo in itertools.product(*(vals for _, _, vals in axes)):
        cells.append({key: val for (key, _, _), val in zip(axes, combo)} | {"_labels": {
            label: val for (_, label, _), val in zip(axes, combo)}})
    return cells


def sweep(cfg: ExperimentConfig, runner=None) -> list[dict]:
    """Run every cell of the cartesian product of the ``sweep.*`` lists.

    Writes ``sweep.csv`` with one row per cell: the swept values, then
    ``field:metric`` columns.  An empty sweep warns and does nothing.
    """
    cells = sweep_cells(cfg)
    if not cells:
        warnings.warn("sweep has no values to iterate over; nothing to do", UserWarning)
        log.warning("empty sweep")
        return []
    out = _prepare_out(cfg.out)
    (out / "config.txt").write_text(cfg.echo())
    runner = runner or solve
    base = {k: v for k, v in cfg.raw.items() if not k.startswith("sweep.")}
    base["problem"] = cfg.problem
    base["seed"] = str(cfg.seed)
    rows = []
    for cell in cells:
        labels = cell.pop("_labels")
        name = "_".join(f"{k}{_tag(v)}" for k, v in labels.items())
        keys = {**base, **{k: str(v) for k, v in cell.items()}, "out": str(out / name)}
        sub = build_config(keys)
        res = runner(sub)
        row = dict(labels)
        row["run"] = name
        for f, metric, v in res.metrics.rows():
            row[f"{f}:{metric}"] = v
        rows.append(row)
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in cols])
    return rows


def _tag(v):
    return f"{v:g}" if isinstance(v, float) else str(v)


def _cell(v):
    if isinstance(v, str):
        return v
    return _num(v)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        return head, list(r)


def report(root, out=None) -> list[Path]:
    """Merge every run CSV below ``root`` into summary tables and plot data.

    Output (default ``root/report``): ``summary.csv`` (run, field, metric,
    value), per-sweep pivots, loss curves and search tables as plot data.
    Files under the output directory are never read back, so repeating the
    call rewrites identical files.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    out = _prepare_out(out or root / "report")
    written = []

    def runs(name):
        return sorted(p for p in root.rglob(name) if out not in p.parents)

    summary = []
    for mpath in runs("metrics.csv"):
        run = mpath.parent.relative_to(root).as_posix() or "."
        _, rows = _read_csv(mpath)
        summary += [[run, *r] for r in rows]
    if summary:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", *METRIC_COLUMNS])
            w.writerows(summary)
        written.append(out / "summary.csv")

    for spath in runs("sweep.csv"):
        head, rows = _read_csv(spath)
        tag = _slug(spath.parent.relative_to(root).as_posix())
        keep = [i for i, h in enumerate(head)
                if ":" not in h or h.split(":", 1)[1] in ("mse", "mse_final", "e_inf", "e_r")]
        with open(out / f"table_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([head[i] for i in keep])
            w.writerows([[r[i] for i in keep] for r in rows])
        written.append(out / f"table_{tag}.csv")

    for lpath in runs("train_log.csv"):
        head, rows = _read_csv(lpath)
        if not rows:
            continue
        tag = _slug(lpath.parent.relative_to(root).as_posix())
        cols = {h: [float(r[i]) if r[i] else math.nan for r in rows] for i, h in enumerate(head)
                if h in ("epoch", "total", "pde", "initial", "boundary", "data")}
        written += line_plot(out, f"loss_{tag}", cols, "epoch",
                             [c for c in ("total", "pde") if c in cols],
                             ylabel="loss", title=f"training loss {tag}", logy=True)

    for cpath in runs("candidates.csv"):
        head, rows = _read_csv(cpath)
        tag = _slug(cpath.parent.relative_to(root).as_posix())
        cols = {"k": [float(r[0]) for r in rows], "phi_t": [float(r[1]) for r in rows]}
        written += line_plot(out, f"search_{tag}", cols, "k", ["phi_t"], xlabel="k_inf",
                             title=f"steady-state test {tag}")

    for ppath in runs("prediction.csv"):
        head, rows = _read_csv(ppath)
        tag = _slug(ppath.parent.relative_to(root).as_posix())
        written += _field_plots(out, tag, head, np.array(rows, dtype=float))
    return written


def _slug(s: str) -> str:
    s = s.strip("./") or "root"
    return s.replace("/", "__")


def _field_plots(out, tag, head, data):
    written = []
    coords = [h for h in head if not h.endswith(("_true", "_pred"))]
    names = [h[:-5] for h in head if h.endswith("_true")]
    if len(coords) != 2:
        return written  # 3D (p2) predictions stay as CSV only
    x = np.unique(data[:, 0])
    y = np.unique(data[:, 1])
    ix = np.searchsorted(x, data[:, 0])
    iy = np.searchsorted(y, data[:, 1])
    for name in names:
        t = data[:, head.index(f"{name}_true")]
        p = data[:, head.index(f"{name}_pred")]
        Z = np.full((len(x), len(y)), np.nan)
        Z[ix, iy] = np.abs(p - t)
        written += heatmap(out, f"abserr_{tag}_{name}", x, y, Z, title=f"|error| {name} {tag}",
                           label=f"abs_err_{name}")
    return written
