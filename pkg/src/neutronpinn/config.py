"""Flat ``section.key = value`` experiment configuration.

Example::

    problem = p1
    seed = 0
    problem.k_inf = 1.0041
    network.depth = 10
    rar.m = 500
    optim.max_epochs = 3000

Keys without a dot are run-level (``problem``, ``seed``, ``out``).  Lists
are comma separated.  Unknown keys are errors, so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .criticality import SearchConfig
from .lbfgs import LbfgsConfig
from .loss import LossConfig
from .network import NetworkConfig
from .sampling import RarConfig


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


PROBLEMS = ("p1", "p2", "p3", "p4")

# per-problem defaults applied before the user's keys
PROBLEM_DEFAULTS = {
    "p1": {},
    "p2": {"network.input_dim": "3"},
    "p3": {
        "network.depth": "6",
        "sampling.boundary": "1000",
        "sampling.data": "400",
        "sampling.initial": "0",
        # the two-group residuals are O(1e-3) for unit-scale fluxes; a small w keeps
        # the PDE term from being swamped by the anchor misfit
        "loss.w": "0.001",
        "optim.max_epochs": "5000",
    },
    "p4": {
        "network.depth": "6",
        "sampling.pde": "6000",
        "sampling.boundary": "500",
        "sampling.data": "76",
        "sampling.initial": "0",
        "rar.cap": "8000",
        "loss.w": "0.001",
        "network.input_range": "2",
        "optim.max_epochs": "4000",
    },
}


@dataclass
class SamplingConfig:
    pde: int = 3000
    initial: int = 1000
    boundary: int = 1000
    data: int = 0

    def counts(self) -> dict:
        return {"pde": self.pde, "initial": self.initial, "boundary": self.boundary, "data": self.data}


@dataclass
class OracleConfig:
    nx: int = 100
    nt: int = 100
    refine: int = 0  # two-group mesh refinement; 0 picks the problem default
    method: str = ""  # p1: series | fdm


@dataclass
class SweepConfig:
    depths: list = field(default_factory=list)
    skips: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    ms: list = field(default_factory=list)
    k_values: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def is_empty(self) -> bool:
        return not any(getattr(self, f.name) for f in fields(self))


@dataclass
class ExperimentConfig:
    problem: str = "p1"
    seed: int = 0
    out: str = "runs/default"
    physics: dict = field(default_factory=dict)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    rar: RarConfig = field(default_factory=RarConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: LbfgsConfig = field(default_factory=LbfgsConfig)
    optimizer: str = "lbfgs"
    search: SearchConfig = field(default_factory=SearchConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    checkpoint_every: int = 0
    raw: dict = field(default_factory=dict)

    def echo(self) -> str:
        """Canonical key=value text (sorted), enough to rebuild this config."""
        keys = dict(self.raw)
        keys["problem"] = self.problem
        keys["seed"] = str(self.seed)
        keys["out"] = self.out
        return "".join(f"{k} = {keys[k]}\n" for k in sorted(keys))


def parse_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k] = v
    return out


def _cast(value: str, like, key):
    try:
        if isinstance(like, bool):
            v = value.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, list):
            return [float(s) if "." in s or "e" in s.lower() else int(s)
                    for s in (t.strip() for t in value.split(",")) if s]
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def _apply(obj, section: str, items: dict):
    names = {f.name: f for f in fields(obj)}
    kw = {}
    for k, v in items.items():
        if k not in names:
            raise ConfigError(f"unknown key {section}.{k}")
        kw[k] = _cast(v, getattr(obj, k), f"{section}.{k}")
    try:
        return replace(obj, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


PHYSICS_KEYS = {
    "p1": {"v", "D", "L2", "a", "k_inf", "ic_id", "t_end"},
    "p2": {"v", "D", "L2", "half_width", "k_inf", "t_end"},
    "p3": {"k_eff", "materials", "map"},
    "p4": {"materials", "map"},
}


def build_config(keys: dict, overrides: dict | None = None) -> ExperimentConfig:
    keys = dict(keys)
    for k, v in (overrides or {}).items():
        if v is not None:
            keys[k] = str(v)
    problem = keys.get("problem", "p1").lower()
    if problem not in PROBLEMS:
        raise ConfigError(f"unknown problem {problem!r}; choose from {', '.join(PROBLEMS)}")
    merged = {**PROBLEM_DEFAULTS[problem], **keys}
    merged["problem"] = problem

    sections: dict[str, dict] = {}
    top = {}
    for k, v in merged.items():
        if "." in k:
            sec, sub = k.split(".", 1)
            sections.setdefault(sec, {})[sub] = v
        else:
            top[k] = v

    known_top = {"problem", "seed", "out", "optimizer", "checkpoint_every"}
    for k in top:
        if k not in known_top:
            raise ConfigError(f"unknown key {k}")

    cfg = ExperimentConfig(problem=problem)
    cfg.seed = _cast(top.get("seed", "0"), 0, "seed")
    cfg.out = top.get("out", f"runs/{problem}")
    cfg.optimizer = top.get("optimizer", "lbfgs")
    if cfg.optimizer not in ("lbfgs", "adam"):
        raise ConfigError(f"optimizer must be lbfgs or adam, got {cfg.optimizer!r}")
    cfg.checkpoint_every = _cast(top.get("checkpoint_every", "0"), 0, "checkpoint_every")

    phys = sections.pop("problem", {})
    bad = set(phys) - PHYSICS_KEYS[problem]
    if bad:
        raise ConfigError(f"unknown key(s) for {problem}: " + ", ".join(f"problem.{b}" for b in sorted(bad)))
    cfg.physics = {}
    for k, v in phys.items():
        cfg.physics[k] = v if k in ("ic_id", "materials", "map") else _cast(v, 0.0, f"problem.{k}")

    net = sections.pop("network", {})
    net.setdefault("seed", str(cfg.seed))
    cfg.network = _apply(NetworkConfig(), "network", net)
    cfg.sampling = _apply(SamplingConfig(), "sampling", sections.pop("sampling", {}))
    rar = sections.pop("rar", {})
    rar.setdefault("initial", str(cfg.sampling.pde))
    cfg.rar = _apply(RarConfig(initial=cfg.sampling.pde, cap=max(5000, cfg.sampling.pde)), "rar", rar)
    cfg.loss = _apply(LossConfig(), "loss", sections.pop("loss", {}))
    cfg.optim = _apply(LbfgsConfig(), "optim", sections.pop("optim", {}))
    cfg.search = _apply(SearchConfig(), "search", sections.pop("search", {}))
    cfg.oracle = _apply(OracleConfig(), "oracle", sections.pop("oracle", {}))
    cfg.sweep = _apply(SweepConfig(), "sweep", sections.pop("sweep", {}))
    if sections:
        raise ConfigError("unknown section(s): " + ", ".join(sorted(sections)))

    expected_dim = 3 if problem == "p2" else 2
    if cfg.network.input_dim != expected_dim:
        raise ConfigError(f"{problem} needs network.input_dim = {expected_dim}")
    cfg.raw = {k: v for k, v in merged.items() if k not in ("problem", "seed", "out")}
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    keys = {}
    if path is not None:
        try:
            keys = parse_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(keys, overrides)
