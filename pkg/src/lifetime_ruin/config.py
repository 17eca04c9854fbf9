"""INI experiment configuration.

Sections: ``[market]`` (required), ``[grid]``, ``[solver]``, ``[mc]`` and
``[run]``. Unknown sections or keys are rejected with the key named.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .grid import GridSpec
from .market import ConfigError, MarketParams
from .solver import SolverConfig


@dataclass(frozen=True)
class MCConfig:
    dt: float = 1e-3
    n_paths: int = 100_000
    seed: int = 0
    mode: str = "sample_death"
    strategy: str = "liquidate_now"
    x0: float = 5.0
    y0: float = 0.0
    t_max: float | None = None
    horizon: float = 5.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_paths < 100:
            raise ValueError("n_paths must be at least 100")
        if self.mode not in ("sample_death", "discount_death"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.strategy not in ("liquidate_now", "no_transaction", "feedback"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass(frozen=True)
class VerifyConfig:
    """Settings of the verification battery.

    ``checks`` is a comma-separated subset of the check names or ``all``.
    ``lyapunov_p``/``lyapunov_k`` override the Lyapunov exponent and price.
    """

    checks: str = "all"
    slack: float = 0.02
    frictionless_cost: float = 1e-4
    lyapunov_p: float | None = None
    lyapunov_k: float | None = None

    def selected(self, names):
        if self.checks.strip() == "all":
            return list(names)
        chosen = [c.strip() for c in self.checks.split(",") if c.strip()]
        for c in chosen:
            if c not in names:
                raise ValueError(f"unknown check {c!r}")
        return chosen


@dataclass(frozen=True)
class ExperimentConfig:
    market: MarketParams = field(default_factory=MarketParams)
    grid: GridSpec = field(default_factory=GridSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    mc: MCConfig = field(default_factory=MCConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    sweep_sizes: tuple = ()
    outputs: Path = Path(".")
    workers: int = 1

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", "config")
        cp = configparser.ConfigParser()
        try:
            cp.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        return cls.from_parser(cp, base=path.parent)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, base: Path = Path(".")) -> "ExperimentConfig":
        known = {"market", "grid", "solver", "mc", "run", "verify", "sweep"}
        for sec in cp.sections():
            if sec not in known:
                raise ConfigError(f"unknown section: [{sec}]", sec)
        if not cp.has_section("market"):
            raise ConfigError("missing section: [market]", "market")
        market = MarketParams.from_mapping(dict(cp.items("market")))
        run = _typed(cp, "run", {"outputs": str, "workers": int})
        workers = run.get("workers", 1)
        if workers < 0:
            raise ConfigError("workers must be nonnegative", "workers")
        grid = _build(GridSpec, _typed(cp, "grid", _field_types(GridSpec, skip={"subdiv"})), "grid")
        solver_keys = _typed(cp, "solver", _field_types(SolverConfig, skip={"workers", "max_policy_iters"}))
        solver = _build(SolverConfig, {**solver_keys, "workers": workers}, "solver")
        mc = _build(MCConfig, _typed(cp, "mc", _field_types(MCConfig)), "mc")
        verify = _build(VerifyConfig, _typed(cp, "verify", _field_types(VerifyConfig)), "verify")
        sweep = _typed(cp, "sweep", {"sizes": _int_list})
        outputs = Path(run.get("outputs", "."))
        if not outputs.is_absolute():
            outputs = base / outputs
        return cls(market, grid, solver, mc, verify, tuple(sweep.get("sizes", ())), outputs, workers)


def _int_list(raw: str):
    return [int(v) for v in raw.replace(",", " ").split()]


_CASTS = {"int": int, "float": float, "str": str, "float | None": float}


def _field_types(cls, skip=()):
    return {f.name: _CASTS[f.type] for f in fields(cls) if f.name not in skip}


def _typed(cp, section, types):
    if not cp.has_section(section):
        return {}
    out = {}
    for key, raw in cp.items(section):
        if key not in types:
            raise ConfigError(f"unknown {section} key: {key}", key)
        try:
            out[key] = types[key](raw)
        except ValueError:
            raise ConfigError(f"{section} key {key} has a bad value: {raw!r}", key) from None
    return out


def _build(cls, kwargs, section):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}", section) from None
