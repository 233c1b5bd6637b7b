# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Define the model parameters, presets and configurable pipeline options."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from langchain_core.runnables import RunnableConfig
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from darkpool.errors import ConfigurationError

logger = logging.getLogger(__name__)

PRESETS: Tuple[str, ...] = ("table1", "table2")
LEARNING_RATES: Tuple[float, ...] = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)

Scenario = Literal["regulated-M1", "regulated-M2", "competitive"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MarketParams(_Strict):
    """Scalar model constants, keyed by their symbol names."""

    T: float = Field(1.0, gt=0)  # scaled trading day
    sigma: float = Field(0.02, ge=0)
    gamma: float = 0.01  # permanent impact of the large trader
    epsilon: float = 0.01  # permanent impact of small traders
    eta: float = Field(0.02, gt=0)  # temporary impact
    alpha: float = Field(0.04, ge=0)  # terminal inventory penalty
    phi: float = Field(0.0, ge=0)  # running inventory penalty
    rho: float = Field(300.0, gt=0)  # risk aversion
    kappa: float = 1.0  # exchange weight on permanent impact
    lambda_rate: float = -0.01  # small-trader rate
    k_theta: float = Field(0.0, ge=0)
    k_c: float = Field(100.0, ge=0)
    Q0: float = Field(1.0, ge=0)
    S0: float = 1.0
    X0: float = 0.0
    fee_cap: float = Field(0.01, gt=0)
    liquidity_param: Literal["mean", "rate"] = "mean"

    # Major trader in the competitive market; None means "same as the large trader".
    gamma0: Optional[float] = None
    eta0: Optional[float] = Field(None, gt=0)
    alpha0: Optional[float] = Field(None, ge=0)

    @property
    def major_gamma(self) -> float:
        return self.gamma if self.gamma0 is None else self.gamma0

    @property
    def major_eta(self) -> float:
        return self.eta if self.eta0 is None else self.eta0

    @property
    def major_alpha(self) -> float:
        return self.alpha if self.alpha0 is None else self.alpha0


class DarkPoolSpec(_Strict):
    """Arrival intensity and liquidity-size law of one dark pool."""

    theta: float = Field(..., gt=0)  # arrivals per unit time
    size_mean: float = Field(..., gt=0)  # size parameter a of the liquidity law
    support_eps: float = Field(0.0, ge=0)
    law: Literal["exponential", "uniform"] = "exponential"
    k_c: float = Field(100.0, ge=0)
    liquidity_param: Literal["mean", "rate"] = "mean"

    @property
    def scale(self) -> float:
        """Mean of the liquidity variable above its support bound."""
        if self.liquidity_param == "rate":
            return 1.0 / self.size_mean
        return self.size_mean


class MFGConfig(_Strict):
    """Grids and fixed-point controls of the competitive solver."""

    n_time: int = Field(1000, ge=2)
    n_q: int = Field(400, ge=2)
    q_max: float = Field(1.2, gt=0)
    omega: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-6, gt=0)
    max_iters: int = Field(200, ge=1)
    E0: float = 0.1  # mean of the minors' initial inventory
    m0_std: float = Field(0.05, gt=0)
    quad_nodes: int = Field(32, ge=2)
    alloc_iters: int = Field(40, ge=5)
    snapshot_times: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])


class TrainConfig(_Strict):
    """Actor-critic hyperparameters and the state-space sampling box."""

    batch_size: int = Field(200, ge=2)
    learning_rate: float = 1e-3
    dt: float = Field(1e-3, gt=0)
    fd_step: float = Field(1e-3, gt=0)
    epochs: int = Field(50_000, ge=1)
    critic_period: int = Field(1, ge=1)  # K_c
    actor_period: int = Field(2, ge=1)  # K_a
    target_period: int = Field(10, ge=1)  # K_tg
    tau: float = Field(0.01, gt=0, le=1)
    q_bar: float = Field(1.2, gt=0)
    s_bar: float = Field(2.0, gt=0)
    x_bar: float = Field(2.0, gt=0)
    i_bar: float = Field(0.05, gt=0)
    hidden: int = Field(64, ge=1)
    z_bound: float = Field(1.0, gt=0)
    u_beta: float = Field(0.1, gt=0)
    terminal_weight: float = Field(1.0, ge=0)
    quad_nodes: int = Field(16, ge=2)
    seed: int = 0

    @field_validator("learning_rate")
    @classmethod
    def _known_learning_rate(cls, value: float) -> float:
        if not any(abs(value - lr) <= 1e-12 for lr in LEARNING_RATES):
            raise ValueError(f"learning_rate must be one of {LEARNING_RATES}")
        return value


class SimConfig(_Strict):
    """Monte-Carlo experiment settings."""

    n_paths: int = Field(10_000, ge=1)
    seed: int = 0
    scenario: Scenario = "regulated-M1"
    fee_source: Literal["constant", "actor", "zero"] = "constant"
    lit_fee: float = Field(0.01, ge=0)
    dark_fee: float = Field(0.01, ge=0)
    z: float = 0.0
    u: float = Field(0.0, ge=0)
    y0: Optional[float] = None  # None: bind the participation constraint at R0
    dt: float = Field(1e-3, gt=0)
    measure: Literal["controlled", "reference"] = "controlled"
    utility: Literal["exponential", "linear"] = "exponential"
    benchmark_paths: int = Field(10_000, ge=1)
    n_minors: Optional[int] = Field(None, ge=1)  # None: mean-field limit in competitive runs


class ExperimentSpec(_Strict):
    """One experiment: a preset, its overrides, the output directory and the root seed."""

    scenario: Scenario = "regulated-M1"
    preset: str = "table1"
    overrides: Dict[str, Any] = Field(default_factory=dict)
    out_dir: Path = Path("runs/default")
    seed: int = 0
    market: MarketParams = Field(default_factory=MarketParams)
    pools: List[DarkPoolSpec] = Field(default_factory=list)
    mfg: MFGConfig = Field(default_factory=MFGConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sim: SimConfig = Field(default_factory=SimConfig)

    @model_validator(mode="before")
    @classmethod
    def _inherit_pool_constants(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        market = data.get("market") or {}
        if isinstance(market, MarketParams):
            market = market.model_dump()
        pools = []
        for pool in data.get("pools") or []:
            if isinstance(pool, dict):
                pool = dict(pool)
                pool.setdefault("k_c", market.get("k_c", 100.0))
                pool.setdefault("liquidity_param", market.get("liquidity_param", "mean"))
            pools.append(pool)
        return {**data, "pools": pools}

    @model_validator(mode="after")
    def _check_pools(self) -> ExperimentSpec:
        if not self.pools:
            raise ValueError("at least one dark pool is required")
        if self.scenario == "regulated-M2" and len(self.pools) < 2:
            raise ValueError("scenario regulated-M2 needs two dark pools")
        return self

    def scenario_pools(self) -> List[DarkPoolSpec]:
        """Pools active in the configured scenario."""
        if self.scenario == "regulated-M1":
            return self.pools[:1]
        if self.scenario == "regulated-M2":
            return self.pools[:2]
        return list(self.pools)


@dataclass(kw_only=True)
class Configuration:
    """Runtime options of the experiment pipeline."""

    histogram_bins: int = 64
    n_trajectories: int = 100  # paths whose full trajectories are exported
    checkpoint_path: Optional[str] = None
    log_every: int = 1000  # training epochs between progress lines
    write_density_snapshots: bool = True
    strategy_points: int = 1001
    extra_tags: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_runnable_config(
        cls, config: Optional[RunnableConfig] = None
    ) -> Configuration:
        """Create a Configuration instance from a RunnableConfig object."""
        configurable = (config.get("configurable") or {}) if config else {}
        _fields = {f.name for f in fields(cls) if f.init}
        return cls(**{k: v for k, v in configurable.items() if k in _fields})


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def load_preset(name: str) -> Dict[str, Any]:
    """Load a named preset as a raw mapping.

    Args:
        name: Preset name, one of ``PRESETS``.

    Returns:
        The preset contents keyed by section (market, pools, train, mfg, sim).
    """
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; expected one of {PRESETS}")
    text = resources.files("darkpool").joinpath("presets", f"{name}.yaml").read_text()
    return yaml.safe_load(text) or {}


def build_spec(
    preset: str = "table1",
    overrides: Optional[Dict[str, Any]] = None,
    *,
    scenario: Optional[str] = None,
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
) -> ExperimentSpec:
    """Resolve a preset plus overrides into a validated experiment.

    Args:
        preset: Preset name.
        overrides: Nested mapping merged over the preset sections.
        scenario: Scenario id; defaults to the preset's simulation scenario.
        seed: Root seed; every random stream of the run derives from it.
        out_dir: Output directory of the experiment.

    Returns:
        The validated ExperimentSpec.
    """
    overrides = dict(overrides or {})
    raw = deep_merge(load_preset(preset), overrides)
    sim = dict(raw.get("sim") or {})
    scenario = scenario or sim.get("scenario") or "regulated-M1"
    sim["scenario"] = scenario
    root_seed = int(seed if seed is not None else sim.get("seed", 0))
    sim["seed"] = root_seed
    train = dict(raw.get("train") or {})
    train["seed"] = root_seed
    payload: Dict[str, Any] = {
        **raw,
        "sim": sim,
        "train": train,
        "scenario": scenario,
        "preset": preset,
        "overrides": overrides,
        "seed": root_seed,
    }
    if out_dir is not None:
        payload["out_dir"] = Path(out_dir)
    try:
        return ExperimentSpec.model_validate(payload)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation_error(exc)) from exc


def load_config(path: str | Path) -> ExperimentSpec:
    """Load an experiment file.

    The file names a ``preset`` and may carry ``overrides``, ``scenario``, ``seed`` and
    ``out_dir``. Unknown top-level keys are rejected.

    Args:
        path: YAML file to read.

    Returns:
        The validated ExperimentSpec.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: malformed YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping at the top level")
    allowed = {"preset", "overrides", "scenario", "seed", "out_dir"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {unknown}; allowed {sorted(allowed)}")
    logger.info("Loaded experiment file %s (preset %s)", path, raw.get("preset", "table1"))
    return build_spec(
        raw.get("preset", "table1"),
        raw.get("overrides") or {},
        scenario=raw.get("scenario"),
        seed=raw.get("seed"),
        out_dir=Path(raw["out_dir"]) if raw.get("out_dir") else None,
    )
