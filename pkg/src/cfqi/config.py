"""Experiment configuration: typed blocks, JSON I/O, validation, fingerprinting.

The default configuration reproduces the benchmark retail setting: three
price points, integer order quantities 0..15, inventory capped at 25,
stockout/ordering/holding costs (2, 3, 1), and demand that is linear in the
exogenous features and lagged demand with Gaussian noise, clamped to
[0, d_max]. Exogenous-feature dynamics and the demand coefficients are not
pinned by the source experiments; the defaults here are calibrated so that
censoring runs actually reach the generator's cap under uniform behavior.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

DEFAULT_PRICES = (4.0, 4.25, 4.5)
DEFAULT_ORDER_GRID = tuple(float(o) for o in range(16))


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(path, msg)


@dataclass(frozen=True)
class DemandParams:
    """Coefficients of the clamped linear-AR demand model."""

    theta0: float = 12.0
    theta_x: tuple[float, ...] = (-0.5, 2.0)  # (interest rate, economy state)
    beta: float = 1.5
    rho: float = 0.5
    noise_sd: float = 1.0
    d_max: float = 25.0

    def validate(self, path: str = "env.demand") -> None:
        _require(len(self.theta_x) == 2, f"{path}.theta_x", "expected 2 coefficients (interest rate, economy state)")
        _require(self.beta > 0, f"{path}.beta", "price sensitivity must be positive")
        _require(abs(self.rho) < 1, f"{path}.rho", "|rho| must be < 1")
        _require(self.noise_sd >= 0, f"{path}.noise_sd", "must be >= 0")
        _require(self.d_max > 0, f"{path}.d_max", "must be > 0")


@dataclass(frozen=True)
class CostParams:
    """Per-unit stockout, ordering, and holding costs."""

    stockout: float = 2.0
    ordering: float = 3.0
    holding: float = 1.0

    def validate(self, path: str = "env.costs") -> None:
        for name in ("stockout", "ordering", "holding"):
            _require(getattr(self, name) >= 0, f"{path}.{name}", "must be >= 0")


@dataclass(frozen=True)
class FeatureProcess:
    """Exogenous features: AR(1) interest rate (clamped) and a 2-state economy chain."""

    ir_mean: float = 3.0
    ir_ar_coeff: float = 0.8
    ir_noise_sd: float = 0.3
    ir_clamp: tuple[float, float] = (1.0, 5.0)
    econ_switch_prob: float = 0.1

    def validate(self, path: str = "env.features") -> None:
        _require(0 <= self.ir_ar_coeff < 1, f"{path}.ir_ar_coeff", "must be in [0, 1)")
        _require(self.ir_noise_sd >= 0, f"{path}.ir_noise_sd", "must be >= 0")
        _require(self.ir_clamp[0] <= self.ir_clamp[1], f"{path}.ir_clamp", "lower bound exceeds upper bound")
        _require(0 <= self.econ_switch_prob <= 1, f"{path}.econ_switch_prob", "must be in [0, 1]")


@dataclass(frozen=True)
class InitParams:
    """Initial-state distribution: uniform integer ranges plus feature start."""

    y0: tuple[int, int] = (0, 25)
    d_prev0: tuple[int, int] = (0, 25)
    econ_p_expand: float = 0.5

    def validate(self, path: str = "env.init") -> None:
        _require(0 <= self.y0[0] <= self.y0[1], f"{path}.y0", "need 0 <= lo <= hi")
        _require(0 <= self.d_prev0[0] <= self.d_prev0[1], f"{path}.d_prev0", "need 0 <= lo <= hi")
        _require(0 <= self.econ_p_expand <= 1, f"{path}.econ_p_expand", "must be in [0, 1]")


@dataclass(frozen=True)
class EnvConfig:
    prices: tuple[float, ...] = DEFAULT_PRICES
    order_grid: tuple[float, ...] = DEFAULT_ORDER_GRID
    y_cap: float = 25.0
    demand: DemandParams = field(default_factory=DemandParams)
    costs: CostParams = field(default_factory=CostParams)
    features: FeatureProcess = field(default_factory=FeatureProcess)
    init: InitParams = field(default_factory=InitParams)
    censor_run_cap: int | None = 3  # generator resamples demand below inventory past this run length

    @property
    def n_actions(self) -> int:
        return len(self.prices) * len(self.order_grid)

    @property
    def a_max_index(self) -> int:
        # grids are validated ascending, so the safe action is the last one
        return self.n_actions - 1

    def validate(self, path: str = "env") -> None:
        _require(len(self.prices) >= 1, f"{path}.prices", "need at least one price")
        _require(all(p > 0 for p in self.prices), f"{path}.prices", "prices must be positive")
        _require(list(self.prices) == sorted(self.prices), f"{path}.prices", "must be ascending")
        _require(len(set(self.prices)) == len(self.prices), f"{path}.prices", "must be distinct")
        _require(len(self.order_grid) >= 1, f"{path}.order_grid", "need at least one order quantity")
        _require(all(o >= 0 for o in self.order_grid), f"{path}.order_grid", "orders must be >= 0")
        _require(list(self.order_grid) == sorted(self.order_grid), f"{path}.order_grid", "must be ascending")
        _require(len(set(self.order_grid)) == len(self.order_grid), f"{path}.order_grid", "must be distinct")
        _require(self.y_cap > 0, f"{path}.y_cap", "must be > 0")
        self.demand.validate(f"{path}.demand")
        self.costs.validate(f"{path}.costs")
        self.features.validate(f"{path}.features")
        self.init.validate(f"{path}.init")
        _require(self.init.y0[1] <= self.y_cap, f"{path}.init.y0", "initial inventory exceeds y_cap")
        _require(self.init.d_prev0[1] <= self.demand.d_max, f"{path}.init.d_prev0", "initial lagged demand exceeds d_max")
        if self.censor_run_cap is not None:
            _require(self.censor_run_cap >= 0, f"{path}.censor_run_cap", "must be >= 0 or null")


@dataclass(frozen=True)
class DataConfig:
    behavior: str = "uniform"  # uniform | epsilon_safe | optimal
    epsilon_safe: float = 0.15
    episodes: tuple[int, ...] = (5, 10, 15, 20, 25, 30, 35, 40, 45, 50)
    horizon: int = 50
    replicates: int = 10
    base_seed: int = 20240501

    def validate(self, path: str = "data") -> None:
        _require(self.behavior in ("uniform", "epsilon_safe", "optimal"), f"{path}.behavior",
                 "must be one of uniform, epsilon_safe, optimal")
        _require(0 <= self.epsilon_safe <= 1, f"{path}.epsilon_safe", "must be in [0, 1]")
        _require(len(self.episodes) >= 1, f"{path}.episodes", "need at least one episode level")
        _require(all(e >= 1 for e in self.episodes), f"{path}.episodes", "episode counts must be >= 1")
        _require(list(self.episodes) == sorted(self.episodes), f"{path}.episodes", "must be ascending")
        _require(self.horizon >= 2, f"{path}.horizon", "horizon must be >= 2 (at least one transition)")
        _require(self.replicates >= 1, f"{path}.replicates", "must be >= 1")


@dataclass(frozen=True)
class KrrConfig:
    # default grid is rbf-only: bounded kernels keep iterated backups stable,
    # a linear kernel extrapolates without bound off the data support
    kernels: tuple[str, ...] = ("rbf",)
    bandwidths: tuple[float, ...] = (1.0, 2.0, 4.0)
    poly_degrees: tuple[int, ...] = (2,)
    # moderate-to-strong regularization only: tiny lambdas win in-sample CV on
    # narrow data but blow up the dual coefficients, and the value surface far
    # from support then wiggles instead of reverting to the zero prior
    lambdas: tuple[float, ...] = (0.1, 1.0)
    cv_folds: int = 5
    max_support: int = 1500
    # posterior-variance support cap; a subset only widens the width
    # (less conditioning data), so the bound stays valid and gets cheap
    uq_support: int = 256

    def validate(self, path: str = "algo.krr") -> None:
        _require(all(k in ("rbf", "linear", "polynomial") for k in self.kernels), f"{path}.kernels",
                 "must be among rbf, linear, polynomial")
        _require(all(b > 0 for b in self.bandwidths), f"{path}.bandwidths", "must be positive")
        _require(all(d >= 1 for d in self.poly_degrees), f"{path}.poly_degrees", "must be >= 1")
        _require(all(l > 0 for l in self.lambdas), f"{path}.lambdas", "must be positive")
        _require(self.cv_folds >= 2, f"{path}.cv_folds", "must be >= 2")
        _require(self.max_support >= 10, f"{path}.max_support", "must be >= 10")
        _require(self.uq_support >= 10, f"{path}.uq_support", "must be >= 10")


@dataclass(frozen=True)
class AlgoConfig:
    iterations: int = 10
    gamma: float = 0.95
    function_class: str = "krr"  # ridge | krr
    ridge_lambda: float = 1.0
    beta: float = 1.0  # pessimism multiplier
    # width family for the pessimism penalty: the parametric design width
    # vanishes where coverage is dense and stays order one along unseen
    # coordinates; the kernel posterior width is the slower nonparametric one
    uq_kind: str = "linear"  # linear | posterior
    fusion_switch: int = 4  # pessimistic backups for the first N iterations in fusion mode
    quadratic_order_terms: bool = False
    window_k: int | None = None  # None -> min(horizon, ceil(ln(N*T) / (2*(1-gamma))))
    krr: KrrConfig = field(default_factory=KrrConfig)

    def validate(self, path: str = "algo") -> None:
        _require(self.iterations >= 1, f"{path}.iterations", "must be >= 1")
        _require(0 <= self.gamma < 1, f"{path}.gamma", "must be in [0, 1)")
        _require(self.function_class in ("ridge", "krr"), f"{path}.function_class", "must be ridge or krr")
        _require(self.ridge_lambda > 0, f"{path}.ridge_lambda", "must be > 0")
        _require(self.beta >= 0, f"{path}.beta", "must be >= 0")
        _require(self.uq_kind in ("linear", "posterior"), f"{path}.uq_kind",
                 "must be linear or posterior")
        _require(self.fusion_switch >= 1, f"{path}.fusion_switch", "must be >= 1")
        if self.window_k is not None:
            _require(self.window_k >= 1, f"{path}.window_k", "must be >= 1 or null")
        self.krr.validate(f"{path}.krr")


@dataclass(frozen=True)
class SurvivalConfig:
    kind: str = "km_stratified"  # km_global | km_stratified | beran_kernel
    condition_on_history: bool = False
    sf_floor: float = 1e-6
    beran_bandwidth_scale: float = 1.0

    def validate(self, path: str = "survival") -> None:
        _require(self.kind in ("km_global", "km_stratified", "beran_kernel"), f"{path}.kind",
                 "must be one of km_global, km_stratified, beran_kernel")
        _require(0 < self.sf_floor < 1, f"{path}.sf_floor", "must be in (0, 1)")
        _require(self.beran_bandwidth_scale > 0, f"{path}.beran_bandwidth_scale", "must be > 0")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 500
    horizon: int = 50
    gamma: float = 0.95

    def validate(self, path: str = "eval") -> None:
        _require(self.episodes >= 2, f"{path}.episodes", "need >= 2 episodes for a CI")
        _require(self.horizon >= 1, f"{path}.horizon", "must be >= 1")
        _require(0 <= self.gamma < 1, f"{path}.gamma", "must be in [0, 1)")


@dataclass(frozen=True)
class DpConfig:
    ir_bins: int = 5
    n_cap: int = 3
    mc_samples: int = 24
    mc_samples_deep: int = 12
    collect_steps: int = 60000
    max_blocks_per_depth: int = 6000
    sweep_tol_scale: float = 1e-3  # tolerance = scale * R_max
    max_sweeps: int = 400
    seed: int = 7

    def validate(self, path: str = "dp") -> None:
        _require(self.ir_bins >= 1, f"{path}.ir_bins", "must be >= 1")
        _require(self.n_cap >= 0, f"{path}.n_cap", "must be >= 0")
        _require(self.mc_samples >= 1, f"{path}.mc_samples", "must be >= 1")
        _require(self.mc_samples_deep >= 1, f"{path}.mc_samples_deep", "must be >= 1")
        _require(self.collect_steps >= 1, f"{path}.collect_steps", "must be >= 1")
        _require(self.max_blocks_per_depth >= 1, f"{path}.max_blocks_per_depth", "must be >= 1")
        _require(self.sweep_tol_scale > 0, f"{path}.sweep_tol_scale", "must be > 0")
        _require(self.max_sweeps >= 1, f"{path}.max_sweeps", "must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    survival: SurvivalConfig = field(default_factory=SurvivalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dp: DpConfig = field(default_factory=DpConfig)

    def validate(self) -> None:
        self.env.validate("env")
        self.data.validate("data")
        self.algo.validate("algo")
        self.survival.validate("survival")
        self.eval.validate("eval")
        self.dp.validate("dp")

    def default_window_k(self, n_traj: int, horizon: int) -> int:
        """Window length for the run-length estimator: min(T, ceil(ln(N*T)/(2(1-gamma))))."""
        if self.algo.window_k is not None:
            return min(self.algo.window_k, horizon)
        nt = max(2, n_traj * horizon)
        k = math.ceil(math.log(nt) / (2.0 * (1.0 - self.algo.gamma)))
        return max(1, min(horizon, k))


# ---------------------------------------------------------------------------
# JSON round-trip


def _to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_jsonable(cfg)


_T_FIELDS = {
    # dataclass fields that should come back as tuples
    "theta_x", "ir_clamp", "prices", "order_grid", "episodes", "kernels",
    "bandwidths", "poly_degrees", "lambdas", "y0", "d_prev0",
}


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    kwargs = {}
    for name, fld in known.items():
        if name not in raw:
            continue
        val = raw[name]
        sub = f"{path}.{name}" if path else name
        ftype = fld.type if isinstance(fld.type, type) else None
        if dataclasses.is_dataclass(ftype):
            kwargs[name] = _build(ftype, val, sub)
        elif name == "krr":
            kwargs[name] = _build(KrrConfig, val, sub)
        elif name in ("demand", "costs", "features", "init"):
            mapping = {"demand": DemandParams, "costs": CostParams,
                       "features": FeatureProcess, "init": InitParams}
            kwargs[name] = _build(mapping[name], val, sub)
        elif name in _T_FIELDS:
            if not isinstance(val, (list, tuple)):
                raise ConfigError(sub, f"expected a list, got {type(val).__name__}")
            kwargs[name] = tuple(val)
        else:
            if isinstance(val, (list, dict)):
                raise ConfigError(sub, f"expected a scalar, got {type(val).__name__}")
            kwargs[name] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:  # wrong primitive type slipped through
        raise ConfigError(path or "<root>", str(exc)) from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config from a plain dict (e.g. parsed JSON).

    Raises ConfigError with the dotted path of the offending field.
    """
    blocks = {"env": EnvConfig, "data": DataConfig, "algo": AlgoConfig,
              "survival": SurvivalConfig, "eval": EvalConfig, "dp": DpConfig}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in raw:
        if key not in blocks:
            raise ConfigError(key, "unknown top-level section")
    kwargs = {name: _build(cls, raw[name], name) for name, cls in blocks.items() if name in raw}
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_fingerprint(cfg: ExperimentConfig) -> str:
    """Stable 12-hex-digit digest of the canonical JSON form."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def env_fingerprint(env: EnvConfig) -> str:
    canon = json.dumps(_to_jsonable(env), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def env_to_dict(env: EnvConfig) -> dict:
    return _to_jsonable(env)


def env_from_dict(raw: dict) -> EnvConfig:
    env = _build(EnvConfig, raw, "env")
    env.validate("env")
    return env


def stable_seed(*parts: object) -> int:
    """Deterministic 63-bit seed derived from string-able parts."""
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1
