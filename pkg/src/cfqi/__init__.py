"""Offline policy learning for joint pricing and inventory control when
demand is censored by inventory and temporally dependent.

The package simulates the underlying and observed decision processes, imputes
censored rewards through conditional survival estimation, learns policies by
censored fitted Q-iteration (optionally with pessimistic value penalties), and
evaluates them against dynamic-programming reference policies.
"""

from .config import (AlgoConfig, CostParams, DataConfig, DemandParams, DpConfig,
                     EnvConfig, EvalConfig, ExperimentConfig, FeatureProcess,
                     InitParams, KrrConfig, SurvivalConfig, config_fingerprint,
                     config_from_dict, config_to_dict, env_fingerprint,
                     load_config, save_config, stable_seed)
from .errors import (CfqiError, CompatibilityError, ConfigError, ConsistencyError,
                     CoverageError, DegenerateTailError, ParseError)
from .env import safe_action_margin
from .data import (OfflineDataset, generate_dataset, load_dataset, make_behavior,
                   plugin_optimal_policy, save_dataset)
from .censoring import (DepthPartition, estimate_n_hat, partition,
                        run_length_profile)
from .survival import (AugmentedDataset, KmCurve, SurvivalModel, as_augmented,
                       conditional_mean_censored, fit_survival, impute, km_fit,
                       r_max_bound)
from .fqi import (PolicyArtifact, act, default_window_k, load_policy, run_fqi,
                  save_policy)
from .dp import (DpArtifact, EvalReport, ValueTable, evaluate_policy,
                 regret_table, solve_censored_dp, solve_oracle_dp)

__version__ = "0.1.0"

__all__ = [
    "AlgoConfig", "AugmentedDataset", "CfqiError", "CompatibilityError",
    "ConfigError", "ConsistencyError", "CostParams", "CoverageError",
    "DataConfig", "DegenerateTailError", "DemandParams", "DepthPartition",
    "DpArtifact", "DpConfig", "EnvConfig", "EvalConfig", "EvalReport",
    "ExperimentConfig", "FeatureProcess", "InitParams", "KmCurve", "KrrConfig",
    "OfflineDataset", "ParseError", "PolicyArtifact", "SurvivalConfig",
    "SurvivalModel", "ValueTable", "act", "as_augmented", "conditional_mean_censored",
    "config_fingerprint", "config_from_dict", "config_to_dict", "default_window_k",
    "env_fingerprint", "estimate_n_hat", "evaluate_policy", "fit_survival",
    "generate_dataset", "impute", "km_fit", "load_config", "load_dataset",
    "load_policy", "make_behavior", "partition", "plugin_optimal_policy",
    "r_max_bound", "regret_table", "run_fqi", "run_length_profile",
    "safe_action_margin", "save_config", "save_dataset", "save_policy",
    "solve_censored_dp", "solve_oracle_dp", "stable_seed", "__version__",
]
