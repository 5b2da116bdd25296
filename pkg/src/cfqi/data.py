"""Offline datasets: behavior policies, trajectory generation, NDJSON persistence.

A dataset is stored columnar (numpy arrays over all transitions, trajectory-
major) with record views for inspection. Censored rewards are structurally
absent: NaN in arrays, None in records, null on disk.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import EnvConfig, env_fingerprint
from .engine import EpsilonSafeBehavior, PolicyAdapter, UniformBehavior, rollout
from .env import Action, Observation
from .errors import CfqiError, CompatibilityError, ParseError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ObservedTransition:
    traj_id: int
    t: int
    w: Observation
    a: Action
    w_next: Observation
    r_obs: float | None
    delta: bool
    z: float


class OfflineDataset:
    """Columnar store of observed transitions, grouped by trajectory.

    Each trajectory contributes exactly horizon-1 transitions with strictly
    increasing t. Column `r_obs` is NaN exactly where delta is False.
    """

    COLUMNS = ("traj", "t", "ir", "se", "y", "z_prev", "delta_prev",
               "p", "o", "p_idx", "o_idx", "z", "delta", "r_obs",
               "ir_next", "se_next", "y_next")

    def __init__(self, cols: dict, n_traj: int, horizon: int, meta: dict):
        self.cols = cols
        self.n_traj = n_traj
        self.horizon = horizon
        self.meta = meta
        self._validate()

    def _validate(self) -> None:
        n = len(self.cols["traj"])
        for name in self.COLUMNS:
            if name not in self.cols:
                raise CfqiError(f"dataset missing column {name}")
            if len(self.cols[name]) != n:
                raise CfqiError(f"dataset column {name} has inconsistent length")
        if n != self.n_traj * (self.horizon - 1):
            raise CfqiError("dataset size does not match n_traj * (horizon - 1)")
        delta = self.cols["delta"]
        r_obs = self.cols["r_obs"]
        if not np.all(np.isnan(r_obs[~delta])):
            raise CfqiError("censored transition carries an observed reward")
        if not np.all(np.isfinite(r_obs[delta])):
            raise CfqiError("uncensored transition missing its observed reward")
        # t strictly increasing within each trajectory (trajectory-major layout)
        t = self.cols["t"].reshape(self.n_traj, self.horizon - 1)
        if not np.all(np.diff(t, axis=1) > 0):
            raise CfqiError("t not strictly increasing within a trajectory")

    def __len__(self) -> int:
        return len(self.cols["traj"])

    @property
    def n_transitions(self) -> int:
        return len(self)

    def transition(self, i: int) -> ObservedTransition:
        c = self.cols
        w = Observation(x=(float(c["ir"][i]), float(c["se"][i])), y=float(c["y"][i]),
                        z_prev=float(c["z_prev"][i]), delta_prev=bool(c["delta_prev"][i]))
        # the next observation's lagged sales/indicator are this period's outcome
        w_next = Observation(x=(float(c["ir_next"][i]), float(c["se_next"][i])),
                             y=float(c["y_next"][i]), z_prev=float(c["z"][i]),
                             delta_prev=bool(c["delta"][i]))
        r = None if math.isnan(c["r_obs"][i]) else float(c["r_obs"][i])
        return ObservedTransition(traj_id=int(c["traj"][i]), t=int(c["t"][i]), w=w,
                                  a=Action(p=float(c["p"][i]), o=float(c["o"][i])),
                                  w_next=w_next, r_obs=r, delta=bool(c["delta"][i]),
                                  z=float(c["z"][i]))

    def iter_transitions(self):
        for i in range(len(self)):
            yield self.transition(i)

    def delta_matrix(self) -> np.ndarray:
        """Censoring indicators shaped (n_traj, horizon-1)."""
        return self.cols["delta"].reshape(self.n_traj, self.horizon - 1)

    def subset_trajectories(self, n: int) -> "OfflineDataset":
        """First n trajectories (iid, so a prefix is itself a valid dataset)."""
        assert 1 <= n <= self.n_traj
        rows = n * (self.horizon - 1)
        cols = {k: v[:rows].copy() for k, v in self.cols.items()}
        meta = dict(self.meta, n_traj=n)
        return OfflineDataset(cols, n, self.horizon, meta)

    def equals(self, other: "OfflineDataset") -> bool:
        if (self.n_traj, self.horizon) != (other.n_traj, other.horizon):
            return False
        for name in self.COLUMNS:
            a, b = self.cols[name], other.cols[name]
            if a.dtype.kind == "f":
                if not np.array_equal(a, b, equal_nan=True):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True


# ---------------------------------------------------------------------------
# Behavior policies


def make_behavior(env: EnvConfig, kind: str, epsilon: float = 0.15,
                  oracle_artifact=None) -> PolicyAdapter:
    if kind == "uniform":
        return UniformBehavior()
    if kind == "epsilon_safe":
        return EpsilonSafeBehavior(epsilon)
    if kind == "optimal":
        if oracle_artifact is None:
            raise CfqiError("behavior 'optimal' needs a censored-DP policy artifact")
        return plugin_optimal_policy(env, oracle_artifact)
    raise CfqiError(f"unknown behavior kind: {kind}")


def plugin_optimal_policy(env: EnvConfig, artifact) -> PolicyAdapter:
    """Wrap a solved censoring-aware policy artifact as a behavior policy.

    The artifact must expose env_fingerprint and as_adapter(); a mismatched
    environment (different grids) is refused.
    """
    fp = env_fingerprint(env)
    if getattr(artifact, "env_fingerprint", None) != fp:
        raise CompatibilityError(
            "policy artifact was solved for a different environment "
            f"(artifact {getattr(artifact, 'env_fingerprint', None)!r}, config {fp!r})")
    return artifact.as_adapter()


# ---------------------------------------------------------------------------
# Generation


def generate_dataset(env: EnvConfig, policy: PolicyAdapter, n_traj: int, horizon: int,
                     seed: int) -> OfflineDataset:
    """Roll N iid trajectories under the behavior policy.

    The generator's censoring-run cap is active here (and only here): when a
    run would exceed env.censor_run_cap, the demand draw is replaced by one
    conditioned below current inventory.
    """
    assert n_traj >= 1 and horizon >= 2
    res = rollout(env, policy, n_traj, horizon, seed, apply_run_cap=True, record="dataset")
    d = res.data
    t_steps = horizon - 1
    # (T-1, N) step-major -> trajectory-major flat columns
    cols = {}
    for name in ("ir", "se", "y", "z_prev", "p", "o", "z", "r_obs", "ir_next", "se_next", "y_next"):
        cols[name] = np.ascontiguousarray(d[name].T).reshape(-1)
    for name in ("delta_prev", "delta"):
        cols[name] = np.ascontiguousarray(d[name].T).reshape(-1)
    for name in ("p_idx", "o_idx"):
        cols[name] = np.ascontiguousarray(d[name].T).reshape(-1)
    cols["traj"] = np.repeat(np.arange(n_traj, dtype=np.int64), t_steps)
    cols["t"] = np.tile(np.arange(t_steps, dtype=np.int64), n_traj)
    meta = {"config_fingerprint": env_fingerprint(env), "n_traj": n_traj,
            "horizon": horizon, "seed": int(seed), "forced_draws": res.forced_draws}
    return OfflineDataset(cols, n_traj, horizon, meta)


# ---------------------------------------------------------------------------
# NDJSON persistence


def save_dataset(ds: OfflineDataset, path: str) -> None:
    c = ds.cols
    with open(path, "w", encoding="utf-8") as fh:
        header = {"kind": "header", "version": FORMAT_VERSION,
                  "config_fingerprint": ds.meta.get("config_fingerprint"),
                  "n_traj": ds.n_traj, "horizon": ds.horizon,
                  "seed": ds.meta.get("seed")}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(ds)):
            r = None if math.isnan(c["r_obs"][i]) else round(float(c["r_obs"][i]), 12)
            rec = {"traj": int(c["traj"][i]), "t": int(c["t"][i]),
                   "x": [float(c["ir"][i]), float(c["se"][i])],
                   "y": float(c["y"][i]), "z_prev": float(c["z_prev"][i]),
                   "delta_prev": int(c["delta_prev"][i]),
                   "p": float(c["p"][i]), "o": float(c["o"][i]),
                   "z": float(c["z"][i]), "delta": int(c["delta"][i]),
                   "r_obs": r,
                   "x_next": [float(c["ir_next"][i]), float(c["se_next"][i])],
                   "y_next": float(c["y_next"][i])}
            if "r_star" in c:
                rec["r_star"] = round(float(c["r_star"][i]), 12)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


_REQUIRED_FIELDS = ("traj", "t", "x", "y", "z_prev", "delta_prev", "p", "o",
                    "z", "delta", "r_obs", "x_next", "y_next")


def load_dataset(path: str, env: EnvConfig | None = None) -> OfflineDataset:
    """Parse an NDJSON dataset. Malformed lines raise ParseError with the line number."""
    records = []
    header = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
            if line_no == 1:
                if not isinstance(rec, dict) or rec.get("kind") != "header":
                    raise ParseError(1, "missing header record")
                header = rec
                continue
            for fld in _REQUIRED_FIELDS:
                if fld not in rec:
                    raise ParseError(line_no, f"missing field {fld}")
            if bool(rec["delta"]) != (rec["r_obs"] is not None):
                raise ParseError(line_no, "r_obs must be present exactly when delta is 1")
            records.append(rec)
    if header is None:
        raise ParseError(1, "empty file")
    n_traj, horizon = int(header["n_traj"]), int(header["horizon"])
    if len(records) != n_traj * (horizon - 1):
        raise ParseError(len(records) + 1,
                         f"expected {n_traj * (horizon - 1)} transitions, found {len(records)}")
    n = len(records)
    cols = {
        "traj": np.array([r["traj"] for r in records], dtype=np.int64),
        "t": np.array([r["t"] for r in records], dtype=np.int64),
        "ir": np.array([r["x"][0] for r in records]),
        "se": np.array([r["x"][1] for r in records]),
        "y": np.array([r["y"] for r in records]),
        "z_prev": np.array([r["z_prev"] for r in records]),
        "delta_prev": np.array([bool(r["delta_prev"]) for r in records]),
        "p": np.array([r["p"] for r in records]),
        "o": np.array([r["o"] for r in records]),
        "z": np.array([r["z"] for r in records]),
        "delta": np.array([bool(r["delta"]) for r in records]),
        "r_obs": np.array([np.nan if r["r_obs"] is None else r["r_obs"] for r in records]),
        "ir_next": np.array([r["x_next"][0] for r in records]),
        "se_next": np.array([r["x_next"][1] for r in records]),
        "y_next": np.array([r["y_next"] for r in records]),
    }
    has_r_star = ["r_star" in r for r in records]
    if any(has_r_star):
        if not all(has_r_star):
            raise ParseError(has_r_star.index(False) + 2, "r_star present on some lines but not all")
        cols["r_star"] = np.array([r["r_star"] for r in records], dtype=float)
    if env is not None:
        prices = np.asarray(env.prices)
        orders = np.asarray(env.order_grid)
        p_idx = np.searchsorted(prices, cols["p"])
        o_idx = np.searchsorted(orders, cols["o"])
        p_ok = (p_idx < len(prices)) & np.isclose(prices[np.minimum(p_idx, len(prices) - 1)], cols["p"])
        o_ok = (o_idx < len(orders)) & np.isclose(orders[np.minimum(o_idx, len(orders) - 1)], cols["o"])
        if not (np.all(p_ok) and np.all(o_ok)):
            bad = int(np.argmin(p_ok & o_ok))
            raise ParseError(bad + 2, "action not on the configured grids")
        cols["p_idx"], cols["o_idx"] = p_idx.astype(np.int64), o_idx.astype(np.int64)
    else:
        # indices relative to the values present in the file
        uniq_p = np.unique(cols["p"])
        uniq_o = np.unique(cols["o"])
        cols["p_idx"] = np.searchsorted(uniq_p, cols["p"]).astype(np.int64)
        cols["o_idx"] = np.searchsorted(uniq_o, cols["o"]).astype(np.int64)
    meta = {"config_fingerprint": header.get("config_fingerprint"),
            "n_traj": n_traj, "horizon": horizon, "seed": header.get("seed")}
    return OfflineDataset(cols, n_traj, horizon, meta)
