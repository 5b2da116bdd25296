"""Vectorized trajectory engine shared by dataset generation and evaluation.

Episodes advance in lockstep across a batch; policies are adapters that map a
batch view of the current observed (or underlying) state to action indices.
All randomness flows through one generator with a fixed draw order per step
(policy draws first, then environment draws), so rollouts are bit-reproducible
given (config, seed, policy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import EnvConfig
from .env import action_values, init_batch, step_batch


class LagBuffers:
    """Ring of the last `max_lag` (observation, action) pairs per episode.

    Slot j-1 holds time t-j. Only the coordinates needed to rebuild history
    blocks are kept.
    """

    def __init__(self, max_lag: int, n: int):
        self.max_lag = max_lag
        shape = (max_lag, n)
        self.ir = np.zeros(shape)
        self.se = np.zeros(shape)
        self.y = np.zeros(shape)
        self.z_prev = np.zeros(shape)
        self.delta_prev = np.zeros(shape, dtype=bool)
        self.p_idx = np.zeros(shape, dtype=np.int64)
        self.o_idx = np.zeros(shape, dtype=np.int64)

    def push(self, ir, se, y, z_prev, delta_prev, p_idx, o_idx) -> None:
        for buf, val in ((self.ir, ir), (self.se, se), (self.y, y), (self.z_prev, z_prev),
                         (self.delta_prev, delta_prev), (self.p_idx, p_idx), (self.o_idx, o_idx)):
            if self.max_lag > 1:
                buf[1:] = buf[:-1]
            buf[0] = val


@dataclass
class BatchView:
    """What a policy may look at when deciding. Underlying-state policies may
    read d_prev_true; observed-process policies must not."""

    env: EnvConfig
    rng: np.random.Generator
    ir: np.ndarray
    se: np.ndarray
    y: np.ndarray
    z_prev: np.ndarray
    delta_prev: np.ndarray
    d_prev_true: np.ndarray
    depth: np.ndarray  # consecutive censored periods immediately preceding now
    lags: LagBuffers | None


class PolicyAdapter:
    """Base adapter. Subclasses override decide(); max_lag declares how much
    history the engine must buffer."""

    max_lag: int = 0
    deterministic: bool = True

    def decide(self, view: BatchView) -> tuple[np.ndarray, np.ndarray]:
        """Return (action indices, out-of-support flags) for the batch."""
        raise NotImplementedError


class UniformBehavior(PolicyAdapter):
    deterministic = False

    def decide(self, view: BatchView):
        n = view.ir.shape[0]
        a = view.rng.integers(0, view.env.n_actions, size=n)
        return a, np.zeros(n, dtype=bool)


class EpsilonSafeBehavior(PolicyAdapter):
    """With probability epsilon play a_max, else uniform — keeps every
    censoring depth up to the generator cap represented in the data."""

    deterministic = False

    def __init__(self, epsilon: float):
        assert 0.0 <= epsilon <= 1.0
        self.epsilon = epsilon

    def decide(self, view: BatchView):
        n = view.ir.shape[0]
        u = view.rng.random(n)
        a_uni = view.rng.integers(0, view.env.n_actions, size=n)
        a = np.where(u < self.epsilon, view.env.a_max_index, a_uni)
        return a, np.zeros(n, dtype=bool)


class FixedActionPolicy(PolicyAdapter):
    def __init__(self, action_index: int):
        self.action_index = action_index

    def decide(self, view: BatchView):
        n = view.ir.shape[0]
        return np.full(n, self.action_index, dtype=np.int64), np.zeros(n, dtype=bool)


@dataclass
class RolloutResult:
    # dataset-mode arrays, shape (T-1, n); None in returns-only mode
    data: dict | None
    # per-episode discounted true return, shape (n,); None in dataset mode
    returns: np.ndarray | None
    forced_draws: int
    oos_events: int
    amax_boundary: int


def rollout(env: EnvConfig, policy: PolicyAdapter, n_episodes: int, horizon: int,
            seed: int, *, apply_run_cap: bool, record: str = "dataset",
            gamma: float | None = None) -> RolloutResult:
    """Roll `n_episodes` lockstep episodes of `horizon` periods (horizon-1 transitions).

    record="dataset" captures observed transitions (censored rewards missing);
    record="returns" accumulates discounted true rewards (needs gamma).
    """
    assert record in ("dataset", "returns")
    if record == "returns":
        assert gamma is not None
    rng = np.random.default_rng(seed)
    n = n_episodes
    prices_tab, orders_tab = action_values(env)
    if hasattr(policy, "reset_counters"):
        policy.reset_counters()

    init = init_batch(env, n, rng)
    ir, se, y = init["ir"], init["se"], init["y"]
    d_prev = init["d_prev"]
    z_prev = d_prev.copy()          # observed at t=0 by the start-uncensored convention
    delta_prev = np.ones(n, dtype=bool)
    depth = np.zeros(n, dtype=np.int64)

    lags = LagBuffers(policy.max_lag, n) if policy.max_lag > 0 else None
    cap = env.censor_run_cap if apply_run_cap else None

    t_steps = horizon - 1
    if record == "dataset":
        cols = {name: np.zeros((t_steps, n)) for name in
                ("ir", "se", "y", "z_prev", "p", "o", "z", "r_obs", "ir_next", "se_next", "y_next")}
        cols["delta_prev"] = np.zeros((t_steps, n), dtype=bool)
        cols["delta"] = np.zeros((t_steps, n), dtype=bool)
        cols["p_idx"] = np.zeros((t_steps, n), dtype=np.int64)
        cols["o_idx"] = np.zeros((t_steps, n), dtype=np.int64)
    returns = np.zeros(n) if record == "returns" else None

    forced_total = 0
    oos_total = 0

    for t in range(t_steps):
        view = BatchView(env=env, rng=rng, ir=ir, se=se, y=y, z_prev=z_prev,
                         delta_prev=delta_prev, d_prev_true=d_prev, depth=depth, lags=lags)
        a_idx, oos = policy.decide(view)
        oos_total += int(oos.sum())
        price = prices_tab[a_idx]
        order = orders_tab[a_idx]

        force = None
        if cap is not None:
            force = depth >= cap
            forced_total += int(force.sum())
        out = step_batch(env, ir, se, y, d_prev, price, order, rng, force_uncensored=force)

        if record == "dataset":
            cols["ir"][t], cols["se"][t], cols["y"][t] = ir, se, y
            cols["z_prev"][t], cols["delta_prev"][t] = z_prev, delta_prev
            cols["p"][t], cols["o"][t] = price, order
            cols["p_idx"][t], cols["o_idx"][t] = a_idx // len(env.order_grid), a_idx % len(env.order_grid)
            cols["z"][t], cols["delta"][t] = out["z"], out["delta"]
            cols["r_obs"][t] = np.where(out["delta"], out["r"], np.nan)
            cols["ir_next"][t], cols["se_next"][t], cols["y_next"][t] = \
                out["ir_next"], out["se_next"], out["y_next"]
        else:
            returns += (gamma ** t) * out["r"]

        if lags is not None:
            lags.push(ir, se, y, z_prev, delta_prev, a_idx // len(env.order_grid),
                      a_idx % len(env.order_grid))
        ir, se, y = out["ir_next"], out["se_next"], out["y_next"]
        d_prev = out["d"]
        z_prev, delta_prev = out["z"], out["delta"]
        depth = np.where(out["delta"], 0, depth + 1)

    boundary_total = int(getattr(policy, "boundary_events", 0))
    return RolloutResult(data=cols if record == "dataset" else None,
                         returns=returns,
                         forced_draws=forced_total, oos_events=oos_total,
                         amax_boundary=boundary_total)
