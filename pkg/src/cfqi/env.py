"""Underlying decision process and its censored observation.

The underlying state is (x, y, d_prev): exogenous features, on-hand
inventory, and lagged demand. An action is a (price, order) pair from finite
grids. Demand follows a clamped linear AR(1) model; sales are censored at
inventory, and the observed process replaces lagged demand with lagged sales
plus the censoring indicator.

Scalar ops mirror the batch engine (batch of one), so both paths draw from
the random stream in the same fixed order: demand shock, forced-draw uniform,
interest-rate shock, economy-switch uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .config import CostParams, DemandParams, EnvConfig


@dataclass(frozen=True)
class UnderlyingState:
    x: tuple[float, float]  # (interest rate, economy state)
    y: float
    d_prev: float


@dataclass(frozen=True)
class Action:
    p: float
    o: float


@dataclass(frozen=True)
class Observation:
    x: tuple[float, float]
    y: float
    z_prev: float
    delta_prev: bool


@dataclass(frozen=True)
class StepResult:
    next: UnderlyingState
    r: float
    z: float
    delta: bool
    d: float  # realized demand (simulator-internal; never enters offline data)


# ---------------------------------------------------------------------------
# Action grid


def action_values(env: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-action (price, order) value arrays, enumerated price-major ascending.

    The enumeration order realizes the lexicographic tie-break: numpy's
    first-argmax over this ordering picks the lowest price, then the lowest
    order, among exact ties.
    """
    n_o = len(env.order_grid)
    p_idx, o_idx = np.divmod(np.arange(env.n_actions), n_o)
    prices = np.asarray(env.prices, dtype=float)[p_idx]
    orders = np.asarray(env.order_grid, dtype=float)[o_idx]
    return prices, orders


def action_from_index(env: EnvConfig, idx: int) -> Action:
    n_o = len(env.order_grid)
    return Action(p=env.prices[idx // n_o], o=env.order_grid[idx % n_o])


def a_max_action(env: EnvConfig) -> Action:
    return Action(p=env.prices[-1], o=env.order_grid[-1])


# ---------------------------------------------------------------------------
# Demand model


def demand_mean(params: DemandParams, ir, se, p, d_prev):
    t_ir, t_se = params.theta_x
    return params.theta0 + t_ir * np.asarray(ir) + t_se * np.asarray(se) \
        - params.beta * np.asarray(p) + params.rho * np.asarray(d_prev)


def clamp_demand(params: DemandParams, value):
    return np.clip(value, 0.0, params.d_max)


def draw_demand(params: DemandParams, x, p: float, d_prev: float, rng: np.random.Generator) -> float:
    """One clamped demand draw: clamp(theta0 + theta_x.x - beta p + rho d_prev + eps, 0, d_max)."""
    ir, se = float(x[0]), float(x[1])
    m = demand_mean(params, ir, se, p, d_prev)
    eps = params.noise_sd * rng.standard_normal()
    return float(clamp_demand(params, m + eps))


def draw_demand_below(params: DemandParams, mean, ceiling, u):
    """Demand draw conditioned on D <= ceiling, via inverse-CDF on the shock.

    Used by the generator's censoring-run cap and by the depth-capped DP
    backup. With clamping at 0, {D <= ceiling} equals {mean + eps <= ceiling}
    whenever ceiling >= 0, so truncating the Gaussian shock is exact.
    """
    mean = np.asarray(mean, dtype=float)
    ceiling = np.asarray(ceiling, dtype=float)
    u = np.asarray(u, dtype=float)
    if params.noise_sd == 0.0:
        return np.minimum(clamp_demand(params, mean), ceiling)
    a = (ceiling - mean) / params.noise_sd
    mass = ndtr(a)
    q = np.clip(u * mass, 1e-300, 1.0)
    eps = params.noise_sd * ndtri(q)
    return np.minimum(clamp_demand(params, mean + eps), ceiling)


def draw_demand_above(params: DemandParams, mean, floor, u):
    """Demand draw conditioned on D > floor (floor < d_max), upper-tail inverse CDF."""
    mean = np.asarray(mean, dtype=float)
    floor = np.asarray(floor, dtype=float)
    u = np.asarray(u, dtype=float)
    if params.noise_sd == 0.0:
        return clamp_demand(params, np.maximum(mean, np.nextafter(floor, np.inf)))
    a = (floor - mean) / params.noise_sd
    tail = ndtr(-a)
    q = np.clip((1.0 - u) * tail, 1e-300, 1.0)
    eps = params.noise_sd * (-ndtri(q))
    return clamp_demand(params, np.maximum(mean + eps, np.nextafter(floor, np.inf)))


def demand_tail_prob(params: DemandParams, mean, c):
    """P(D > c) for the clamped-normal demand with the given mean."""
    mean = np.asarray(mean, dtype=float)
    c = np.asarray(c, dtype=float)
    if params.noise_sd == 0.0:
        d = clamp_demand(params, mean)
        return (d > c).astype(float)
    p = ndtr((mean - c) / params.noise_sd)
    p = np.where(c >= params.d_max, 0.0, p)
    p = np.where(c < 0.0, 1.0, p)
    return p


# ---------------------------------------------------------------------------
# Reward and transition


def reward(costs: CostParams, p: float, o: float, y: float, d: float) -> float:
    """p*min(y,d) - c1*(d-y)+ - c2*o - c3*(y-d)+"""
    return float(reward_batch(costs, np.asarray(p), np.asarray(o), np.asarray(y), np.asarray(d)))


def reward_batch(costs: CostParams, p, o, y, d):
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    sales = np.minimum(y, d)
    unmet = np.maximum(d - y, 0.0)
    left = np.maximum(y - d, 0.0)
    return np.asarray(p) * sales - costs.stockout * unmet - costs.ordering * np.asarray(o) - costs.holding * left


def step_batch(env: EnvConfig, ir, se, y, d_prev, price, order, rng: np.random.Generator,
               force_uncensored=None) -> dict:
    """Advance a batch of underlying states one period.

    Draw order is fixed (demand shock, forced-draw uniform, ir shock, switch
    uniform) and independent of the mask, so trajectories are bit-reproducible
    regardless of where the run cap binds.
    """
    dp, fp = env.demand, env.features
    ir = np.asarray(ir, dtype=float)
    se = np.asarray(se, dtype=float)
    y = np.asarray(y, dtype=float)
    d_prev = np.asarray(d_prev, dtype=float)
    n = ir.shape[0]

    eps = rng.standard_normal(n)
    u_force = rng.random(n)
    ir_eps = rng.standard_normal(n)
    u_se = rng.random(n)

    m = demand_mean(dp, ir, se, price, d_prev)
    d = clamp_demand(dp, m + dp.noise_sd * eps)
    if force_uncensored is not None and np.any(force_uncensored):
        d_forced = draw_demand_below(dp, m, y, u_force)
        d = np.where(force_uncensored, d_forced, d)

    z = np.minimum(y, d)
    delta = y >= d
    r = reward_batch(env.costs, price, order, y, d)
    y_next = np.clip(y + order - d, 0.0, env.y_cap)

    ir_next = np.clip(fp.ir_mean + fp.ir_ar_coeff * (ir - fp.ir_mean) + fp.ir_noise_sd * ir_eps,
                      fp.ir_clamp[0], fp.ir_clamp[1])
    se_next = np.where(u_se < fp.econ_switch_prob, 1.0 - se, se)

    return {"d": d, "z": z, "delta": delta, "r": r,
            "y_next": y_next, "ir_next": ir_next, "se_next": se_next}


def step(env: EnvConfig, state: UnderlyingState, action: Action, rng: np.random.Generator,
         force_uncensored: bool = False) -> StepResult:
    """Scalar transition; defers to the batch path so both share one draw order."""
    out = step_batch(env,
                     np.array([state.x[0]]), np.array([state.x[1]]),
                     np.array([state.y]), np.array([state.d_prev]),
                     np.array([action.p]), np.array([action.o]), rng,
                     force_uncensored=np.array([force_uncensored]))
    nxt = UnderlyingState(x=(float(out["ir_next"][0]), float(out["se_next"][0])),
                          y=float(out["y_next"][0]), d_prev=float(out["d"][0]))
    return StepResult(next=nxt, r=float(out["r"][0]), z=float(out["z"][0]),
                      delta=bool(out["delta"][0]), d=float(out["d"][0]))


def observe(state: UnderlyingState, z_prev: float, delta_prev: bool) -> Observation:
    """Project onto observed coordinates; lagged demand survives only when uncensored."""
    return Observation(x=state.x, y=state.y, z_prev=float(z_prev), delta_prev=bool(delta_prev))


def init_batch(env: EnvConfig, n: int, rng: np.random.Generator) -> dict:
    """Initial states: ir near its stationary law, economy Bernoulli, integer-uniform y and lagged demand.

    The lagged demand at t=0 counts as observed (the process starts uncensored
    by convention), so z_prev = d_prev and delta_prev = 1.
    """
    fp, init = env.features, env.init
    z_ir = rng.standard_normal(n)
    u_se = rng.random(n)
    y0 = rng.integers(init.y0[0], init.y0[1] + 1, size=n).astype(float)
    d0 = rng.integers(init.d_prev0[0], init.d_prev0[1] + 1, size=n).astype(float)
    sd_stat = fp.ir_noise_sd / np.sqrt(max(1e-12, 1.0 - fp.ir_ar_coeff ** 2)) if fp.ir_noise_sd > 0 else 0.0
    ir0 = np.clip(fp.ir_mean + sd_stat * z_ir, fp.ir_clamp[0], fp.ir_clamp[1])
    se0 = (u_se < init.econ_p_expand).astype(float)
    return {"ir": ir0, "se": se0, "y": y0, "d_prev": d0}


def safe_action_margin(env: EnvConfig) -> float:
    """Worst-case clamped demand at max price minus y_cap.

    <= 0 means even the worst demand at the maximum price fits within the
    inventory cap (the safe action can keep the process uncensored when stock
    is full); the CLI warns when the margin is positive.
    """
    dp, fp = env.demand, env.features
    t_ir, t_se = dp.theta_x
    worst_x = t_ir * (fp.ir_clamp[1] if t_ir >= 0 else fp.ir_clamp[0]) + max(t_se, 0.0)
    worst = dp.theta0 + worst_x - dp.beta * max(env.prices) + max(dp.rho, 0.0) * dp.d_max \
        + 3.0 * dp.noise_sd
    worst = float(np.clip(worst, 0.0, dp.d_max))
    return worst - env.y_cap
