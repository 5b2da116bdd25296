"""Reference policies and evaluation.

Two dynamic-programming solvers on a discretized state space provide the
comparison points: an oracle that observes true lagged demand, and a
censoring-aware solver over observed history blocks whose expectations
integrate out the latent demands of a censored run. Both freeze their
Monte-Carlo draws once per solve, so value iteration contracts exactly on the
induced empirical model. Policy values are then estimated by rollouts in the
true simulator, and regret is reported against the oracle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import DpConfig, EnvConfig, env_fingerprint, env_from_dict, env_to_dict, stable_seed
from .censoring import compute_depths
from .data import generate_dataset
from .engine import PolicyAdapter, UniformBehavior, rollout
from .env import (action_values, clamp_demand, demand_tail_prob, draw_demand_above,
                  draw_demand_below, reward_batch)
from .errors import CfqiError, CompatibilityError, ConsistencyError
from .survival import r_max_bound

log = logging.getLogger(__name__)

_KEY_DTYPE = np.int16
_STEP_KEY_WIDTH = 6   # (ir bin, economy, inventory, prev-sales, price idx, order idx)
_OBS_KEY_WIDTH = 4


class DiscretizedSpace:
    """Finite grids: interest-rate bins, economy state, integer inventory and
    demand levels, and the price-major action grid."""

    def __init__(self, env: EnvConfig, ir_bins: int):
        f = env.features
        if f.ir_ar_coeff < 1 and f.ir_noise_sd > 0:
            sd_stat = f.ir_noise_sd / np.sqrt(1.0 - f.ir_ar_coeff ** 2)
        else:
            sd_stat = 0.0
        lo = max(f.ir_clamp[0], f.ir_mean - 3.0 * sd_stat)
        hi = min(f.ir_clamp[1], f.ir_mean + 3.0 * sd_stat)
        if hi <= lo or ir_bins == 1:
            self.n_ir = 1
            self.ir_edges = np.array([lo, hi if hi > lo else lo + 1e-9])
            self.ir_centers = np.array([(lo + hi) / 2.0 if hi > lo else lo])
        else:
            self.n_ir = ir_bins
            self.ir_edges = np.linspace(lo, hi, ir_bins + 1)
            self.ir_centers = 0.5 * (self.ir_edges[:-1] + self.ir_edges[1:])
        self.n_se = 2
        self.n_y = int(round(env.y_cap)) + 1
        self.n_d = int(round(env.demand.d_max)) + 1
        self.n_states0 = self.n_ir * self.n_se * self.n_y * self.n_d

    def ir_bin(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.searchsorted(self.ir_edges[1:-1], v, side="right").astype(np.int64)

    def y_level(self, v) -> np.ndarray:
        return np.clip(np.rint(np.asarray(v, dtype=float)), 0, self.n_y - 1).astype(np.int64)

    def d_level(self, v) -> np.ndarray:
        return np.clip(np.rint(np.asarray(v, dtype=float)), 0, self.n_d - 1).astype(np.int64)

    def state0_index(self, irb, se, ylv, dlv) -> np.ndarray:
        return ((np.asarray(irb) * self.n_se + np.asarray(se).astype(np.int64))
                * self.n_y + np.asarray(ylv)) * self.n_d + np.asarray(dlv)

    def enumerate_coords(self):
        """Coordinate arrays of every depth-0 state, in index order."""
        idx = np.arange(self.n_states0)
        dlv = idx % self.n_d
        rest = idx // self.n_d
        ylv = rest % self.n_y
        rest //= self.n_y
        se = rest % self.n_se
        irb = rest // self.n_se
        return irb, se, ylv, dlv

    def describe(self) -> dict:
        return {"ir_bins": self.n_ir, "economy_states": self.n_se,
                "inventory_levels": self.n_y, "demand_levels": self.n_d,
                "depth0_states": self.n_states0}


class RowIndex:
    """Lexicographic row lookup over an integer key matrix."""

    def __init__(self, keys: np.ndarray):
        keys = np.ascontiguousarray(keys, dtype=_KEY_DTYPE)
        self.keys = keys
        self.width = keys.shape[1] if keys.ndim == 2 else 0
        self._struct = keys.view([("", _KEY_DTYPE)] * self.width).ravel()
        self._order = np.argsort(self._struct, kind="stable")
        self._sorted = self._struct[self._order]

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Row index per query, -1 where absent."""
        if len(self.keys) == 0 or len(queries) == 0:
            return np.full(len(queries), -1, dtype=np.int64)
        q = np.ascontiguousarray(queries, dtype=_KEY_DTYPE).view(
            [("", _KEY_DTYPE)] * self.width).ravel()
        pos = np.searchsorted(self._sorted, q)
        pos_c = np.minimum(pos, len(self._sorted) - 1)
        ok = self._sorted[pos_c] == q
        return np.where(ok, self._order[pos_c], -1).astype(np.int64)


@dataclass
class ValueTable:
    kind: str
    gamma: float
    mc_samples: int
    n_sweeps: int
    sweep_deltas: list
    converged: bool
    space_info: dict
    block_counts: list
    fallback_edges: int = 0   # frozen draws whose next deep block was unvisited


# ---------------------------------------------------------------------------
# Oracle DP (fully observed underlying process)


@dataclass
class DpArtifact:
    """Greedy policy from a solved table; duck-type compatible with learned
    policy artifacts (env_fingerprint + as_adapter)."""

    kind: str                      # "oracle" or "censored"
    env: EnvConfig
    gamma: float
    ir_bins: int
    q_oracle: np.ndarray | None = None      # (depth levels, states, actions)
    q0: np.ndarray | None = None            # (states, actions)
    deep_q: list = field(default_factory=list)      # per depth 1..n_cap
    deep_keys: list = field(default_factory=list)
    n_cap: int = 0

    def __post_init__(self):
        self.space = DiscretizedSpace(self.env, self.ir_bins)
        self._indices = [RowIndex(k) for k in self.deep_keys]

    @property
    def env_fingerprint(self) -> str:
        return env_fingerprint(self.env)

    def as_adapter(self) -> PolicyAdapter:
        if self.kind == "oracle":
            return OracleDpPolicy(self)
        return CensoredDpPolicy(self)

    def save(self, path: str) -> None:
        meta = {"kind": self.kind, "env": env_to_dict(self.env), "gamma": self.gamma,
                "ir_bins": self.ir_bins, "n_cap": self.n_cap,
                "n_deep": len(self.deep_q)}
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
        if self.q_oracle is not None:
            arrays["q_oracle"] = self.q_oracle
        if self.q0 is not None:
            arrays["q0"] = self.q0
        for i, (q, k) in enumerate(zip(self.deep_q, self.deep_keys)):
            arrays[f"deep_q_{i}"] = q
            arrays[f"deep_k_{i}"] = k
        np.savez_compressed(path, **arrays)

    @staticmethod
    def load(path: str, env: EnvConfig | None = None) -> "DpArtifact":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            stored_env = env_from_dict(meta["env"])
            art = DpArtifact(
                kind=meta["kind"], env=stored_env, gamma=meta["gamma"],
                ir_bins=meta["ir_bins"],
                q_oracle=z["q_oracle"] if "q_oracle" in z else None,
                q0=z["q0"] if "q0" in z else None,
                deep_q=[z[f"deep_q_{i}"] for i in range(meta["n_deep"])],
                deep_keys=[z[f"deep_k_{i}"] for i in range(meta["n_deep"])],
                n_cap=meta["n_cap"])
        if env is not None and env_fingerprint(env) != art.env_fingerprint:
            raise CompatibilityError("stored reference policy was solved for a different environment")
        return art


class OracleDpPolicy(PolicyAdapter):
    """Greedy on the oracle table; reads true lagged demand and run depth."""

    def __init__(self, artifact: DpArtifact):
        self.artifact = artifact
        self.boundary_events = 0

    def reset_counters(self) -> None:
        self.boundary_events = 0

    def decide(self, view):
        art, sp = self.artifact, self.artifact.space
        idx = sp.state0_index(sp.ir_bin(view.ir), view.se.astype(np.int64),
                              sp.y_level(view.y), sp.d_level(view.d_prev_true))
        lvl = np.minimum(view.depth, art.q_oracle.shape[0] - 1)
        a = np.argmax(art.q_oracle[lvl, idx], axis=1)
        return a.astype(np.int64), np.zeros(len(a), dtype=bool)


class CensoredDpPolicy(PolicyAdapter):
    """Greedy on the per-depth block tables; unvisited blocks fall back to the
    safe boundary action and are counted as out-of-support."""

    def __init__(self, artifact: DpArtifact):
        self.artifact = artifact
        self.max_lag = artifact.n_cap
        self.boundary_events = 0

    def reset_counters(self) -> None:
        self.boundary_events = 0

    def _lag_key_cols(self, view, d: int, rows: np.ndarray) -> list:
        sp = self.artifact.space
        cols = []
        # oldest lag first: lag j lives in buffer slot j-1
        for j in range(d, 0, -1):
            cols.extend([sp.ir_bin(view.lags.ir[j - 1, rows]),
                         view.lags.se[j - 1, rows].astype(np.int64),
                         sp.y_level(view.lags.y[j - 1, rows]),
                         sp.d_level(view.lags.z_prev[j - 1, rows]),
                         view.lags.p_idx[j - 1, rows],
                         view.lags.o_idx[j - 1, rows]])
        cols.extend([sp.ir_bin(view.ir[rows]), view.se[rows].astype(np.int64),
                     sp.y_level(view.y[rows]), sp.d_level(view.z_prev[rows])])
        return cols

    def decide(self, view):
        art, sp = self.artifact, self.artifact.space
        n = len(view.ir)
        a = np.full(n, art.env.a_max_index, dtype=np.int64)
        oos = np.zeros(n, dtype=bool)
        d0 = np.flatnonzero(view.depth == 0)
        if len(d0):
            idx = sp.state0_index(sp.ir_bin(view.ir[d0]), view.se[d0].astype(np.int64),
                                  sp.y_level(view.y[d0]), sp.d_level(view.z_prev[d0]))
            a[d0] = np.argmax(art.q0[idx], axis=1)
        for d in range(1, art.n_cap + 1):
            rows = np.flatnonzero(view.depth == d)
            if not len(rows):
                continue
            keys = np.column_stack(self._lag_key_cols(view, d, rows)).astype(_KEY_DTYPE)
            hit = art._indices[d - 1].lookup(keys)
            found = hit >= 0
            if np.any(found):
                a[rows[found]] = np.argmax(art.deep_q[d - 1][hit[found]], axis=1)
            miss = rows[~found]
            oos[miss] = True
            self.boundary_events += int(len(miss))
        beyond = np.flatnonzero(view.depth > art.n_cap)
        if len(beyond):
            oos[beyond] = True
            self.boundary_events += int(len(beyond))
        return a, oos


def _check_contraction(deltas: list, streak: int, sup: float) -> int:
    if len(deltas) >= 2 and sup > deltas[-2]:
        streak += 1
    else:
        streak = 0
    if streak >= 5:
        raise ConsistencyError(
            "value-iteration sweep deltas increased for 5 consecutive sweeps; "
            "the frozen-sample backup is not contracting")
    return streak


def solve_oracle_dp(env: EnvConfig, gamma: float, dp: DpConfig):
    """Value iteration on the discretized fully observed process.

    The state is (interest bin, economy, inventory, lagged demand) plus the
    censoring-run depth when the environment truncates runs, since the forced
    uncensored draw at the cap changes the transition law there.
    """
    space = DiscretizedSpace(env, dp.ir_bins)
    prices, orders = action_values(env)
    n_s, n_a, mc = space.n_states0, env.n_actions, dp.mc_samples
    par, f = env.demand, env.features
    rng = np.random.default_rng(stable_seed("oracle-dp", env_fingerprint(env), dp.seed, gamma))

    irb, se, ylv, dlv = space.enumerate_coords()
    ir_v = space.ir_centers[irb]
    y_v = ylv.astype(float)
    mean0 = par.theta0 + par.theta_x[0] * ir_v + par.theta_x[1] * se + par.rho * dlv

    cap = env.censor_run_cap
    levels = (cap + 1) if cap is not None else 1

    def build(forced: bool):
        eps = rng.normal(0.0, par.noise_sd, size=(n_s, mc))
        ir_eps = rng.normal(0.0, f.ir_noise_sd, size=(n_s, mc))
        u_sw = rng.random((n_s, mc))
        u_force = rng.random((n_s, mc)) if forced else None
        ir_next = np.clip(f.ir_mean + f.ir_ar_coeff * (ir_v[:, None] - f.ir_mean) + ir_eps,
                          f.ir_clamp[0], f.ir_clamp[1])
        irb_next = space.ir_bin(ir_next)
        se_next = np.where(u_sw < f.econ_switch_prob, 1 - se[:, None], se[:, None])
        r = np.empty((n_s, n_a, mc), dtype=np.float32)
        idx = np.empty((n_s, n_a, mc), dtype=np.int32)
        delta = np.empty((n_s, n_a, mc), dtype=bool)
        for a in range(n_a):
            mean_a = mean0 - par.beta * prices[a]
            if forced:
                d = draw_demand_below(par, mean_a[:, None], y_v[:, None], u_force)
            else:
                d = clamp_demand(par, mean_a[:, None] + eps)
            r[:, a, :] = reward_batch(env.costs, prices[a], orders[a], y_v[:, None], d)
            y_next = np.clip(y_v[:, None] + orders[a] - d, 0.0, env.y_cap)
            idx[:, a, :] = space.state0_index(irb_next, se_next,
                                              space.y_level(y_next), space.d_level(d))
            delta[:, a, :] = d <= y_v[:, None]
        return r, idx, delta

    r_n, idx_n, delta_n = build(forced=False)
    if cap is not None:
        r_f, idx_f, _ = build(forced=True)
    r_means = []
    # one flat index per depth level into v.ravel(): uncensored draws land at
    # level 0, censored ones at level lvl+1, forced draws always at level 0
    gather_idx = []
    for lvl in range(levels):
        if cap is not None and lvl == cap:
            r_means.append(r_f.mean(axis=2))
            gather_idx.append(idx_f)
        else:
            r_means.append(r_n.mean(axis=2))
            if levels == 1:
                gather_idx.append(idx_n)
            else:
                gather_idx.append(np.where(delta_n, idx_n,
                                           idx_n + np.int32(n_s * (lvl + 1))))
    del r_n, delta_n
    if cap is not None:
        del r_f

    r_max = r_max_bound(env)
    tol = dp.sweep_tol_scale * r_max
    v = np.zeros((levels, n_s))
    deltas: list = []
    streak = 0
    converged = False
    q_levels = None
    for sweep in range(dp.max_sweeps):
        v_flat = v.ravel()
        q_levels = np.empty((levels, n_s, n_a))
        for lvl in range(levels):
            q_levels[lvl] = r_means[lvl] + gamma * v_flat[gather_idx[lvl]].mean(axis=2)
        v_new = q_levels.max(axis=2)
        sup = float(np.max(np.abs(v_new - v)))
        deltas.append(sup)
        streak = _check_contraction(deltas, streak, sup)
        v = v_new
        if sup < tol:
            converged = True
            break
    if not converged:
        log.warning("oracle solve stopped at %d sweeps with delta %.3g (tol %.3g)",
                    len(deltas), deltas[-1], tol)
    table = ValueTable(kind="oracle", gamma=gamma, mc_samples=mc, n_sweeps=len(deltas),
                       sweep_deltas=deltas, converged=converged,
                       space_info=space.describe(), block_counts=[n_s] * levels)
    artifact = DpArtifact(kind="oracle", env=env, gamma=gamma, ir_bins=dp.ir_bins,
                          q_oracle=q_levels, n_cap=levels - 1)
    return table, artifact


# ---------------------------------------------------------------------------
# Censoring-aware DP over observed history blocks


def _collect_blocks(env: EnvConfig, space: DiscretizedSpace, dp: DpConfig, n_cap: int):
    """Visited history blocks per depth 1..n_cap, most frequent first."""
    horizon = 50
    n_traj = max(2, int(np.ceil(dp.collect_steps / (horizon - 1))))
    ds = generate_dataset(env, UniformBehavior(), n_traj, horizon,
                          stable_seed("dp-blocks", env_fingerprint(env), dp.seed))
    depth, usable = compute_depths(ds)
    c = ds.cols
    binned = {
        "irb": space.ir_bin(c["ir"]), "se": c["se"].astype(np.int64),
        "ylv": space.y_level(c["y"]), "zplv": space.d_level(c["z_prev"]),
        "p_idx": c["p_idx"], "o_idx": c["o_idx"],
    }
    keys_per_depth = []
    for d in range(1, n_cap + 1):
        rows = np.flatnonzero(usable & (depth == d))
        if len(rows) == 0:
            keys_per_depth.append(np.zeros((0, _STEP_KEY_WIDTH * d + _OBS_KEY_WIDTH),
                                           dtype=_KEY_DTYPE))
            continue
        cols = []
        for j in range(d, 0, -1):
            prev = rows - j
            cols.extend([binned["irb"][prev], binned["se"][prev], binned["ylv"][prev],
                         binned["zplv"][prev], binned["p_idx"][prev], binned["o_idx"][prev]])
        cols.extend([binned["irb"][rows], binned["se"][rows], binned["ylv"][rows],
                     binned["zplv"][rows]])
        keys = np.column_stack(cols).astype(_KEY_DTYPE)
        uniq, counts = np.unique(keys, axis=0, return_counts=True)
        if len(uniq) > dp.max_blocks_per_depth:
            order = np.argsort(-counts, kind="stable")[:dp.max_blocks_per_depth]
            uniq = uniq[np.sort(order)]
        keys_per_depth.append(uniq)
    return keys_per_depth


def _block_step_coords(space: DiscretizedSpace, prices: np.ndarray, keys: np.ndarray,
                       j: int, depth: int):
    """Per-block coordinates of the j-th window step (0 = oldest) of depth-d keys."""
    base = _STEP_KEY_WIDTH * j
    irb = keys[:, base].astype(np.int64)
    se = keys[:, base + 1].astype(np.int64)
    ylv = keys[:, base + 2].astype(np.int64)
    zplv = keys[:, base + 3].astype(np.int64)
    p_idx = keys[:, base + 4].astype(np.int64)
    return {"ir": space.ir_centers[irb], "se": se.astype(float), "y": ylv.astype(float),
            "zp": zplv.astype(float), "p": prices[p_idx]}


def _block_cur_coords(space: DiscretizedSpace, keys: np.ndarray, depth: int):
    base = _STEP_KEY_WIDTH * depth
    irb = keys[:, base].astype(np.int64)
    se = keys[:, base + 1].astype(np.int64)
    ylv = keys[:, base + 2].astype(np.int64)
    zplv = keys[:, base + 3].astype(np.int64)
    return irb, se, ylv, zplv


def solve_censored_dp(env: EnvConfig, gamma: float, dp: DpConfig):
    """Value iteration on the coupled per-depth system over observed blocks.

    Depth 0 is enumerated exhaustively; deeper blocks are the visited ones
    from a long behavior simulation. Latent demands of a censored window are
    integrated out with sequential truncated draws reweighted by the
    censoring probabilities of the later steps. At the depth cap the backup
    keeps only the uncensored continuation (it is forced by the environment
    when the generator truncates runs).
    """
    space = DiscretizedSpace(env, dp.ir_bins)
    prices, orders = action_values(env)
    par, f = env.demand, env.features
    n_a = env.n_actions
    n_cap = dp.n_cap
    if env.censor_run_cap is not None and n_cap < env.censor_run_cap:
        raise CfqiError(f"depth cap {n_cap} is below the environment's run cap "
                        f"{env.censor_run_cap}; deeper blocks would be unreachable in the model")
    rng = np.random.default_rng(stable_seed("censored-dp", env_fingerprint(env), dp.seed, gamma))
    deep_keys = _collect_blocks(env, space, dp, n_cap) if n_cap >= 1 else []
    deep_indices = [RowIndex(k) for k in deep_keys]

    def evolve_features(ir_v: np.ndarray, se: np.ndarray, k: int):
        ir_eps = rng.normal(0.0, f.ir_noise_sd, size=(len(ir_v), k))
        u_sw = rng.random((len(ir_v), k))
        ir_next = np.clip(f.ir_mean + f.ir_ar_coeff * (ir_v[:, None] - f.ir_mean) + ir_eps,
                          f.ir_clamp[0], f.ir_clamp[1])
        se_next = np.where(u_sw < f.econ_switch_prob, 1 - se[:, None].astype(np.int64),
                           se[:, None].astype(np.int64))
        return space.ir_bin(ir_next), se_next

    fallback_edges = 0

    def build_depth(d: int):
        """Frozen draws for every (block, action): rewards, branch flags,
        depth-0 landing index, and next-block index (-1: use the depth-0
        anchor value)."""
        nonlocal fallback_edges
        if d == 0:
            irb, se, ylv, zplv = space.enumerate_coords()
            n_b, k = space.n_states0, dp.mc_samples
            ir_v = space.ir_centers[irb]
            y_v = ylv.astype(float)
            d_last = np.broadcast_to(zplv.astype(float)[:, None], (n_b, k)).copy()
            w = np.full((n_b, k), 1.0 / k)
        else:
            keys = deep_keys[d - 1]
            n_b, k = len(keys), dp.mc_samples_deep
            if n_b == 0:
                return None
            irb, se, ylv, zplv = _block_cur_coords(space, keys, d)
            ir_v = space.ir_centers[irb]
            y_v = ylv.astype(float)
            # latent demand chain through the censored window
            oldest = _block_step_coords(space, prices, keys, 0, d)
            d_last = np.broadcast_to(oldest["zp"][:, None], (n_b, k)).copy()
            w = np.ones((n_b, k))
            for j in range(d):
                st = _block_step_coords(space, prices, keys, j, d)
                mean_j = (par.theta0 + par.theta_x[0] * st["ir"] + par.theta_x[1] * st["se"]
                          - par.beta * st["p"])[:, None] + par.rho * d_last
                floor = np.minimum(st["y"], par.d_max - 0.5)[:, None]
                if j >= 1:
                    w = w * demand_tail_prob(par, mean_j, floor)
                u = rng.random((n_b, k))
                d_last = draw_demand_above(par, mean_j, np.broadcast_to(floor, mean_j.shape), u)
            tot = w.sum(axis=1, keepdims=True)
            flat = tot[:, 0] <= 0
            if np.any(flat):
                w[flat] = 1.0
                tot[flat] = k
            w = w / tot
        se_arr = se.astype(np.int64)
        irb_next, se_next = evolve_features(ir_v, se_arr, k)
        eps = rng.normal(0.0, par.noise_sd, size=(n_b, k))
        forced = env.censor_run_cap is not None and d >= env.censor_run_cap
        u_force = rng.random((n_b, k)) if forced else None
        mean_base = (par.theta0 + par.theta_x[0] * ir_v + par.theta_x[1] * se_arr)

        r = np.empty((n_b, n_a, k), dtype=np.float32)
        delta = np.empty((n_b, n_a, k), dtype=bool)
        idx0 = np.empty((n_b, n_a, k), dtype=np.int32)
        idx_next = np.full((n_b, n_a, k), -1, dtype=np.int32) if d < n_cap else None
        ylv_cur = space.y_level(y_v)
        for a in range(n_a):
            mean_a = (mean_base - par.beta * prices[a])[:, None] + par.rho * d_last
            if forced:
                dem = draw_demand_below(par, mean_a, np.broadcast_to(y_v[:, None], mean_a.shape),
                                        u_force)
            else:
                dem = clamp_demand(par, mean_a + eps)
            r[:, a, :] = reward_batch(env.costs, prices[a], orders[a], y_v[:, None], dem)
            dlt = dem <= y_v[:, None]
            delta[:, a, :] = dlt
            y_next = np.clip(y_v[:, None] + orders[a] - dem, 0.0, env.y_cap)
            ylv_next = space.y_level(y_next)
            # landing state if uncensored: previous sales equal realized demand;
            # anchor state if censored: previous sales equal inventory
            zp_next = np.where(dlt, space.d_level(dem), ylv_cur[:, None])
            idx0[:, a, :] = space.state0_index(irb_next, se_next, ylv_next, zp_next)
            if d < n_cap and len(deep_keys) > d and not np.all(dlt):
                cen = np.flatnonzero(~dlt.ravel())
                b_i, k_i = np.unravel_index(cen, dlt.shape)
                if d == 0:
                    prefix = np.column_stack([irb[b_i], se_arr[b_i], ylv[b_i], zplv[b_i]])
                else:
                    prefix = deep_keys[d - 1][b_i]
                q_keys = np.column_stack([
                    prefix,
                    np.full(len(b_i), a // len(env.order_grid)),
                    np.full(len(b_i), a % len(env.order_grid)),
                    irb_next[b_i, k_i], se_next[b_i, k_i],
                    ylv_next[b_i, k_i], ylv_cur[b_i]]).astype(_KEY_DTYPE)
                hit = deep_indices[d].lookup(q_keys)
                fallback_edges += int(np.count_nonzero(hit < 0))
                idx_next[b_i, a, k_i] = hit.astype(np.int32)
        r_w = np.einsum("bak,bk->ba", r.astype(np.float64), w)
        # one flat gather index per frozen draw: deep hits address the next
        # depth's table (offset past the depth-0 table), everything else the
        # depth-0 table; an unforced boundary sends censored draws to a zero slot
        boundary_zero = False
        if d < n_cap:
            gather = np.where(idx_next >= 0,
                              np.int32(space.n_states0) + idx_next, idx0)
        elif env.censor_run_cap is not None and d >= env.censor_run_cap:
            gather = idx0
        else:
            boundary_zero = True
            gather = np.where(delta, idx0, np.int32(space.n_states0))
        return {"r_w": r_w, "gather": gather, "boundary_zero": boundary_zero,
                "w": w, "n": n_b}

    samples = []
    block_counts = []
    for d in range(n_cap + 1):
        s = build_depth(d)
        if s is None:
            log.warning("no visited blocks at depth %d; the table stops at depth %d", d, d - 1)
            n_cap = d - 1
            deep_keys = deep_keys[:n_cap]
            deep_indices = deep_indices[:n_cap]
            break
        samples.append(s)
        block_counts.append(s["n"])

    r_max = r_max_bound(env)
    tol = dp.sweep_tol_scale * r_max
    values = [np.zeros(s["n"]) for s in samples]
    deltas: list = []
    streak = 0
    converged = False
    q_tables = None
    for sweep in range(dp.max_sweeps):
        q_tables = []
        sup = 0.0
        new_values = []
        for d, s in enumerate(samples):
            if d < n_cap:
                v_cat = np.concatenate([values[0], values[d + 1]])
            elif s["boundary_zero"]:
                v_cat = np.concatenate([values[0], [0.0]])
            else:
                v_cat = values[0]
            q = s["r_w"] + gamma * np.einsum("bak,bk->ba", v_cat[s["gather"]], s["w"])
            q_tables.append(q)
            new_values.append(q.max(axis=1))
        for d in range(len(values)):
            sup = max(sup, float(np.max(np.abs(new_values[d] - values[d]))) if len(values[d]) else 0.0)
        deltas.append(sup)
        streak = _check_contraction(deltas, streak, sup)
        values = new_values
        if sup < tol:
            converged = True
            break
    if not converged:
        log.warning("censored solve stopped at %d sweeps with delta %.3g (tol %.3g)",
                    len(deltas), deltas[-1], tol)
    table = ValueTable(kind="censored", gamma=gamma, mc_samples=dp.mc_samples,
                       n_sweeps=len(deltas), sweep_deltas=deltas, converged=converged,
                       space_info=space.describe(), block_counts=block_counts,
                       fallback_edges=fallback_edges)
    artifact = DpArtifact(kind="censored", env=env, gamma=gamma, ir_bins=dp.ir_bins,
                          q0=q_tables[0], deep_q=q_tables[1:], deep_keys=list(deep_keys),
                          n_cap=n_cap)
    return table, artifact


# ---------------------------------------------------------------------------
# Evaluation and regret


@dataclass
class EvalReport:
    algo: str
    mode: str
    n_episodes: int          # training episodes behind the policy (0 for references)
    seed: int
    mean_return: float
    ci_half: float
    n_eval_episodes: int
    horizon: int
    gamma: float
    env_fp: str
    truncation_bias_bound: float
    amax_events: int
    oos_events: int

    def as_row(self, oracle_mean: float | None = None, oracle_ci: float = 0.0) -> dict:
        regret = float("nan") if oracle_mean is None else oracle_mean - self.mean_return
        regret_ci = float("nan") if oracle_mean is None else float(
            np.hypot(self.ci_half, oracle_ci))
        return {"algo": self.algo, "mode": self.mode, "n_episodes": self.n_episodes,
                "seed": self.seed, "mean_return": self.mean_return,
                "ci_half": self.ci_half, "regret": regret,
                "regret_ci_half": regret_ci, "amax_events": self.amax_events}


def evaluate_policy(artifact, env: EnvConfig, n_episodes: int, horizon: int,
                    gamma: float, seed: int, algo: str = "", mode: str = "",
                    n_train_episodes: int = 0) -> EvalReport:
    """Mean discounted true-reward return over independent rollouts."""
    if n_episodes < 2:
        raise CfqiError("need at least 2 evaluation episodes for a confidence interval")
    fp = getattr(artifact, "env_fingerprint", None)
    if fp is not None and fp != env_fingerprint(env):
        raise CompatibilityError(
            f"policy was built for environment {fp}, evaluation asked for {env_fingerprint(env)}")
    adapter = artifact.as_adapter()
    res = rollout(env, adapter, n_episodes, horizon + 1, seed,
                  apply_run_cap=True, record="returns", gamma=gamma)
    returns = res.returns
    mean = float(returns.mean())
    sd = float(returns.std(ddof=1))
    ci = 1.96 * sd / np.sqrt(n_episodes)
    bound = (gamma ** horizon) * r_max_bound(env) / (1.0 - gamma) if gamma > 0 else 0.0
    return EvalReport(algo=algo, mode=mode, n_episodes=n_train_episodes, seed=seed,
                      mean_return=mean, ci_half=float(ci), n_eval_episodes=n_episodes,
                      horizon=horizon, gamma=gamma, env_fp=env_fingerprint(env),
                      truncation_bias_bound=float(bound),
                      amax_events=res.amax_boundary, oos_events=res.oos_events)


def regret_table(reports: list, oracle: EvalReport) -> list:
    """Regret rows (oracle mean minus policy mean) with propagated CI."""
    rows = []
    for rep in reports:
        if (rep.env_fp, rep.horizon, rep.gamma) != (oracle.env_fp, oracle.horizon, oracle.gamma):
            raise ConsistencyError(
                "regret table mixes reports from different environments or protocols")
        rows.append(rep.as_row(oracle.mean_return, oracle.ci_half))
    return rows
