"""Censored fitted Q-iteration, its pessimistic variant, and policy artifacts.

Training runs K rounds of target construction and per-depth regression over
the depth partition. Censored transitions back up through the next-deeper
value function evaluated on the extended history block; uncensored ones back
up through the depth-0 function. The pessimistic variant's working estimate
is the fitted Q minus an uncertainty width; that penalized object enters
both the backup and the deployed greedy rule. Fusion uses the penalty for
its opening rounds only and deploys plain greedy. Every mode emits the safe
boundary action (max price, max order) once the censoring run reaches the
estimated depth limit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .approx import (DesignWidth, FeatureMap, HistoryBlock, KernelRidgeModel,
                     effective_beta, krr_fit, krr_refit, model_from_dict,
                     model_to_dict, ridge_fit, uq_eval)
from .censoring import estimate_n_hat, partition
from .config import AlgoConfig, EnvConfig, env_fingerprint, env_from_dict, env_to_dict
from .engine import PolicyAdapter
from .env import Action, action_values
from .errors import CfqiError, CompatibilityError, CoverageError, ParseError
from .survival import AugmentedDataset, r_max_bound

log = logging.getLogger(__name__)

MODES = ("cfqi", "pcfqi", "fusion")
ARTIFACT_VERSION = 1
TIE_BREAK = "lowest price, then lowest order"
_PREDICT_CHUNK = 16384


def default_window_k(n_traj: int, horizon: int, gamma: float) -> int:
    """Run-length window: min(T, ceil(ln(N*T) / (2*(1-gamma))))."""
    nt = max(2, n_traj * horizon)
    k = math.ceil(math.log(nt) / (2.0 * (1.0 - gamma)))
    return max(1, min(horizon, k))


def _predict_flat(model, flat: np.ndarray) -> np.ndarray:
    if isinstance(model, KernelRidgeModel) and len(flat) > _PREDICT_CHUNK:
        out = np.empty(len(flat))
        for lo in range(0, len(flat), _PREDICT_CHUNK):
            out[lo:lo + _PREDICT_CHUNK] = model.predict(flat[lo:lo + _PREDICT_CHUNK])
        return out
    return model.predict(flat)


def _uq_flat(model, beta: float, flat: np.ndarray) -> np.ndarray:
    b = effective_beta(model, beta)
    if isinstance(model, KernelRidgeModel) and len(flat) > _PREDICT_CHUNK:
        out = np.empty(len(flat))
        for lo in range(0, len(flat), _PREDICT_CHUNK):
            out[lo:lo + _PREDICT_CHUNK] = uq_eval(model, b, flat[lo:lo + _PREDICT_CHUNK])
        return out
    return uq_eval(model, b, flat)


def _width_flat(width, model, beta: float, flat: np.ndarray) -> np.ndarray:
    """Penalty widths in target units; a DesignWidth overrides the model's own
    uncertainty rule, the residual scale always comes from the fitted model."""
    if width is not None:
        return effective_beta(model, beta) * width.width(flat)
    return _uq_flat(model, beta, flat)


@dataclass
class DepthWorkspace:
    depth: int
    phi: np.ndarray          # regression design (n, d_i)
    r_star: np.ndarray
    delta: np.ndarray
    idx_obs: np.ndarray      # rows that ended uncensored
    idx_cen: np.ndarray      # rows that ended censored
    phi_next0: np.ndarray    # (n_obs, A, d_0): next state at depth 0, all actions
    phi_ext: np.ndarray | None  # (n_cen, A, d_{depth+1}): extended block, all actions

    @property
    def n(self) -> int:
        return len(self.r_star)


def _bucket_lag_dict(b) -> dict:
    return {"ir": b.lag_ir, "se": b.lag_se, "y": b.lag_y,
            "z_prev": b.lag_z_prev, "p": b.lag_p, "o": b.lag_o}


class Trainer:
    """Precomputes per-depth designs and next-state feature tensors once; the
    per-iteration work is then predictions, maxima, and refits only."""

    def __init__(self, part, env: EnvConfig, algo: AlgoConfig):
        self.env = env
        self.algo = algo
        self.n_hat = part.n_hat
        self.fmaps = [FeatureMap(env, i, algo.quadratic_order_terms)
                      for i in range(self.n_hat + 1)]
        self.workspaces: list[DepthWorkspace] = []
        self._krr_keep: list = []
        for b in part.buckets:
            if b.n == 0:
                raise CoverageError(
                    b.depth,
                    f"no transitions at censoring depth {b.depth} (n_hat={part.n_hat}); "
                    "the offline data cannot support this depth. Collect more "
                    "trajectories or use a behavior policy that visits deeper runs.")
            fmap = self.fmaps[b.depth]
            phi = fmap.featurize_batch(b.ir, b.se, b.y, b.z_prev, _bucket_lag_dict(b),
                                       b.p_idx, b.o)
            idx_obs = np.flatnonzero(b.delta)
            idx_cen = np.flatnonzero(~b.delta)
            phi_next0 = self.fmaps[0].features_all_actions(
                b.ir_next[idx_obs], b.se_next[idx_obs], b.y_next[idx_obs], b.z[idx_obs], {})
            phi_ext = None
            if len(idx_cen):
                if b.depth + 1 > self.n_hat:
                    raise CfqiError(
                        f"censored transition at depth {b.depth} needs a depth-{b.depth + 1} "
                        "model beyond n_hat; the partition should have rejected this dataset")
                ext_lag = {
                    "ir": np.vstack([b.ir[idx_cen][None, :], b.lag_ir[:, idx_cen]]),
                    "se": np.vstack([b.se[idx_cen][None, :], b.lag_se[:, idx_cen]]),
                    "y": np.vstack([b.y[idx_cen][None, :], b.lag_y[:, idx_cen]]),
                    "z_prev": np.vstack([b.z_prev[idx_cen][None, :], b.lag_z_prev[:, idx_cen]]),
                    "p": np.vstack([b.p[idx_cen][None, :], b.lag_p[:, idx_cen]]),
                    "o": np.vstack([b.o[idx_cen][None, :], b.lag_o[:, idx_cen]]),
                }
                phi_ext = self.fmaps[b.depth + 1].features_all_actions(
                    b.ir_next[idx_cen], b.se_next[idx_cen], b.y_next[idx_cen],
                    b.z[idx_cen], ext_lag)
            self.workspaces.append(DepthWorkspace(
                depth=b.depth, phi=phi, r_star=b.r_star.copy(), delta=b.delta.copy(),
                idx_obs=idx_obs, idx_cen=idx_cen, phi_next0=phi_next0, phi_ext=phi_ext))
            n = b.n
            if n > algo.krr.max_support:
                keep = np.unique(np.linspace(0, n - 1, algo.krr.max_support).astype(int))
            else:
                keep = np.arange(n)
            self._krr_keep.append(keep)
        # one array object per depth so refits can reuse the Gram factorization
        self._krr_X = [ws.phi[keep] for ws, keep in zip(self.workspaces, self._krr_keep)]
        if algo.uq_kind == "linear":
            self.widths = [DesignWidth.fit(ws.phi, algo.ridge_lambda)
                           for ws in self.workspaces]
        else:
            self.widths = [None] * len(self.workspaces)

    def _backup_values(self, model, tensor, v_max: float, u_tensor):
        """Clipped (and optionally pessimistic) value of every next action."""
        n, n_a, d = tensor.shape
        if model is None or n == 0:
            return np.zeros((n, n_a)), 0
        preds = _predict_flat(model, tensor.reshape(-1, d))
        clips = int(np.count_nonzero((preds < -v_max) | (preds > v_max)))
        vals = np.clip(preds, -v_max, v_max).reshape(n, n_a)
        if u_tensor is not None:
            vals = np.maximum(vals - u_tensor, -v_max)
        return vals, clips

    def build_targets(self, models: list, pessimistic: bool, v_max: float,
                      u_next0: list | None = None, u_ext: list | None = None):
        """Per-depth regression targets from the previous ensemble.

        Returns (targets, clip_count). With a zero-initialized ensemble
        (models entries None) both variants reduce to the surrogate reward.
        """
        targets = []
        clips = 0
        gamma = self.algo.gamma
        for i, ws in enumerate(self.workspaces):
            zeta = ws.r_star.copy()
            if gamma > 0:
                if len(ws.idx_obs):
                    u = u_next0[i] if (pessimistic and u_next0 is not None) else None
                    vals, c = self._backup_values(models[0], ws.phi_next0, v_max, u)
                    clips += c
                    zeta[ws.idx_obs] += gamma * vals.max(axis=1)
                if len(ws.idx_cen):
                    u = u_ext[i] if (pessimistic and u_ext is not None) else None
                    vals, c = self._backup_values(models[i + 1], ws.phi_ext, v_max, u)
                    clips += c
                    zeta[ws.idx_cen] += gamma * vals.max(axis=1)
            targets.append(zeta)
        return targets, clips

    def fit_depth(self, i: int, y: np.ndarray, prev):
        ws = self.workspaces[i]
        if self.algo.function_class == "ridge":
            return ridge_fit(ws.phi, y, self.algo.ridge_lambda)
        keep = self._krr_keep[i]
        if prev is None:
            # hyperparameters are selected once, on the first-round targets,
            # then held fixed so later refits stay comparable and cheap
            model = krr_fit(self._krr_X[i], y[keep], self.algo.krr,
                            col_scale=self.fmaps[i].kernel_scale)
            if getattr(model, "_X_raw", None) is not None:
                self._krr_X[i] = model._X_raw
            return model
        return krr_refit(prev, self._krr_X[i], y[keep])

    def uq_tensors(self, models: list, beta: float):
        """Uncertainty widths over every next-state action; design matrices are
        iteration-independent, so these are computed once."""
        u_next0, u_ext = [], []
        for i, ws in enumerate(self.workspaces):
            n1, n_a, d0 = ws.phi_next0.shape
            u0 = (_width_flat(self.widths[0], models[0], beta,
                              ws.phi_next0.reshape(-1, d0)).reshape(n1, n_a)
                  if n1 else np.zeros((0, n_a)))
            u_next0.append(u0)
            if ws.phi_ext is not None:
                n0, n_a2, de = ws.phi_ext.shape
                ue = _width_flat(self.widths[i + 1], models[i + 1], beta,
                                 ws.phi_ext.reshape(-1, de)).reshape(n0, n_a2)
            else:
                ue = None
            u_ext.append(ue)
        return u_next0, u_ext


@dataclass
class PolicyArtifact:
    """Trained per-depth Q ensemble plus the deployment rule.

    Deployment: at censoring depth below n_hat, play the greedy action of the
    depth's Q (price-major enumeration makes ties resolve to the lowest
    price, then the lowest order); at depth n_hat or beyond, play a_max.
    """

    env: EnvConfig
    n_hat: int
    gamma: float
    mode: str
    function_class: str
    beta: float
    ridge_lambda: float
    quadratic_order_terms: bool
    models: list
    pessimistic_act: bool
    iterations: int
    seed: int
    widths: list | None = None
    clip_events: int = 0
    tie_break: str = TIE_BREAK
    oos_events: int = field(default=0, compare=False)

    def __post_init__(self):
        self._fmaps = [FeatureMap(self.env, i, self.quadratic_order_terms)
                       for i in range(self.n_hat + 1)]
        self._r_max = r_max_bound(self.env)

    @property
    def env_fingerprint(self) -> str:
        return env_fingerprint(self.env)

    @property
    def v_max(self) -> float:
        return self._r_max / (1.0 - self.gamma) if self.gamma < 1 else float("inf")

    def a_max(self) -> Action:
        return Action(p=max(self.env.prices), o=max(self.env.order_grid))

    def q_values(self, depth: int, ir, se, y, z_prev, lag: dict) -> np.ndarray:
        """Greedy scores (n, n_actions) at a depth below n_hat; the
        pessimistic artifact scores with its penalized estimate."""
        fmap = self._fmaps[depth]
        phi = fmap.features_all_actions(ir, se, y, z_prev, lag)
        n, n_a, d = phi.shape
        flat = phi.reshape(-1, d)
        q = np.clip(_predict_flat(self.models[depth], flat), -self.v_max, self.v_max)
        if self.pessimistic_act:
            w = self.widths[depth] if self.widths is not None else None
            q = np.maximum(q - _width_flat(w, self.models[depth], self.beta, flat),
                           -self.v_max)
        return q.reshape(n, n_a)

    def act(self, window: HistoryBlock, depth: int | None = None) -> Action:
        """Action for one observed history window; depth defaults to the
        number of lagged (censored) periods the window carries."""
        if depth is None:
            depth = len(window.lags)
        if depth > self.n_hat:
            self.oos_events += 1
            log.warning("censoring depth %d exceeds the supported %d; emitting the safe action",
                        depth, self.n_hat)
            return self.a_max()
        if depth == self.n_hat:
            return self.a_max()
        if len(window.lags) < depth:
            raise CfqiError(f"window carries {len(window.lags)} lags but depth is {depth}")
        lag = {f: np.array([[getattr(s, f)] for s in window.lags[:depth]])
               for f in ("ir", "se", "y", "z_prev", "p", "o")}
        q = self.q_values(depth, np.array([window.ir]), np.array([window.se]),
                          np.array([window.y]), np.array([window.z_prev]), lag)
        prices, orders = action_values(self.env)
        a = int(np.argmax(q[0]))
        return Action(p=float(prices[a]), o=float(orders[a]))

    def as_adapter(self) -> "ArtifactPolicy":
        return ArtifactPolicy(self)

    def to_dict(self) -> dict:
        return {"format": "cfqi-policy", "version": ARTIFACT_VERSION,
                "env": env_to_dict(self.env), "env_fingerprint": self.env_fingerprint,
                "n_hat": self.n_hat, "gamma": self.gamma, "mode": self.mode,
                "function_class": self.function_class, "beta": self.beta,
                "ridge_lambda": self.ridge_lambda,
                "quadratic_order_terms": self.quadratic_order_terms,
                "pessimistic_act": self.pessimistic_act,
                "iterations": self.iterations, "seed": self.seed,
                "clip_events": self.clip_events, "tie_break": self.tie_break,
                "models": [model_to_dict(m) for m in self.models],
                "widths": ([w.to_dict() for w in self.widths]
                           if self.widths is not None else None)}

    def summary_hash(self) -> str:
        import hashlib
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @staticmethod
    def from_dict(d: dict) -> "PolicyArtifact":
        if d.get("format") != "cfqi-policy":
            raise CompatibilityError("not a policy artifact file")
        if d.get("version") != ARTIFACT_VERSION:
            raise CompatibilityError(f"unsupported artifact version {d.get('version')!r}")
        raw_w = d.get("widths")
        return PolicyArtifact(
            env=env_from_dict(d["env"]), n_hat=d["n_hat"], gamma=d["gamma"],
            mode=d["mode"], function_class=d["function_class"], beta=d["beta"],
            ridge_lambda=d["ridge_lambda"],
            quadratic_order_terms=d["quadratic_order_terms"],
            models=[model_from_dict(m) for m in d["models"]],
            pessimistic_act=d["pessimistic_act"], iterations=d["iterations"],
            seed=d["seed"],
            widths=[DesignWidth.from_dict(w) for w in raw_w] if raw_w else None,
            clip_events=d["clip_events"], tie_break=d["tie_break"])


class ArtifactPolicy(PolicyAdapter):
    """Batch adapter that tracks censoring depth and plays the artifact."""

    def __init__(self, artifact: PolicyArtifact):
        self.artifact = artifact
        self.max_lag = artifact.n_hat
        self.boundary_events = 0
        self._prices = np.asarray(artifact.env.prices, dtype=float)
        self._orders = np.asarray(artifact.env.order_grid, dtype=float)

    def reset_counters(self) -> None:
        self.boundary_events = 0

    def decide(self, view):
        art = self.artifact
        n = len(view.ir)
        a = np.full(n, art.env.a_max_index, dtype=np.int64)
        oos = view.depth > art.n_hat
        at_boundary = view.depth >= art.n_hat
        self.boundary_events += int(np.count_nonzero(at_boundary))
        for d in range(art.n_hat):
            rows = np.flatnonzero(view.depth == d)
            if not len(rows):
                continue
            if d > 0:
                lag = {"ir": view.lags.ir[:d, rows], "se": view.lags.se[:d, rows],
                       "y": view.lags.y[:d, rows], "z_prev": view.lags.z_prev[:d, rows],
                       "p": self._prices[view.lags.p_idx[:d, rows]],
                       "o": self._orders[view.lags.o_idx[:d, rows]]}
            else:
                lag = {}
            q = art.q_values(d, view.ir[rows], view.se[rows], view.y[rows],
                             view.z_prev[rows], lag)
            a[rows] = np.argmax(q, axis=1)
        return a, oos


def act(artifact: PolicyArtifact, window: HistoryBlock, depth: int | None = None) -> Action:
    return artifact.act(window, depth)


def run_fqi(aug: AugmentedDataset, env: EnvConfig, algo: AlgoConfig, mode: str,
            seed: int, n_hat: int | None = None) -> PolicyArtifact:
    """Train a policy on augmented offline data.

    mode: cfqi (plain backups, plain greedy deployment), pcfqi (the working
    estimate is fit minus uncertainty width, in backups and in deployment),
    fusion (pessimistic backups for the first fusion_switch rounds, then
    plain; plain deployment). Deterministic given (dataset, config, seed).
    """
    if mode not in MODES:
        raise CfqiError(f"mode must be one of {MODES}, got {mode!r}")
    if len(aug) == 0:
        raise CfqiError("cannot train on an empty dataset")
    if n_hat is None:
        window = algo.window_k or default_window_k(aug.n_traj, aug.horizon, algo.gamma)
        n_hat = estimate_n_hat(aug, min(window, aug.horizon))
    part = partition(aug, n_hat)
    trainer = Trainer(part, env, algo)
    v_max = r_max_bound(env) / (1.0 - algo.gamma)

    models: list = [None] * (n_hat + 1)
    u_next0 = u_ext = None
    clip_total = 0
    needs_uq = mode in ("pcfqi", "fusion")
    for k in range(algo.iterations):
        pessimistic = mode == "pcfqi" or (mode == "fusion" and k < algo.fusion_switch)
        targets, clips = trainer.build_targets(models, pessimistic, v_max, u_next0, u_ext)
        clip_total += clips
        models = [trainer.fit_depth(i, targets[i], models[i]) for i in range(n_hat + 1)]
        if needs_uq and u_next0 is None:
            u_next0, u_ext = trainer.uq_tensors(models, algo.beta)
    if clip_total:
        log.info("clipped %d backed-up predictions to the value envelope", clip_total)
    return PolicyArtifact(
        env=env, n_hat=n_hat, gamma=algo.gamma, mode=mode,
        function_class=algo.function_class, beta=algo.beta,
        ridge_lambda=algo.ridge_lambda,
        quadratic_order_terms=algo.quadratic_order_terms,
        models=models, pessimistic_act=(mode == "pcfqi"),
        iterations=algo.iterations, seed=seed,
        widths=trainer.widths if algo.uq_kind == "linear" else None,
        clip_events=clip_total)


def save_policy(artifact: PolicyArtifact, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(artifact.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def load_policy(path: str, env: EnvConfig | None = None) -> PolicyArtifact:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.lineno, f"invalid policy file: {exc.msg}") from exc
    art = PolicyArtifact.from_dict(raw)
    if env is not None and env_fingerprint(env) != art.env_fingerprint:
        raise CompatibilityError(
            "policy artifact was trained under a different environment "
            f"(artifact {art.env_fingerprint}, requested {env_fingerprint(env)})")
    return art
