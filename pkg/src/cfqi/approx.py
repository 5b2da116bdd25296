"""Function classes for the per-depth regressions.

A deterministic feature map turns (history block, action) into a vector;
ridge regression and kernel ridge regression fit the per-depth value
functions; the uncertainty quantifier scores how far a query sits from the
data, driving the pessimistic variant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .config import EnvConfig, KrrConfig
from .errors import CfqiError

log = logging.getLogger(__name__)

LAG_WIDTH = 6  # (ir, se, y, z_prev, p, o) per lagged period


@dataclass(frozen=True)
class LagStep:
    ir: float
    se: float
    y: float
    z_prev: float
    p: float
    o: float


@dataclass(frozen=True)
class HistoryBlock:
    """Current observation plus the censored periods leading into it.

    lags[0] is the most recent lagged period (one step back).
    """

    ir: float
    se: float
    y: float
    z_prev: float
    lags: tuple = ()


class FeatureMap:
    """Deterministic encoding of (history block, action) at a fixed depth.

    Layout: [1, interest rate, economy state, inventory, previous sales,
    price one-hot, order, price-indicator x previous sales, optional
    quadratic order terms (o^2, o*y, o*z_prev), then 6 coordinates per
    lagged period]. All continuous coordinates are scaled into [0, 1] by
    grid-derived constants, so the vector norm is bounded by sqrt(dim).
    """

    def __init__(self, env: EnvConfig, depth: int, quadratic_order_terms: bool = False):
        self.env = env
        self.depth = int(depth)
        self.quadratic_order_terms = bool(quadratic_order_terms)
        self.n_prices = len(env.prices)
        self._prices = np.asarray(env.prices, dtype=float)
        self._orders = np.asarray(env.order_grid, dtype=float)
        self.ir_scale = max(abs(env.features.ir_clamp[0]), abs(env.features.ir_clamp[1]), 1e-12)
        self.y_scale = max(env.y_cap, 1e-12)
        self.d_scale = max(env.demand.d_max, 1e-12)
        self.o_scale = max(max(env.order_grid), 1e-12)
        self.p_scale = max(env.prices)
        p = self.n_prices
        self.base_dim = 6 + 2 * p + (3 if self.quadratic_order_terms else 0)
        self.dim = self.base_dim + LAG_WIDTH * self.depth
        self.norm_bound = float(np.sqrt(self.dim))
        # kernel-space column weights: stretch inventory, sales, and order
        # axes so a bandwidth unit spans a few grid steps instead of the
        # whole range; distances then resolve the action structure (the
        # order axis needs the most resolution, its cost gradient is gentle)
        ks = np.ones(self.dim)
        ks[3] = ks[4] = 5.0
        ks[5 + p] = 8.0
        for j in range(self.depth):
            base = self.base_dim + LAG_WIDTH * j
            ks[base + 2] = ks[base + 3] = 5.0
            ks[base + 5] = 8.0
        self.kernel_scale = ks

    def describe(self) -> dict:
        return {"depth": self.depth, "dim": self.dim,
                "quadratic_order_terms": self.quadratic_order_terms,
                "n_prices": self.n_prices}

    def _base_columns(self, ir, se, y, z_prev):
        n = len(ir)
        out = np.empty((n, 5))
        out[:, 0] = 1.0
        out[:, 1] = ir / self.ir_scale
        out[:, 2] = se
        out[:, 3] = y / self.y_scale
        out[:, 4] = z_prev / self.d_scale
        return out

    def _lag_columns(self, lag: dict, n: int):
        if self.depth == 0:
            return np.empty((n, 0))
        cols = np.empty((n, LAG_WIDTH * self.depth))
        for j in range(self.depth):
            base = LAG_WIDTH * j
            cols[:, base + 0] = lag["ir"][j] / self.ir_scale
            cols[:, base + 1] = lag["se"][j]
            cols[:, base + 2] = lag["y"][j] / self.y_scale
            cols[:, base + 3] = lag["z_prev"][j] / self.d_scale
            cols[:, base + 4] = lag["p"][j] / self.p_scale
            cols[:, base + 5] = lag["o"][j] / self.o_scale
        return cols

    def featurize_batch(self, ir, se, y, z_prev, lag: dict, p_idx, o) -> np.ndarray:
        """Feature matrix (n, dim) for explicit per-row actions."""
        ir, se = np.asarray(ir, float), np.asarray(se, float)
        y, z_prev = np.asarray(y, float), np.asarray(z_prev, float)
        p_idx = np.asarray(p_idx, int)
        o = np.asarray(o, float)
        n = len(ir)
        p = self.n_prices
        out = np.zeros((n, self.dim))
        out[:, :5] = self._base_columns(ir, se, y, z_prev)
        out[np.arange(n), 5 + p_idx] = 1.0
        out[:, 5 + p] = o / self.o_scale
        z_s = z_prev / self.d_scale
        out[np.arange(n), 6 + p + p_idx] = z_s
        col = 6 + 2 * p
        if self.quadratic_order_terms:
            o_s = o / self.o_scale
            out[:, col] = o_s ** 2
            out[:, col + 1] = o_s * (y / self.y_scale)
            out[:, col + 2] = o_s * z_s
            col += 3
        out[:, col:] = self._lag_columns(lag, n)
        return out

    def features_all_actions(self, ir, se, y, z_prev, lag: dict) -> np.ndarray:
        """Feature tensor (n, n_actions, dim), actions enumerated price-major."""
        ir, se = np.asarray(ir, float), np.asarray(se, float)
        y, z_prev = np.asarray(y, float), np.asarray(z_prev, float)
        n = len(ir)
        p, n_o = self.n_prices, len(self._orders)
        n_a = p * n_o
        out = np.zeros((n, n_a, self.dim))
        out[:, :, :5] = self._base_columns(ir, se, y, z_prev)[:, None, :]
        a_pidx = np.repeat(np.arange(p), n_o)
        a_o = np.tile(self._orders, p)
        out[:, np.arange(n_a), 5 + a_pidx] = 1.0
        out[:, :, 5 + p] = (a_o / self.o_scale)[None, :]
        z_s = z_prev / self.d_scale
        out[:, np.arange(n_a), 6 + p + a_pidx] = z_s[:, None]
        col = 6 + 2 * p
        if self.quadratic_order_terms:
            o_s = a_o / self.o_scale
            out[:, :, col] = (o_s ** 2)[None, :]
            out[:, :, col + 1] = o_s[None, :] * (y / self.y_scale)[:, None]
            out[:, :, col + 2] = o_s[None, :] * z_s[:, None]
            col += 3
        out[:, :, col:] = self._lag_columns(lag, n)[:, None, :]
        return out

    def featurize(self, depth: int, h: HistoryBlock, p: float, o: float) -> np.ndarray:
        """Single-query feature vector; depth must match this map and the block."""
        if depth != self.depth:
            raise CfqiError(f"feature map is for depth {self.depth}, got query depth {depth}")
        if len(h.lags) != self.depth:
            raise CfqiError(f"history block has {len(h.lags)} lags, expected {self.depth}")
        match = np.isclose(self._prices, p)
        if not match.any():
            raise CfqiError(f"price {p} is not on the configured grid")
        p_idx = int(np.argmax(match))
        lag = {f: np.array([[getattr(s, f)] for s in h.lags]) for f in
               ("ir", "se", "y", "z_prev", "p", "o")}
        return self.featurize_batch(np.array([h.ir]), np.array([h.se]), np.array([h.y]),
                                    np.array([h.z_prev]), lag, np.array([p_idx]),
                                    np.array([o]))[0]


# ---------------------------------------------------------------------------
# Ridge


class RidgeModel:
    """Exact regularized least squares with the regularized covariance kept."""

    def __init__(self, theta: np.ndarray, lam: float, cov: np.ndarray, n_samples: int,
                 sigma_hat: float = 1.0):
        self.theta = theta
        self.lam = float(lam)
        self.cov = cov
        self.n_samples = int(n_samples)
        self.sigma_hat = float(sigma_hat)
        self._chol = scipy.linalg.cho_factor(cov, lower=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.theta

    def leverage(self, X: np.ndarray) -> np.ndarray:
        """phi^T Lambda^-1 phi per row."""
        X = np.atleast_2d(np.asarray(X, float))
        sol = scipy.linalg.cho_solve(self._chol, X.T)
        return np.einsum("ij,ji->i", X, sol)

    def to_dict(self) -> dict:
        return {"type": "ridge", "theta": self.theta.tolist(), "lam": self.lam,
                "cov": self.cov.tolist(), "n_samples": self.n_samples,
                "sigma_hat": self.sigma_hat}

    @staticmethod
    def from_dict(d: dict) -> "RidgeModel":
        return RidgeModel(np.asarray(d["theta"], float), d["lam"],
                          np.asarray(d["cov"], float), d["n_samples"],
                          sigma_hat=d.get("sigma_hat", 1.0))


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float) -> RidgeModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if lam <= 0:
        raise CfqiError("ridge lambda must be > 0")
    if len(X) < 1:
        raise CfqiError("ridge fit needs at least one sample")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise CfqiError("ridge fit got non-finite inputs")
    dim = X.shape[1]
    cov = X.T @ X + lam * np.eye(dim)
    rhs = X.T @ y
    chol = scipy.linalg.cho_factor(cov, lower=True)
    theta = scipy.linalg.cho_solve(chol, rhs)
    # residual scale with the effective degrees of freedom removed, so the
    # leverage-based uncertainty width carries the target's units
    resid = y - X @ theta
    edof = float(np.trace(scipy.linalg.cho_solve(chol, X.T @ X)))
    denom = max(len(X) - edof, 1.0)
    sigma_hat = float(np.sqrt(np.sum(resid ** 2) / denom))
    return RidgeModel(theta=theta, lam=lam, cov=cov, n_samples=len(X),
                      sigma_hat=sigma_hat)


def ridge_empty(dim: int, lam: float) -> RidgeModel:
    """Data-free model: zero predictions, covariance lam*I (maximal uncertainty)."""
    return RidgeModel(theta=np.zeros(dim), lam=lam, cov=lam * np.eye(dim), n_samples=0)


# ---------------------------------------------------------------------------
# Kernel ridge


def _kernel_matrix(kind: str, param: float, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return A @ B.T
    if kind == "rbf":
        sq = (np.sum(A ** 2, axis=1)[:, None] + np.sum(B ** 2, axis=1)[None, :]
              - 2.0 * (A @ B.T))
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * param ** 2))
    if kind == "polynomial":
        return (1.0 + A @ B.T) ** int(param)
    raise CfqiError(f"unknown kernel {kind}")


class KernelRidgeModel:
    def __init__(self, kernel: str, param: float, lam: float, X_support: np.ndarray,
                 alpha: np.ndarray, cv_mse: float | None = None, chol=None,
                 sigma_hat: float = 1.0, uq_support: int | None = None,
                 col_scale: np.ndarray | None = None):
        self.kernel = kernel
        self.param = float(param)
        self.lam = float(lam)
        self.col_scale = None if col_scale is None else np.asarray(col_scale, float)
        self.X_support = X_support  # already in kernel space if col_scale set
        self.alpha = alpha
        self.cv_mse = cv_mse
        self.sigma_hat = float(sigma_hat)
        self.uq_support = uq_support
        self._uq = None  # lazy (X_subset, chol_subset)
        if chol is None:
            G = _kernel_matrix(kernel, param, X_support, X_support)
            chol = scipy.linalg.cho_factor(
                G + lam * np.eye(len(X_support)), lower=True)
        self._chol = chol

    def _to_kernel_space(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return X * self.col_scale if self.col_scale is not None else X

    @property
    def n_samples(self) -> int:
        return len(self.X_support)

    def predict(self, X: np.ndarray) -> np.ndarray:
        K = _kernel_matrix(self.kernel, self.param, self._to_kernel_space(X),
                           self.X_support)
        return K @ self.alpha

    def _uq_basis(self):
        """Support rows (possibly a strided subset) and their Gram factor.

        Dropping support rows only loses conditioning data, so the variance
        from the subset upper-bounds the full-support variance: the width
        stays a valid uncertainty bound while the solve cost drops.
        """
        if self._uq is None:
            n = len(self.X_support)
            if self.uq_support is not None and n > self.uq_support:
                rows = np.unique(np.linspace(0, n - 1, self.uq_support).astype(int))
                Xs = self.X_support[rows]
                G = _kernel_matrix(self.kernel, self.param, Xs, Xs)
                chol = scipy.linalg.cho_factor(G + self.lam * np.eye(len(Xs)), lower=True)
                self._uq = (Xs, chol)
            else:
                self._uq = (self.X_support, self._chol)
        return self._uq

    def posterior_var(self, X: np.ndarray) -> np.ndarray:
        """(k(x,x) - k_x^T (G + lam I)^-1 k_x) / lam per row, clipped at 0."""
        X = self._to_kernel_space(X)
        Xs, chol = self._uq_basis()
        K = _kernel_matrix(self.kernel, self.param, X, Xs)
        sol = scipy.linalg.cho_solve(chol, K.T)
        quad = np.einsum("ij,ji->i", K, sol)
        if self.kernel == "linear":
            kxx = np.sum(X ** 2, axis=1)
        elif self.kernel == "rbf":
            kxx = np.ones(len(X))
        else:
            kxx = (1.0 + np.sum(X ** 2, axis=1)) ** int(self.param)
        return np.maximum(kxx - quad, 0.0) / self.lam

    def to_dict(self) -> dict:
        return {"type": "krr", "kernel": self.kernel, "param": self.param,
                "lam": self.lam, "X_support": self.X_support.tolist(),
                "alpha": self.alpha.tolist(), "sigma_hat": self.sigma_hat,
                "uq_support": self.uq_support,
                "col_scale": None if self.col_scale is None else self.col_scale.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "KernelRidgeModel":
        cs = d.get("col_scale")
        return KernelRidgeModel(d["kernel"], d["param"], d["lam"],
                                np.asarray(d["X_support"], float),
                                np.asarray(d["alpha"], float),
                                sigma_hat=d.get("sigma_hat", 1.0),
                                uq_support=d.get("uq_support"),
                                col_scale=None if cs is None else np.asarray(cs, float))


def _krr_candidates(cfg: KrrConfig):
    for kernel in cfg.kernels:
        if kernel == "rbf":
            params = cfg.bandwidths
        elif kernel == "polynomial":
            params = tuple(float(d) for d in cfg.poly_degrees)
        else:
            params = (0.0,)
        for param in params:
            for lam in cfg.lambdas:
                yield kernel, param, lam


def _krr_solve(kernel: str, param: float, lam: float, X: np.ndarray, y: np.ndarray):
    G = _kernel_matrix(kernel, param, X, X)
    chol = scipy.linalg.cho_factor(G + lam * np.eye(len(X)), lower=True)
    return scipy.linalg.cho_solve(chol, y)


def krr_fit(X: np.ndarray, y: np.ndarray, cfg: KrrConfig,
            col_scale: np.ndarray | None = None) -> KernelRidgeModel:
    """Grid search by k-fold cross-validation, then refit on all data.

    Folds are deterministic strided index sets. Exact CV-score ties go to the
    smallest lambda (grid order breaks any remainder). Fewer samples than
    folds: the first candidate is fit directly, without CV. col_scale, when
    given, stretches columns before kernel evaluation (distances only; the
    fitted function itself is unconstrained).
    """
    X_raw = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(X_raw)) and np.all(np.isfinite(y))):
        raise CfqiError("kernel ridge fit got non-finite inputs")
    n = len(X_raw)
    if n > cfg.max_support:
        keep = np.unique(np.linspace(0, n - 1, cfg.max_support).astype(int))
        X_raw, y = X_raw[keep], y[keep]
        n = len(X_raw)
        log.info("kernel ridge support capped at %d points", n)
    Xk = X_raw * col_scale if col_scale is not None else X_raw

    def build(kernel, param, lam, cv_mse=None, sigma=1.0):
        alpha = _krr_solve(kernel, param, lam, Xk, y)
        model = KernelRidgeModel(kernel, param, lam, Xk, alpha, cv_mse=cv_mse,
                                 sigma_hat=sigma, uq_support=cfg.uq_support,
                                 col_scale=col_scale)
        model._X_raw = X_raw
        return model

    candidates = list(_krr_candidates(cfg))
    if n < cfg.cv_folds:
        kernel, param, lam = candidates[0]
        log.info("only %d samples for %d folds; fitting %s without CV", n, cfg.cv_folds, kernel)
        model = build(kernel, param, lam)
        resid = y - model.predict(X_raw)
        model.sigma_hat = float(np.sqrt(np.mean(resid ** 2))) or 1.0
        return model
    folds = [np.arange(j, n, cfg.cv_folds) for j in range(cfg.cv_folds)]
    best = None
    for idx, (kernel, param, lam) in enumerate(candidates):
        sse, cnt = 0.0, 0
        for hold in folds:
            train = np.setdiff1d(np.arange(n), hold, assume_unique=True)
            alpha = _krr_solve(kernel, param, lam, Xk[train], y[train])
            K = _kernel_matrix(kernel, param, Xk[hold], Xk[train])
            pred = K @ alpha
            sse += float(np.sum((pred - y[hold]) ** 2))
            cnt += len(hold)
        mse = sse / cnt
        key = (mse, lam, idx)
        if best is None or key < best[0]:
            best = (key, kernel, param, lam)
    (mse, _, _), kernel, param, lam = best
    # held-out CV error of the winning candidate doubles as the residual
    # scale for the posterior-variance uncertainty width
    return build(kernel, param, lam, cv_mse=mse, sigma=float(np.sqrt(mse)))


def krr_refit(model: KernelRidgeModel, X: np.ndarray, y: np.ndarray) -> KernelRidgeModel:
    """New dual coefficients under an existing model's hyperparameters.

    When X is the raw array the model was fitted on (the fitted-Q loop
    refits on a fixed design every round), the cached Gram factorization
    is reused.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise CfqiError("kernel ridge refit got non-finite targets")
    if X is getattr(model, "_X_raw", None) or X is model.X_support:
        alpha = scipy.linalg.cho_solve(model._chol, y)
        out = KernelRidgeModel(model.kernel, model.param, model.lam,
                               model.X_support, alpha,
                               chol=model._chol, sigma_hat=model.sigma_hat,
                               uq_support=model.uq_support, col_scale=model.col_scale)
        out._X_raw = getattr(model, "_X_raw", model.X_support)
        return out
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise CfqiError("kernel ridge refit got non-finite inputs")
    Xk = X * model.col_scale if model.col_scale is not None else X
    alpha = _krr_solve(model.kernel, model.param, model.lam, Xk, y)
    out = KernelRidgeModel(model.kernel, model.param, model.lam, Xk, alpha,
                           sigma_hat=model.sigma_hat, uq_support=model.uq_support,
                           col_scale=model.col_scale)
    out._X_raw = X
    return out


# ---------------------------------------------------------------------------
# Uncertainty


def uq_eval(model, beta: float, phi: np.ndarray) -> np.ndarray:
    """Pointwise uncertainty width: beta * sqrt(leverage or posterior variance).

    The multiplier is exactly `beta`; callers that want the width in target
    units fold the fitted noise scale into it (see effective_beta).
    """
    if beta < 0:
        raise CfqiError("beta must be >= 0")
    arr = np.asarray(phi, float)
    phi2 = np.atleast_2d(arr)
    if isinstance(model, RidgeModel):
        vals = beta * np.sqrt(np.maximum(model.leverage(phi2), 0.0))
    elif isinstance(model, KernelRidgeModel):
        vals = beta * np.sqrt(model.posterior_var(phi2))
    else:
        raise CfqiError(f"no uncertainty rule for {type(model).__name__}")
    return float(vals[0]) if arr.ndim == 1 else vals


def effective_beta(model, beta: float) -> float:
    """Width multiplier in target units: the configured beta times the model's
    fitted residual scale. Keeps uq_eval itself scale-free."""
    return beta * float(getattr(model, "sigma_hat", 1.0))


class DesignWidth:
    """Parametric uncertainty width from a regression design: sqrt(phi^T Lambda^-1 phi)
    with Lambda = X^T X + lam I over the training rows.

    Decoupled from the fitted model so a kernel regression can still be
    penalized with the fast parametric width: it shrinks like sqrt(d/n) where
    the design covers and stays order one along unseen coordinates.
    """

    def __init__(self, cov: np.ndarray, lam: float, n_samples: int):
        self.cov = np.asarray(cov, float)
        self.lam = float(lam)
        self.n_samples = int(n_samples)
        self._chol = scipy.linalg.cho_factor(self.cov, lower=True)

    @staticmethod
    def fit(X: np.ndarray, lam: float) -> "DesignWidth":
        X = np.atleast_2d(np.asarray(X, float))
        if lam <= 0:
            raise CfqiError("design width lambda must be > 0")
        cov = X.T @ X + lam * np.eye(X.shape[1])
        return DesignWidth(cov, lam, len(X))

    def width(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        sol = scipy.linalg.cho_solve(self._chol, X.T)
        lev = np.einsum("ij,ji->i", X, sol)
        return np.sqrt(np.maximum(lev, 0.0))

    def to_dict(self) -> dict:
        return {"cov": self.cov.tolist(), "lam": self.lam, "n_samples": self.n_samples}

    @staticmethod
    def from_dict(d: dict) -> "DesignWidth":
        return DesignWidth(np.asarray(d["cov"], float), d["lam"], d["n_samples"])


def model_to_dict(model) -> dict:
    return model.to_dict()


def model_from_dict(d: dict):
    if d["type"] == "ridge":
        return RidgeModel.from_dict(d)
    if d["type"] == "krr":
        return KernelRidgeModel.from_dict(d)
    raise CfqiError(f"unknown model type {d['type']!r}")
