"""Conditional survival estimation and surrogate-reward imputation.

Censored transitions reveal only that demand exceeded inventory. A product-
limit (Kaplan-Meier) estimator of the conditional demand survival function,
fit on sales with the censoring flag as event indicator, turns that one-sided
information into an imputed conditional mean and a surrogate reward, leaving
every transition with a usable reward value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import CostParams, EnvConfig, SurvivalConfig
from .data import OfflineDataset
from .errors import CfqiError, DegenerateTailError

log = logging.getLogger(__name__)


class KmCurve:
    """Product-limit survival step function SF(c) = P(D > c).

    Right-continuous: constant on [t_j, t_{j+1}), dropping at each event time.
    Beyond the largest observation the last value is carried flat; whether that
    tail is actually identified is exposed via `tail_open`.
    """

    def __init__(self, times: np.ndarray, sf_after: np.ndarray, n_obs: float,
                 n_events: float, support_end: float):
        self.times = times
        self.sf_after = sf_after
        self.n_obs = float(n_obs)
        self.n_events = float(n_events)
        self.support_end = float(support_end)
        # piecewise-constant segments for integration: value s[j] on [x[j], x[j+1])
        self._x = np.concatenate([[0.0], times])
        self._s = np.concatenate([[1.0], sf_after])
        seg = self._s[:-1] * np.diff(self._x) if len(times) else np.zeros(0)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def tail_open(self) -> bool:
        """True when survival mass remains at the largest observation."""
        last = self.sf_after[-1] if len(self.sf_after) else 1.0
        return bool(last > 0.0)

    def sf(self, c):
        c_arr = np.asarray(c, dtype=float)
        idx = np.searchsorted(self.times, c_arr, side="right")
        if len(self.times) == 0:
            out = np.ones_like(c_arr)
        else:
            out = np.where(idx == 0, 1.0, self.sf_after[np.maximum(idx - 1, 0)])
        return out if isinstance(c, np.ndarray) else float(out)

    def has_risk(self, c) -> bool:
        return bool(np.all(np.asarray(c) <= self.support_end))

    def _cum_from_zero(self, c):
        c_arr = np.clip(np.asarray(c, dtype=float), 0.0, None)
        j = np.maximum(np.searchsorted(self._x, c_arr, side="right") - 1, 0)
        return self._cum[j] + self._s[j] * (c_arr - self._x[j])

    def integral_above(self, y, upper):
        """Exact integral of the step function over [y, upper]."""
        return self._cum_from_zero(upper) - self._cum_from_zero(y)


def km_fit(z, delta, weights=None) -> KmCurve:
    """Weighted product-limit fit on (sales, event flag).

    delta True means demand fully observed (an event at z); False means
    right-censored at z. Ties: censored observations at an event time stay in
    the risk set for that time.
    """
    z = np.asarray(z, dtype=float)
    delta = np.asarray(delta, dtype=bool)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    if not np.any(keep):
        raise CfqiError("cannot fit a survival curve with no positively weighted data")
    z, delta, w = z[keep], delta[keep], w[keep]
    order = np.argsort(z, kind="stable")
    zs, ds, ws = z[order], delta[order], w[order]
    total = float(ws.sum())
    prefix = np.concatenate([[0.0], np.cumsum(ws)])
    ze, we = zs[ds], ws[ds]
    ev_times = np.unique(ze)
    if len(ev_times):
        we_cum = np.concatenate([[0.0], np.cumsum(we)])
        lo = np.searchsorted(ze, ev_times, side="left")
        hi = np.searchsorted(ze, ev_times, side="right")
        d_t = we_cum[hi] - we_cum[lo]
        n_t = total - prefix[np.searchsorted(zs, ev_times, side="left")]
        factors = 1.0 - d_t / n_t
        sf_after = np.cumprod(np.clip(factors, 0.0, 1.0))
    else:
        sf_after = np.zeros(0)
    return KmCurve(times=ev_times, sf_after=sf_after, n_obs=total,
                   n_events=float(we.sum()), support_end=float(zs[-1]))


@dataclass(frozen=True)
class QueryContext:
    """Conditioning covariates of one censored period."""

    ir: float
    se: int
    p_idx: int
    p: float
    o: float
    delta_prev: bool = True


class SurvivalModel:
    """Conditional survival curves over [0, d_max] with a fallback chain.

    kind km_global: single pooled curve. km_stratified: one curve per
    (price, economy-state) cell, optionally also split on the previous
    period's censoring flag. beran_kernel: per-query Gaussian-weighted
    product-limit over standardized (interest rate, price, order).
    """

    def __init__(self, kind: str, d_max: float, sf_floor: float, global_curve: KmCurve,
                 strata: dict | None = None, usable: dict | None = None,
                 history_keyed: bool = False, beran: dict | None = None):
        self.kind = kind
        self.d_max = float(d_max)
        self.sf_floor = float(sf_floor)
        self.global_curve = global_curve
        self.strata = strata or {}
        self.usable = usable or {}
        self.history_keyed = history_keyed
        self.beran = beran

    def stratum_key(self, p_idx: int, se: int, delta_prev: bool = True):
        if self.history_keyed:
            return (int(p_idx), int(se), bool(delta_prev))
        return (int(p_idx), int(se))

    def query_curve(self, h: QueryContext) -> KmCurve | None:
        """Conditional curve for one query, or None when unavailable."""
        if self.kind == "km_global":
            return self.global_curve
        if self.kind == "km_stratified":
            key = self.stratum_key(h.p_idx, h.se, h.delta_prev)
            if self.usable.get(key, False):
                return self.strata[key]
            return None
        cell = self.beran.get(int(h.se)) if self.beran else None
        if cell is None:
            return None
        q = (np.array([h.ir, h.p, h.o]) - cell["mean"]) / cell["sd"]
        dist2 = ((cell["cov"] - q) / cell["bw"]) ** 2
        w = np.exp(-0.5 * dist2.sum(axis=1))
        if w.sum() <= 1e-12:
            return None
        curve = km_fit(cell["z"], cell["delta"], weights=w)
        return curve if curve.n_events > 0 else None


def fit_survival(ds: OfflineDataset, cfg: SurvivalConfig, d_max: float) -> SurvivalModel:
    """Fit the configured conditional survival estimator on an offline dataset."""
    if len(ds) == 0:
        raise CfqiError("cannot fit a survival model on an empty dataset")
    c = ds.cols
    z, delta = c["z"], c["delta"]
    global_curve = km_fit(z, delta)
    if cfg.kind == "km_global":
        return SurvivalModel("km_global", d_max, cfg.sf_floor, global_curve)
    if cfg.kind == "km_stratified":
        p_idx = c["p_idx"].astype(np.int64)
        se = c["se"].astype(np.int64)
        if cfg.condition_on_history:
            keys = list(zip(p_idx.tolist(), se.tolist(), c["delta_prev"].astype(bool).tolist()))
        else:
            keys = list(zip(p_idx.tolist(), se.tolist()))
        strata: dict = {}
        usable: dict = {}
        for key in sorted(set(keys)):
            mask = np.fromiter((k == key for k in keys), dtype=bool, count=len(keys))
            curve = km_fit(z[mask], delta[mask])
            strata[key] = curve
            usable[key] = curve.n_events > 0
        return SurvivalModel("km_stratified", d_max, cfg.sf_floor, global_curve,
                             strata=strata, usable=usable,
                             history_keyed=cfg.condition_on_history)
    # beran_kernel: exact split on the economy state, kernel weights on the rest
    beran: dict = {}
    se_int = c["se"].astype(np.int64)
    for cell_se in np.unique(se_int):
        mask = se_int == cell_se
        cov = np.column_stack([c["ir"][mask], c["p"][mask], c["o"][mask]])
        mean = cov.mean(axis=0)
        sd = cov.std(axis=0)
        sd[sd == 0] = 1.0
        n = int(mask.sum())
        bw = np.full(3, 1.06 * n ** (-0.2) * cfg.beran_bandwidth_scale)
        beran[int(cell_se)] = {"z": z[mask].copy(), "delta": delta[mask].copy(),
                               "cov": (cov - mean) / sd, "mean": mean, "sd": sd, "bw": bw}
    return SurvivalModel("beran_kernel", d_max, cfg.sf_floor, global_curve, beran=beran)


def _cond_mean_from_curve(curve: KmCurve, y: float, d_max: float, floor: float) -> float:
    if y >= d_max:
        # demand is squeezed into (y, d_max]; nothing to estimate
        return float(d_max)
    if y > curve.support_end:
        raise DegenerateTailError(f"no observations at risk beyond {curve.support_end:g} (queried {y:g})")
    sf_y = curve.sf(float(y))
    if sf_y <= floor:
        raise DegenerateTailError(f"survival at the censoring point is {sf_y:.2e} (floor {floor:.0e})")
    mean = y + curve.integral_above(float(y), d_max) / sf_y
    return float(min(max(mean, y), d_max))


def conditional_mean_censored(model: SurvivalModel, y: float, h: QueryContext) -> float:
    """Expected demand given that it exceeded inventory y, per the fitted model."""
    curve = model.query_curve(h)
    if curve is None:
        raise DegenerateTailError("no usable conditional curve for this query")
    return _cond_mean_from_curve(curve, float(y), model.d_max, model.sf_floor)


@dataclass
class ImputeReport:
    n_transitions: int
    n_censored: int
    conditional_hits: int
    global_fallbacks: int
    midpoint_fallbacks: int

    def as_dict(self) -> dict:
        return {"n_transitions": self.n_transitions, "n_censored": self.n_censored,
                "conditional_hits": self.conditional_hits,
                "global_fallbacks": self.global_fallbacks,
                "midpoint_fallbacks": self.midpoint_fallbacks}


class AugmentedDataset(OfflineDataset):
    """Offline dataset with a complete surrogate-reward column r_star."""

    def _validate(self) -> None:
        super()._validate()
        if "r_star" not in self.cols:
            raise CfqiError("augmented dataset missing r_star")
        r_star = self.cols["r_star"]
        if not np.all(np.isfinite(r_star)):
            raise CfqiError("r_star must be finite everywhere")
        delta = self.cols["delta"]
        if not np.array_equal(r_star[delta], self.cols["r_obs"][delta]):
            raise CfqiError("r_star must equal r_obs exactly on uncensored transitions")

    def subset_trajectories(self, n: int) -> "AugmentedDataset":
        base = super().subset_trajectories(n)
        return AugmentedDataset(base.cols, base.n_traj, base.horizon, base.meta)


def as_augmented(ds: OfflineDataset) -> AugmentedDataset:
    """Rewrap a dataset that already carries r_star (e.g. loaded from disk)."""
    if "r_star" not in ds.cols:
        raise CfqiError("dataset has no r_star column; run impute first")
    return AugmentedDataset(dict(ds.cols), ds.n_traj, ds.horizon, dict(ds.meta))


def _curve_batch_means(curve: KmCurve, y: np.ndarray, d_max: float, floor: float):
    """Vectorized conditional means over one curve; invalid entries flagged."""
    at_cap = y >= d_max
    in_support = (y <= curve.support_end) & ~at_cap
    sf_y = np.asarray(curve.sf(y))
    valid = at_cap | (in_support & (sf_y > floor))
    means = np.full(len(y), np.nan)
    means[at_cap] = d_max
    ok = in_support & (sf_y > floor)
    if np.any(ok):
        integral = curve.integral_above(y[ok], d_max)
        means[ok] = np.clip(y[ok] + integral / sf_y[ok], y[ok], d_max)
    return means, valid


def impute(ds: OfflineDataset, model: SurvivalModel, costs: CostParams) -> AugmentedDataset:
    """Fill censored rewards with the survival-based surrogate.

    Uncensored transitions keep r_obs bit-exactly. Censored ones get
    p*z - stockout*(E[D | D > y, context] - y) - ordering*o; the holding term
    is structurally zero because demand exceeded inventory. Fallbacks walk
    conditional curve -> pooled curve -> midpoint, and are counted.
    """
    c = ds.cols
    delta = c["delta"]
    cens = np.flatnonzero(~delta)
    est = np.full(len(cens), np.nan)
    resolved = np.zeros(len(cens), dtype=bool)

    y_c = c["y"][cens]
    if model.kind == "km_global":
        pass  # conditional stage and pooled stage coincide; handled below
    elif model.kind == "km_stratified":
        p_idx = c["p_idx"][cens].astype(np.int64)
        se = c["se"][cens].astype(np.int64)
        dp = c["delta_prev"][cens].astype(bool)
        keys = [model.stratum_key(p_idx[i], se[i], dp[i]) for i in range(len(cens))]
        for key in sorted(set(keys)):
            mask = np.fromiter((k == key for k in keys), dtype=bool, count=len(keys))
            if not model.usable.get(key, False):
                continue
            means, valid = _curve_batch_means(model.strata[key], y_c[mask], model.d_max, model.sf_floor)
            idx = np.flatnonzero(mask)[valid]
            est[idx] = means[valid]
            resolved[idx] = True
    else:  # beran_kernel: per-query weighted fit
        for j, row in enumerate(cens):
            h = QueryContext(ir=float(c["ir"][row]), se=int(c["se"][row]),
                             p_idx=int(c["p_idx"][row]), p=float(c["p"][row]),
                             o=float(c["o"][row]), delta_prev=bool(c["delta_prev"][row]))
            curve = model.query_curve(h)
            if curve is None:
                continue
            try:
                est[j] = _cond_mean_from_curve(curve, float(y_c[j]), model.d_max, model.sf_floor)
                resolved[j] = True
            except DegenerateTailError:
                continue
    hits = int(resolved.sum())

    todo = ~resolved
    if np.any(todo):
        means, valid = _curve_batch_means(model.global_curve, y_c[todo], model.d_max, model.sf_floor)
        if model.global_curve.n_events == 0:
            valid = np.zeros_like(valid)
        idx = np.flatnonzero(todo)[valid]
        est[idx] = means[valid]
        resolved[idx] = True
    global_fb = int(resolved.sum()) - hits

    todo = ~resolved
    est[todo] = (y_c[todo] + model.d_max) / 2.0
    midpoint_fb = int(todo.sum())

    r_star = c["r_obs"].copy()
    r_star[cens] = (c["p"][cens] * c["z"][cens]
                    - costs.stockout * (est - y_c)
                    - costs.ordering * c["o"][cens])
    report = ImputeReport(n_transitions=len(ds), n_censored=len(cens),
                          conditional_hits=hits, global_fallbacks=global_fb,
                          midpoint_fallbacks=midpoint_fb)
    if midpoint_fb:
        log.info("imputation fell back to the midpoint on %d of %d censored transitions",
                 midpoint_fb, len(cens))
    cols = dict(c)
    cols["r_star"] = r_star
    aug = AugmentedDataset(cols, ds.n_traj, ds.horizon, dict(ds.meta))
    aug.impute_report = report
    return aug


def r_max_bound(env: EnvConfig) -> float:
    """Conservative uniform reward bound from the grids, costs, and demand cap."""
    d_max = env.demand.d_max
    revenue = max(abs(p) * d_max for p in env.prices)
    return (revenue + env.costs.stockout * d_max
            + env.costs.ordering * max(env.order_grid)
            + env.costs.holding * env.y_cap)
