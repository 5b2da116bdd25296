"""Censoring-run arithmetic: depth estimation and the per-depth partition.

The depth of a transition is the number of consecutive censored periods
immediately preceding it. Transitions are grouped by depth into buckets whose
elements carry the full lagged history block, ready for featurization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CfqiError, ConsistencyError

_LAG_FIELDS = ("ir", "se", "y", "z_prev", "p", "o")


@dataclass(frozen=True)
class RunLengthProfile:
    """Longest censored run per window start, and the global maximum."""

    window_maxima: dict
    n_hat: int
    window_k: int


def run_length_profile(ds, window_k: int) -> RunLengthProfile:
    if len(ds) == 0:
        raise CfqiError("cannot estimate censoring depth on an empty dataset")
    t_steps = ds.horizon - 1
    if not 1 <= window_k <= ds.horizon:
        raise CfqiError(f"window_k must lie in [1, {ds.horizon}], got {window_k}")
    delta = ds.delta_matrix()
    censored = ~delta
    maxima: dict[int, int] = {}
    best = 0
    for start in range(t_steps):
        # run length starting exactly at `start`, per trajectory, capped by window
        limit = min(window_k, t_steps - start)
        block = censored[:, start:start + limit]
        all_prefix = np.cumprod(block, axis=1)
        longest = int(all_prefix.sum(axis=1).max())
        maxima[start] = longest
        best = max(best, longest)
    return RunLengthProfile(window_maxima=maxima, n_hat=best, window_k=window_k)


def estimate_n_hat(ds, window_k: int) -> int:
    """Longest fully censored run across trajectories, capped at window_k."""
    return run_length_profile(ds, window_k).n_hat


@dataclass
class DepthBucket:
    """All usable transitions preceded by exactly `depth` censored periods.

    Arrays are aligned along axis 0 (n elements). Lag arrays have shape
    (depth, n): row j-1 holds the observation/action at time t-j.
    """

    depth: int
    row_index: np.ndarray
    ir: np.ndarray
    se: np.ndarray
    y: np.ndarray
    z_prev: np.ndarray
    p: np.ndarray
    o: np.ndarray
    p_idx: np.ndarray
    o_idx: np.ndarray
    r_star: np.ndarray
    delta: np.ndarray
    z: np.ndarray
    ir_next: np.ndarray
    se_next: np.ndarray
    y_next: np.ndarray
    lag_ir: np.ndarray
    lag_se: np.ndarray
    lag_y: np.ndarray
    lag_z_prev: np.ndarray
    lag_p: np.ndarray
    lag_o: np.ndarray

    @property
    def n(self) -> int:
        return len(self.row_index)


@dataclass
class DepthPartition:
    buckets: list
    n_hat: int
    discarded: int
    total_usable: int

    def bucket_sizes(self) -> list:
        return [b.n for b in self.buckets]


def compute_depths(aug) -> tuple:
    """Per-transition censoring depth and usability mask.

    Returns (depth, usable) flat arrays over all transitions. A transition is
    unusable when its censored run reaches back past the recorded start of the
    trajectory with no uncensored anchor (only possible in externally produced
    files; generated data starts every trajectory with an uncensored anchor by
    convention).
    """
    n_traj, t_steps = aug.n_traj, aug.horizon - 1
    delta = aug.delta_matrix()
    delta_prev0 = aug.cols["delta_prev"].reshape(n_traj, t_steps)[:, 0].astype(bool)
    depth = np.zeros((n_traj, t_steps), dtype=np.int64)
    usable = np.ones((n_traj, t_steps), dtype=bool)
    run = np.zeros(n_traj, dtype=np.int64)
    anchored = delta_prev0.copy()
    for t in range(t_steps):
        depth[:, t] = run
        usable[:, t] = anchored
        ended = delta[:, t]
        run = np.where(ended, 0, run + 1)
        anchored = anchored | ended
    return depth.reshape(-1), usable.reshape(-1)


def partition(aug, n_hat: int) -> DepthPartition:
    """Group transitions into depth buckets 0..n_hat with full history blocks.

    A usable transition deeper than n_hat, or at depth n_hat while itself
    censored, contradicts n_hat having been estimated on this dataset.
    """
    if "r_star" not in aug.cols:
        raise CfqiError("partition needs an augmented dataset with r_star (run impute first)")
    if n_hat < 0:
        raise CfqiError(f"n_hat must be nonnegative, got {n_hat}")
    depth, usable = compute_depths(aug)
    c = aug.cols
    delta = c["delta"]
    too_deep = usable & (depth > n_hat)
    if np.any(too_deep):
        worst = int(depth[too_deep].max())
        raise ConsistencyError(
            f"found a transition at censoring depth {worst} but n_hat={n_hat}; "
            "n_hat was not estimated on this dataset or the window cap clipped a run")
    deep_censored = usable & (depth == n_hat) & ~delta
    if np.any(deep_censored):
        raise ConsistencyError(
            f"found a censored transition already at depth n_hat={n_hat}; its successor "
            "would exceed n_hat, so n_hat is inconsistent with this dataset")

    buckets = []
    total = 0
    for i in range(n_hat + 1):
        rows = np.flatnonzero(usable & (depth == i))
        total += len(rows)
        # depth <= t within a trajectory, so row - j stays inside the trajectory
        lag = {f: np.empty((i, len(rows))) for f in _LAG_FIELDS}
        for j in range(1, i + 1):
            prev = rows - j
            if len(rows):
                assert not np.any(delta[prev]), "lagged step inside a block must be censored"
            for f in _LAG_FIELDS:
                lag[f][j - 1] = c[f][prev]
        buckets.append(DepthBucket(
            depth=i, row_index=rows,
            ir=c["ir"][rows], se=c["se"][rows], y=c["y"][rows], z_prev=c["z_prev"][rows],
            p=c["p"][rows], o=c["o"][rows],
            p_idx=c["p_idx"][rows], o_idx=c["o_idx"][rows],
            r_star=c["r_star"][rows], delta=delta[rows], z=c["z"][rows],
            ir_next=c["ir_next"][rows], se_next=c["se_next"][rows], y_next=c["y_next"][rows],
            lag_ir=lag["ir"], lag_se=lag["se"], lag_y=lag["y"],
            lag_z_prev=lag["z_prev"], lag_p=lag["p"], lag_o=lag["o"]))
    discarded = int(np.count_nonzero(~usable))
    return DepthPartition(buckets=buckets, n_hat=n_hat, discarded=discarded,
                          total_usable=total)
