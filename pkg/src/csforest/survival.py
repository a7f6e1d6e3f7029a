"""Survival curves on a discrete time grid.

A curve is a right-continuous step function equal to one before the first
grid point. A unit is at risk at grid point ``t_k`` when its time is
``>= t_k``, and an event counts at the last grid point at or before its
time (so tied censorings stay in the risk set, and for the censoring curve
tied events do). Events before the first grid point act at a pseudo point
at time zero; times beyond the last grid point are at risk everywhere and
never count. With the grid set to the distinct event times this is
exactly the product-limit estimator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ParameterError
from .forest import Forest, ForestParams, grow_forest

DEFAULT_GRID_POINTS = 50
# survival leaves hold a whole curve, so they need more units than a mean does
SURVIVAL_MIN_NODE_SIZE = 15


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size == 0 or np.any(pts <= 0) or np.any(np.diff(pts) <= 0):
            raise ParameterError("grid points must be positive and strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.size

    @property
    def n_slots(self) -> int:
        """Slots used by the compiled kernels: a pseudo point at zero plus the grid."""
        return self.points.size + 1

    def bin(self, times) -> np.ndarray:
        """Kernel slot per time: the number of grid points ``<= t`` (``len + 1`` beyond the grid).

        A unit in slot ``s`` is at risk at slot ``j`` when ``s >= j`` and its
        event, if any, counts at slot ``s``; slot 0 is the pseudo point.
        """
        times = np.asarray(times, dtype=float)
        slots = np.searchsorted(self.points, times, side="right")
        return np.where(times > self.points[-1], self.points.size + 1, slots)


def build_grid(times, events, h: float | None = None, max_points: int = DEFAULT_GRID_POINTS) -> TimeGrid:
    """Grid at equally spaced quantiles of the event times truncated at ``h``.

    Uses every distinct event time when there are at most ``max_points`` of
    them. The last point is always ``h`` (or the largest event time when
    ``h`` is None).
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if max_points < 1:
        raise ParameterError("max_points must be positive")
    ev_times = times[events == 1]
    if h is not None:
        if not h > 0:
            raise ParameterError(f"horizon must be positive, got {h}")
        ev_times = np.minimum(ev_times, h)
    ev_times = np.unique(ev_times[ev_times > 0])
    if ev_times.size == 0:
        if h is None:
            raise ParameterError("no event times to build a grid from")
        return TimeGrid(np.array([float(h)]))
    k = min(max_points, ev_times.size)
    if k < ev_times.size:
        pts = np.unique(np.quantile(ev_times, np.linspace(0.0, 1.0, k), method="lower"))
    else:
        pts = ev_times
    if h is not None and pts[-1] < h:
        pts = np.append(pts, h) if pts.size < max_points else np.append(pts[:-1], h)
    return TimeGrid(pts)


@dataclass(frozen=True, eq=False)
class StepFunction:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.shape[0] != len(self.grid):
            raise ParameterError("one value per grid point required")
        object.__setattr__(self, "values", vals)

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.grid.points, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.values])[idx]

    def left_limit(self, t) -> np.ndarray:
        """Value just before ``t``: product over grid points strictly below ``t``."""
        idx = np.searchsorted(self.grid.points, np.asarray(t, dtype=float), side="left")
        return np.concatenate([[1.0], self.values])[idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "value"])
            for t, v in zip(self.grid.points, self.values):
                out.writerow([repr(float(t)), repr(float(v))])


def _check_inputs(times, events, weights):
    times = np.asarray(times, dtype=float).ravel()
    events = np.asarray(events, dtype=float).ravel()
    weights = np.ones_like(times) if weights is None else np.asarray(weights, dtype=float).ravel()
    if not (times.shape == events.shape == weights.shape):
        raise ParameterError("times, events and weights must have equal length")
    if np.any(weights < 0):
        raise ParameterError("weights must be nonnegative")
    if not weights.sum() > 0:
        raise ParameterError("total weight is zero")
    return times, events, weights


def kaplan_meier(times, events, weights=None, grid: TimeGrid | None = None) -> StepFunction:
    """Weighted product-limit estimate evaluated on ``grid``.

    Defaults to the grid of all distinct event times.
    """
    times, events, weights = _check_inputs(times, events, weights)
    if grid is None:
        grid = build_grid(times, events, max_points=np.iinfo(np.int64).max)
    k = grid.n_slots
    bins = grid.bin(times)
    cnt = np.bincount(bins, weights=weights, minlength=k + 1).astype(float)
    hit = (events == 1) & (bins < k)
    dth = np.bincount(bins[hit], weights=weights[hit], minlength=k + 1).astype(float)
    return StepFunction(grid, K.product_limit(cnt, dth, k)[1:])


def censoring_km(times, d, weights=None, grid: TimeGrid | None = None) -> StepFunction:
    """Survival curve of the censoring process (event indicator ``1 - d``)."""
    times, d, weights = _check_inputs(times, d, weights)
    return kaplan_meier(times, 1.0 - d, weights, grid)


def fit_survival_forest(x, y, d, params: ForestParams | None = None, grid: TimeGrid | None = None,
                        h: float | None = None) -> Forest:
    """Survival forest split on the standardized log-rank statistic.

    Splits are scored on the discretized grid; a candidate needs
    ``min_node_size`` units and at least one grid event on each side. Without
    explicit ``params`` the minimum node size is ``SURVIVAL_MIN_NODE_SIZE``.
    """
    params = params or ForestParams(min_node_size=SURVIVAL_MIN_NODE_SIZE)
    y = np.asarray(y, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    if np.any((d != 0) & (d != 1)):
        raise ParameterError("event indicator must be 0/1")
    if grid is None:
        grid = build_grid(y, d, h)
    tidx = grid.bin(y).astype(np.int64)
    return grow_forest(x, y, np.ones_like(y), params, "survival", tidx=tidx,
                       events=d.astype(np.int64), n_bins=grid.n_slots, grid=grid.points)


def forest_grid(forest: Forest) -> TimeGrid:
    if forest.label_kind != "survival":
        raise ParameterError(f"expected a survival forest, got {forest.label_kind}")
    return TimeGrid(forest.grid)


def predict_survival_curves(forest: Forest, x_new=None) -> np.ndarray:
    """Kernel-weighted product-limit values, one row per query (OOB when ``x_new`` is None)."""
    grid = forest_grid(forest)
    if x_new is None:
        xq = forest.x
        oob = np.arange(forest.n, dtype=np.int64)
        inbag = forest.inbag
    else:
        xq = forest._check_x(x_new)
        oob = np.full(xq.shape[0], -1, dtype=np.int64)
        inbag = np.zeros((1, 1), dtype=np.uint8)
    curves, used = K.survival_curves(forest.offsets, forest.feat, forest.thr, forest.left,
                                     forest.right, forest.lo, forest.hi, forest.est,
                                     forest.weights, forest.tidx, forest.events, grid.n_slots,
                                     xq, oob, inbag)
    curves = curves[:, 1:]
    if x_new is None and np.any(used == 0):
        missing = np.flatnonzero(used == 0)
        curves[missing] = predict_survival_curves(forest, xq[missing])
    return curves


def predict_survival(forest: Forest, x, grid: TimeGrid | None = None, oob_id: int | None = None) -> StepFunction:
    """Survival curve at a single point.

    With ``oob_id`` the curve for that training row uses only trees that did
    not sample it. If ``grid`` differs from the forest grid the step
    function is re-evaluated on it.
    """
    if oob_id is None:
        vals = predict_survival_curves(forest, np.atleast_2d(x))[0]
    else:
        vals = _oob_curve(forest, int(oob_id))
    curve = StepFunction(forest_grid(forest), vals)
    if grid is None:
        return curve
    return StepFunction(grid, curve(grid.points))


def _oob_curve(forest, i):
    grid = forest_grid(forest)
    curves, used = K.survival_curves(forest.offsets, forest.feat, forest.thr, forest.left,
                                     forest.right, forest.lo, forest.hi, forest.est,
                                     forest.weights, forest.tidx, forest.events, grid.n_slots,
                                     forest.x[i: i + 1], np.array([i], dtype=np.int64), forest.inbag)
    if used[0] == 0:
        return predict_survival_curves(forest, forest.x[i: i + 1])[0]
    return curves[0, 1:]


def predict_survival_before(forest: Forest, t, x_new=None) -> np.ndarray:
    """Exact kernel-weighted product-limit value at ``t[r]-`` for each query row.

    Unlike the grid curves this uses every distinct training time, so it is
    suitable for weights evaluated at arbitrary times (OOB when ``x_new`` is
    None, in which case ``t`` has one entry per training row).
    """
    forest_grid(forest)
    if x_new is None:
        xq = forest.x
        oob = np.arange(forest.n, dtype=np.int64)
        inbag = forest.inbag
    else:
        xq = forest._check_x(x_new)
        oob = np.full(xq.shape[0], -1, dtype=np.int64)
        inbag = np.zeros((1, 1), dtype=np.uint8)
    t = np.ascontiguousarray(np.broadcast_to(np.asarray(t, dtype=float), (xq.shape[0],)))
    vals, used = K.survival_at(forest.offsets, forest.feat, forest.thr, forest.left,
                               forest.right, forest.lo, forest.hi, forest.est, forest.weights,
                               forest.labels, forest.events, xq, t, oob, inbag)
    if x_new is None and np.any(used == 0):
        missing = np.flatnonzero(used == 0)
        vals[missing] = predict_survival_before(forest, t[missing], xq[missing])
    return vals


def rmst(curve: StepFunction, h: float) -> float:
    """Exact area under the step function on ``[0, h]``; flat beyond the last grid point."""
    h = float(h)
    if not h > 0:
        raise ParameterError(f"horizon must be positive, got {h}")
    knots = np.concatenate([[0.0], np.minimum(curve.grid.points, h), [h]])
    heights = np.concatenate([[1.0], curve.values])
    return float(np.sum(np.diff(knots) * heights))
