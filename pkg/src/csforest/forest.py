"""Honest, subsampled, axis-aligned forests.

One tree grower serves three label kinds: ``regression`` (weighted
variance reduction), ``causal`` (gradient pseudo-outcomes recomputed at
each node) and ``survival`` (log-rank statistic on a time grid). Each tree
draws a subsample without replacement from the positively weighted rows,
splits it into a split half and an estimation half, chooses thresholds on
the split half only and fills its leaves with the estimation half.

Randomness: tree ``t`` uses ``PCG64(SeedSequence(seed, spawn_key=(t,)))``
for its subsample and one 64-bit draw seeding a SplitMix64 stream for
feature sampling inside the compiled grower.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels as K
from .errors import ModelFormatError, ParameterError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
RNG_IDENTITY = "numpy-PCG64/SeedSequence(seed,spawn_key=(tree,))+SplitMix64"

_MODES = {
    "regression": K.MODE_REGRESSION,
    "causal": K.MODE_CAUSAL,
    "survival": K.MODE_LOGRANK,
}

# upper bound on padded node buffer entries held at once while growing
_CHUNK_BUDGET = 4_000_000


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 2000
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    mtry: int | None = None
    min_node_size: int = 5
    seed: int = 42

    def __post_init__(self):
        if int(self.num_trees) != self.num_trees or self.num_trees < 2:
            raise ParameterError(f"num_trees must be an integer >= 2, got {self.num_trees}")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ParameterError(f"subsample_fraction must lie in (0, 1], got {self.subsample_fraction}")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ParameterError(f"honesty_fraction must lie in (0, 1), got {self.honesty_fraction}")
        if self.mtry is not None and (int(self.mtry) != self.mtry or self.mtry < 1):
            raise ParameterError(f"mtry must be a positive integer, got {self.mtry}")
        if int(self.min_node_size) != self.min_node_size or self.min_node_size < 1:
            raise ParameterError(f"min_node_size must be a positive integer, got {self.min_node_size}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is None:
            return min(math.ceil(math.sqrt(p) + 20), p)
        if self.mtry > p:
            raise ParameterError(f"mtry={self.mtry} exceeds the number of covariates {p}")
        return int(self.mtry)

    def replace(self, **changes) -> "ForestParams":
        return ForestParams(**{**asdict(self), **changes})


class Forest:
    """A fitted forest; arrays are flat over all trees.

    Node ``g`` of tree ``t`` lives at ``offsets[t] + local_id``. Leaves have
    ``left == -1`` and own ``est[t, lo:hi]``. ``sub[t]`` lists every
    training row in tree ``t``'s subsample (split half first).
    """

    def __init__(self, *, label_kind, params, x, labels, weights, offsets, feat, thr, left,
                 right, lo, hi, sub, n_split, aux=None, tidx=None, events=None, grid=None):
        self.label_kind = label_kind
        self.params = params
        self.x = x
        self.labels = labels
        self.weights = weights
        self.offsets = offsets
        self.feat = feat
        self.thr = thr
        self.left = left
        self.right = right
        self.lo = lo
        self.hi = hi
        self.sub = sub
        self.n_split = int(n_split)
        self.aux = aux
        self.tidx = tidx
        self.events = events
        self.grid = grid
        self._inbag = None

    @property
    def num_trees(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def est(self) -> np.ndarray:
        return self.sub[:, self.n_split:]

    @property
    def split(self) -> np.ndarray:
        return self.sub[:, : self.n_split]

    @property
    def inbag(self) -> np.ndarray:
        if self._inbag is None:
            self._inbag = K.inbag_matrix(self.sub, self.n)
        return self._inbag

    def tree_nodes(self, t: int) -> slice:
        return slice(self.offsets[t], self.offsets[t + 1])

    def oob_fallbacks(self) -> np.ndarray:
        """Training rows that are in-bag for every tree."""
        return np.flatnonzero(self.inbag.min(axis=0) == 1)

    def _check_x(self, x_new):
        x_new = np.ascontiguousarray(x_new, dtype=float)
        if x_new.ndim == 1:
            x_new = x_new[None, :] if self.p > 1 or x_new.shape[0] == 1 else x_new[:, None]
        if x_new.ndim != 2 or x_new.shape[1] != self.p:
            raise ParameterError(
                f"expected {self.p} covariate columns, got shape {x_new.shape}"
            )
        return x_new

    def accumulate(self, stats, x_new=None):
        """Sum per-leaf ``stats`` rows over trees; OOB over training rows if ``x_new`` is None."""
        if x_new is None:
            xq = self.x
            oob = np.arange(self.n, dtype=np.int64)
            inbag = self.inbag
        else:
            xq = self._check_x(x_new)
            oob = np.full(xq.shape[0], -1, dtype=np.int64)
            inbag = np.zeros((1, 1), dtype=np.uint8)
        sums, used = K.accumulate(self.offsets, self.feat, self.thr, self.left, self.right,
                                  stats, xq, oob, inbag)
        if x_new is None and np.any(used == 0):
            missing = np.flatnonzero(used == 0)
            logger.warning("%d training rows are in-bag for every tree; using all trees",
                           missing.size)
            full, full_used = K.accumulate(self.offsets, self.feat, self.thr, self.left,
                                           self.right, stats, xq[missing],
                                           np.full(missing.size, -1, dtype=np.int64), inbag)
            sums[missing] = full
            used[missing] = full_used
        return sums, used

    def leaf_sums(self, values) -> np.ndarray:
        values = np.ascontiguousarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return K.leaf_sums(self.offsets, self.left, self.lo, self.hi, self.est, values)

    # serialization -----------------------------------------------------------------

    def to_arrays(self, prefix: str = "") -> dict:
        meta = {
            "format_version": FORMAT_VERSION,
            "rng": RNG_IDENTITY,
            "label_kind": self.label_kind,
            "params": asdict(self.params),
            "n_split": self.n_split,
        }
        arrays = {
            "meta": np.array(json.dumps(meta, sort_keys=True)),
            "x": self.x, "labels": self.labels, "weights": self.weights,
            "offsets": self.offsets, "feat": self.feat, "thr": self.thr,
            "left": self.left, "right": self.right, "lo": self.lo, "hi": self.hi,
            "sub": self.sub,
        }
        for name in ("aux", "tidx", "events", "grid"):
            value = getattr(self, name)
            if value is not None:
                arrays[name] = value
        return {prefix + k: v for k, v in arrays.items()}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "") -> "Forest":
        try:
            meta = json.loads(str(arrays[prefix + "meta"][()]))
        except KeyError:
            raise ModelFormatError(f"no forest stored under prefix {prefix!r}") from None
        if meta.get("format_version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported forest format {meta.get('format_version')}")
        if meta.get("rng") != RNG_IDENTITY:
            raise ModelFormatError(f"forest was grown with a different generator: {meta.get('rng')}")
        get = lambda k: arrays[prefix + k] if prefix + k in arrays else None  # noqa: E731
        return cls(
            label_kind=meta["label_kind"],
            params=ForestParams(**meta["params"]),
            n_split=meta["n_split"],
            **{k: get(k) for k in ("x", "labels", "weights", "offsets", "feat", "thr", "left",
                                   "right", "lo", "hi", "sub", "aux", "tidx", "events", "grid")},
        )


def write_npz(path, arrays: dict) -> None:
    """``np.load``-compatible archive with fixed entry timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def save_forest(forest: Forest, path) -> None:
    write_npz(path, forest.to_arrays())


def load_forest(path) -> Forest:
    with np.load(path, allow_pickle=False) as data:
        return Forest.from_arrays({k: data[k] for k in data.files})


def tree_seeds(seed: int, num_trees: int):
    """Per-tree PCG64 generators derived from the forest seed."""
    for t in range(num_trees):
        yield np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(t,))))


def grow_forest(x, labels, weights, params: ForestParams, label_kind: str, *, aux=None,
                tidx=None, events=None, n_bins=0, grid=None) -> Forest:
    """Shared fitting path for all label kinds."""
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 2:
        raise ParameterError(f"x must be a 2-d matrix, got shape {x.shape}")
    n, p = x.shape
    labels = np.ascontiguousarray(labels, dtype=float)
    weights = np.ascontiguousarray(weights, dtype=float)
    if labels.shape != (n,) or weights.shape != (n,):
        raise ParameterError("labels and sample weights must have one entry per row of x")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(labels)):
        raise ParameterError("x and labels must be finite")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ParameterError("sample weights must be finite and nonnegative")
    positive = np.flatnonzero(weights > 0)
    if positive.size == 0:
        raise ParameterError("total sample weight is zero")
    mtry = params.resolve_mtry(p)

    m = positive.size
    n_sub = math.ceil(params.subsample_fraction * m)
    n_split = min(max(int(math.floor(params.honesty_fraction * n_sub)), 1), n_sub - 1)
    if n_sub < 2:
        raise ParameterError("subsample too small to hold both honesty halves")
    T = params.num_trees

    sub = np.empty((T, n_sub), dtype=np.int64)
    seeds = np.empty(T, dtype=np.uint64)
    for t, rng in enumerate(tree_seeds(params.seed, T)):
        sub[t] = positive[rng.permutation(m)[:n_sub]]
        seeds[t] = rng.integers(0, 2**63, dtype=np.uint64)

    aux = np.zeros(n) if aux is None else np.ascontiguousarray(aux, dtype=float)
    tidx_arr = np.zeros(n, dtype=np.int64) if tidx is None else np.ascontiguousarray(tidx, dtype=np.int64)
    ev_arr = np.zeros(n, dtype=np.int64) if events is None else np.ascontiguousarray(events, dtype=np.int64)

    gorder = np.ascontiguousarray(np.argsort(x, axis=0, kind="stable").T)
    max_nodes = 2 * n_split + 1
    chunk = max(1, min(T, _CHUNK_BUDGET // max_nodes))
    parts = {k: [] for k in ("feat", "thr", "left", "right", "lo", "hi")}
    counts_all = np.empty(T, dtype=np.int64)
    for c0 in range(0, T, chunk):
        c1 = min(T, c0 + chunk)
        nc = c1 - c0
        buf = {
            "feat": np.empty((nc, max_nodes), dtype=np.int64),
            "thr": np.empty((nc, max_nodes)),
            "left": np.empty((nc, max_nodes), dtype=np.int64),
            "right": np.empty((nc, max_nodes), dtype=np.int64),
            "lo": np.empty((nc, max_nodes), dtype=np.int64),
            "hi": np.empty((nc, max_nodes), dtype=np.int64),
        }
        split_mat = np.ascontiguousarray(sub[c0:c1, :n_split])
        est_mat = np.ascontiguousarray(sub[c0:c1, n_split:])
        counts = np.empty(nc, dtype=np.int64)
        K.grow_many(x, gorder, labels, weights, aux, tidx_arr, ev_arr, int(n_bins), _MODES[label_kind],
                    split_mat, est_mat, mtry, int(params.min_node_size), seeds[c0:c1],
                    buf["feat"], buf["thr"], buf["left"], buf["right"], buf["lo"], buf["hi"],
                    counts)
        sub[c0:c1, :n_split] = split_mat
        sub[c0:c1, n_split:] = est_mat
        counts_all[c0:c1] = counts
        for k, arr in buf.items():
            parts[k].extend(arr[j, : counts[j]] for j in range(nc))

    offsets = np.zeros(T + 1, dtype=np.int64)
    np.cumsum(counts_all, out=offsets[1:])
    flat = {k: np.concatenate(v) for k, v in parts.items()}
    # child ids become global node ids
    for k in ("left", "right"):
        local = flat[k]
        base = np.repeat(offsets[:-1], counts_all)
        flat[k] = np.where(local >= 0, local + base, -1)

    return Forest(
        label_kind=label_kind, params=params, x=x, labels=labels, weights=weights,
        offsets=offsets, sub=sub, n_split=n_split, aux=None if label_kind != "causal" else aux,
        tidx=tidx, events=events, grid=grid, **flat,
    )


def fit_regression_forest(x, labels, sample_weights=None, params: ForestParams | None = None) -> Forest:
    """Fit a weighted regression forest.

    Rows with zero weight never enter a subsample, so fitting with zero
    weights is equivalent to fitting on the positively weighted rows alone
    (those rows are out-of-bag for every tree).
    """
    params = params or ForestParams()
    labels = np.asarray(labels, dtype=float)
    if sample_weights is None:
        sample_weights = np.ones(labels.shape[0])
    return grow_forest(x, labels, sample_weights, params, "regression")


def _regression_stats(forest: Forest) -> np.ndarray:
    sums = forest.leaf_sums(np.column_stack([forest.weights, forest.weights * forest.labels]))
    stats = np.zeros((sums.shape[0], 2))
    ok = sums[:, 0] > 0
    stats[ok, 0] = 1.0
    stats[ok, 1] = sums[ok, 1] / sums[ok, 0]
    return stats


def predict(forest: Forest, x_new) -> np.ndarray:
    """Average over trees of the weighted mean label in the leaf reached by each row."""
    if forest.label_kind != "regression":
        raise ParameterError(f"predict expects a regression forest, got {forest.label_kind}")
    sums, _ = forest.accumulate(_regression_stats(forest), x_new)
    return sums[:, 1] / sums[:, 0]


def oob_predict(forest: Forest) -> np.ndarray:
    """Out-of-bag predictions for the training rows."""
    if forest.label_kind != "regression":
        raise ParameterError(f"oob_predict expects a regression forest, got {forest.label_kind}")
    sums, _ = forest.accumulate(_regression_stats(forest), None)
    return sums[:, 1] / sums[:, 0]


def kernel_weights(forest: Forest, x, oob_id: int | None = None) -> np.ndarray:
    """Forest kernel weights over training rows for one point.

    ``alpha_i(x)`` is the average over trees of ``w_i 1{i in leaf(x)} / leaf
    weight``; it sums to one. With ``oob_id`` only trees that did not sample
    that training row contribute.
    """
    xrow = forest._check_x(x)
    if xrow.shape[0] != 1:
        raise ParameterError("kernel_weights takes a single point")
    if oob_id is None:
        oid, inbag = -1, np.zeros((1, 1), dtype=np.uint8)
    else:
        oid, inbag = int(oob_id), forest.inbag
    alpha, used = K.kernel_row(forest.offsets, forest.feat, forest.thr, forest.left,
                               forest.right, forest.lo, forest.hi, forest.est, forest.weights,
                               xrow[0], oid, inbag, forest.n)
    if used == 0 and oid >= 0:
        logger.warning("training row %d is in-bag for every tree; using all trees", oid)
        return kernel_weights(forest, x)
    return alpha
