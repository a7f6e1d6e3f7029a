"""Causal survival forest fitting and CATE prediction.

Pipeline: propensity ``e_hat`` (constant or OOB regression forest), censoring
survival ``G_hat(min(Y, h)- | X, W)`` (marginal KM or OOB survival forest),
inverse-probability-of-censoring weights on complete cases, OOB outcome
mean ``m_hat`` fit on the weighted complete cases, then a causal forest on
the orthogonalized residuals ``U - m_hat`` and ``W - e_hat``.

The censoring correction is complete-case IPCW (``score = "ipcw"``); the
censoring-martingale augmentation is not implemented.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import SurvivalDataset, TruncatedOutcome, truncate
from .errors import FingerprintError, FitError, ModelFormatError, ParameterError, PredictionError
from .forest import Forest, ForestParams, fit_regression_forest, grow_forest, oob_predict, write_npz
from .survival import SURVIVAL_MIN_NODE_SIZE, build_grid, censoring_km, fit_survival_forest, predict_survival_before

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
TARGETS = ("rmst", "survival_probability")
CENSORING_MODELS = ("forest", "km")


@dataclass(frozen=True)
class CsfParams:
    horizon: float
    target: str = "rmst"
    # a constant propensity in (0, 1), or None to estimate it with a forest
    w_hat: float | None = None
    censoring_model: str = "forest"
    g_floor: float = 0.05
    num_trees: int = 2000
    nuisance_num_trees: int = 500
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    mtry: int | None = None
    min_node_size: int = 5
    grid_points: int = 50
    seed: int = 42

    def __post_init__(self):
        if not float(self.horizon) > 0:
            raise ParameterError(f"horizon must be positive, got {self.horizon}")
        if self.target not in TARGETS:
            raise ParameterError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.w_hat is not None and not 0.0 < self.w_hat < 1.0:
            raise ParameterError(f"constant w_hat must lie in (0, 1), got {self.w_hat}")
        if self.censoring_model not in CENSORING_MODELS:
            raise ParameterError(
                f"censoring_model must be one of {CENSORING_MODELS}, got {self.censoring_model!r}"
            )
        if not 0.0 < self.g_floor <= 1.0:
            raise ParameterError(f"g_floor must lie in (0, 1], got {self.g_floor}")
        if self.grid_points < 1:
            raise ParameterError("grid_points must be positive")
        # validates the shared forest settings
        self.forest_params("final")

    def forest_params(self, stage: str) -> ForestParams:
        trees = self.num_trees if stage == "final" else self.nuisance_num_trees
        node = self.min_node_size
        if stage == "censoring":
            node = max(node, SURVIVAL_MIN_NODE_SIZE)
        return ForestParams(
            num_trees=trees,
            subsample_fraction=self.subsample_fraction,
            honesty_fraction=self.honesty_fraction,
            mtry=self.mtry,
            min_node_size=node,
            seed=_stage_seed(self.seed, stage),
        )


_STAGES = {"propensity": 1, "censoring": 2, "outcome": 3, "final": 4}


def _stage_seed(seed: int, stage: str) -> int:
    state = np.random.SeedSequence(seed, spawn_key=(_STAGES[stage],)).generate_state(1, np.uint64)
    return int(state[0])


@dataclass(eq=False)
class NuisanceSet:
    e_hat: np.ndarray
    m_hat: np.ndarray
    g_hat_at_u: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(eq=False)
class CsfModel:
    params: CsfParams
    nuisances: NuisanceSet
    final_forest: Forest
    outcome_forest: Forest
    propensity_forest: Forest | None
    censoring_forest: Forest | None
    outcome: np.ndarray
    w: np.ndarray
    dh: np.ndarray
    ipcw: np.ndarray
    u_resid: np.ndarray
    w_resid: np.ndarray
    tau_oob: np.ndarray
    fingerprint: str
    names: tuple
    diagnostics: dict
    score: str = "ipcw"

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def p(self) -> int:
        return self.final_forest.p

    @property
    def x(self) -> np.ndarray:
        return self.final_forest.x

    def model_hash(self) -> str:
        """Digest of every stored array and the parameters; equal for equal fits."""
        h = hashlib.sha256()
        arrays = _model_arrays(self)
        for key in sorted(arrays):
            h.update(key.encode())
            h.update(np.ascontiguousarray(arrays[key]).tobytes())
        return h.hexdigest()


def make_outcome(trunc: TruncatedOutcome, target: str) -> np.ndarray:
    """Outcome whose conditional mean the CATE contrasts.

    ``rmst``: ``min(Y, h)``. ``survival_probability``: indicator that the
    unit was still event-free at ``h``; an observed event at ``y <= h`` gives
    0, anything known to survive past ``h`` gives 1. Values on incomplete
    cases are never used (their weight is zero).
    """
    if target == "rmst":
        return trunc.u.copy()
    if target == "survival_probability":
        return 1.0 - ((trunc.d == 1) & (trunc.y <= trunc.h)).astype(float)
    raise ParameterError(f"unknown target {target!r}")


def ipcw_weights(trunc: TruncatedOutcome, g_hat_at_u, g_floor: float = 0.05) -> np.ndarray:
    """``dh / max(G_hat(min(Y, h)-), g_floor)``; zero exactly on incomplete cases."""
    g = np.asarray(g_hat_at_u, dtype=float)
    if np.any(g <= 0) or np.any(g > 1):
        raise ParameterError("censoring survival values must lie in (0, 1]")
    return trunc.dh / np.maximum(g, g_floor)


def pseudo_outcome(u_resid, w_resid, omega) -> np.ndarray:
    """Splitting labels for one node (the compiled grower recomputes these per node).

    ``rho_i = W~_i (U~_i - W~_i tau_bar) / (sum w W~^2 / sum w)`` with
    ``tau_bar`` the node's weighted orthogonal estimate; children are
    scored by ``sum_c (sum_{i in c} w_i rho_i)^2 / sum_{i in c} w_i``.
    """
    u, wr, om = (np.asarray(a, dtype=float) for a in (u_resid, w_resid, omega))
    s_w = om.sum()
    s_ww = np.sum(om * wr * wr)
    if not s_w > 0 or s_ww <= 1e-12 * s_w:
        raise ParameterError("treatment residuals have no weighted variance in this node")
    tau_bar = np.sum(om * wr * u) / s_ww
    return wr * (u - wr * tau_bar) / (s_ww / s_w)


def _censoring_at_u(ds, trunc, params):
    """G_hat(u-) per unit and the censoring forest (if one was fit).

    The grid only drives log-rank splitting; the weights themselves are
    exact product-limit values at ``u-`` over the raw censoring times.
    """
    n = ds.n
    if np.all(ds.d == 1):
        return np.ones(n), None
    if params.censoring_model == "km":
        curve = censoring_km(ds.y, ds.d)
        return curve.left_limit(trunc.u), None
    grid = build_grid(ds.y, ds.d, params.horizon, params.grid_points)
    xc = np.column_stack([ds.x, ds.w])
    forest = fit_survival_forest(xc, ds.y, 1.0 - ds.d, params.forest_params("censoring"), grid=grid)
    return predict_survival_before(forest, trunc.u), forest


def fit(ds: SurvivalDataset, params: CsfParams) -> CsfModel:
    """Fit nuisances and the final causal forest; all residuals use OOB nuisances."""
    n = ds.n
    trunc = truncate(ds, params.horizon)
    U = make_outcome(trunc, params.target)
    W = ds.w.copy()
    diag = {"n": n, "p": ds.p, "censoring_rate": ds.censoring_rate,
            "complete_cases": int(trunc.dh.sum())}
    if trunc.dh.sum() == 0:
        raise FitError("every unit is censored before the horizon; nothing to fit")

    prop_forest = None
    if params.w_hat is not None:
        e_hat = np.full(n, float(params.w_hat))
    else:
        prop_forest = fit_regression_forest(ds.x, W, params=params.forest_params("propensity"))
        e_hat = oob_predict(prop_forest)
    poor = np.mean((e_hat < 0.01) | (e_hat > 0.99))
    diag["overlap_warning"] = bool(poor > 0.01)
    if diag["overlap_warning"]:
        logger.warning("%.1f%% of propensity estimates fall outside [0.01, 0.99]", 100 * poor)
    if np.any(e_hat <= 0) or np.any(e_hat >= 1):
        e_hat = np.clip(e_hat, 1e-3, 1 - 1e-3)
        diag["propensity_clipped"] = True

    g_at_u, cens_forest = _censoring_at_u(ds, trunc, params)
    complete = trunc.dh == 1
    diag["g_min_before_floor"] = float(g_at_u[complete].min())
    diag["floored_count"] = int(np.sum(complete & (g_at_u < params.g_floor)))
    if diag["floored_count"]:
        logger.info("%d complete cases had G_hat below the floor %.3g",
                    diag["floored_count"], params.g_floor)
    # G_hat can reach zero only for units that are floored anyway
    omega = ipcw_weights(trunc, np.maximum(g_at_u, 1e-300), params.g_floor)

    out_forest = fit_regression_forest(ds.x, U, omega, params.forest_params("outcome"))
    m_hat = oob_predict(out_forest)

    u_res = U - m_hat
    w_res = W - e_hat
    for label, r in (("outcome", u_res), ("treatment", w_res)):
        wm = np.average(r, weights=omega)
        sd = np.sqrt(np.average((r - wm) ** 2, weights=omega))
        diag[f"{label}_residual_mean_over_sd"] = float(wm / sd) if sd > 0 else 0.0
    logger.debug("residual diagnostics: %s", diag)

    final = grow_forest(ds.x, u_res, omega, params.forest_params("final"), "causal", aux=w_res)
    diag["oob_fallbacks"] = int(final.oob_fallbacks().size)

    model = CsfModel(
        params=params,
        nuisances=NuisanceSet(e_hat=e_hat, m_hat=m_hat,
                              g_hat_at_u=np.clip(g_at_u, params.g_floor, 1.0),
                              diagnostics={k: diag[k] for k in ("g_min_before_floor", "floored_count")}),
        final_forest=final, outcome_forest=out_forest, propensity_forest=prop_forest,
        censoring_forest=cens_forest, outcome=U, w=W, dh=trunc.dh, ipcw=omega,
        u_resid=u_res, w_resid=w_res, tau_oob=np.empty(0), fingerprint=ds.fingerprint(),
        names=tuple(ds.names), diagnostics=diag,
    )
    model.tau_oob = _cate(model, None)
    return model


def _cate_stats(model: CsfModel) -> np.ndarray:
    om, wr, ur = model.ipcw, model.w_resid, model.u_resid
    sums = model.final_forest.leaf_sums(np.column_stack([om, om * wr * ur, om * wr * wr]))
    stats = np.zeros((sums.shape[0], 3))
    ok = sums[:, 0] > 0
    stats[ok, 0] = 1.0
    stats[ok, 1] = sums[ok, 1] / sums[ok, 0]
    stats[ok, 2] = sums[ok, 2] / sums[ok, 0]
    return stats


def _cate(model, x_new):
    sums, _ = model.final_forest.accumulate(_cate_stats(model), x_new)
    trees = np.maximum(sums[:, 0], 1.0)
    num = sums[:, 1] / trees
    den = sums[:, 2] / trees
    bad = np.flatnonzero(den < 1e-12)
    if bad.size:
        raise PredictionError(f"CATE undefined for {bad.size} rows (treatment residual "
                              f"variance below 1e-12), first rows {bad[:5].tolist()}", rows=bad)
    return num / den


def predict_cate(model: CsfModel, x=None) -> np.ndarray:
    """CATE estimates; ``x=None`` (or ``"training-oob"``) returns OOB values for training rows.

    Each estimate is ``sum a_i W~_i U~_i / sum a_i W~_i^2`` with ``a`` the
    IPCW-weighted forest kernel at ``x``.
    """
    if x is None or (isinstance(x, str) and x == "training-oob"):
        return model.tau_oob.copy()
    return _cate(model, x)


def check_fingerprint(model: CsfModel, ds: SurvivalDataset) -> None:
    if ds.fingerprint() != model.fingerprint:
        raise FingerprintError(
            "out-of-bag results require the exact training data; the supplied data "
            "does not match the model's training fingerprint"
        )


# persistence ---------------------------------------------------------------------------

_FORESTS = ("final_forest", "outcome_forest", "propensity_forest", "censoring_forest")
_VECTORS = ("outcome", "w", "dh", "ipcw", "u_resid", "w_resid", "tau_oob")


def _model_arrays(model: CsfModel) -> dict:
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "params": asdict(model.params),
        "fingerprint": model.fingerprint,
        "names": list(model.names),
        "diagnostics": model.diagnostics,
        "nuisance_diagnostics": model.nuisances.diagnostics,
        "score": model.score,
        "forests": [f for f in _FORESTS if getattr(model, f) is not None],
    }
    arrays = {"model_meta": np.array(json.dumps(meta, sort_keys=True))}
    for name in _VECTORS:
        arrays[name] = getattr(model, name)
    arrays["e_hat"] = model.nuisances.e_hat
    arrays["m_hat"] = model.nuisances.m_hat
    arrays["g_hat_at_u"] = model.nuisances.g_hat_at_u
    for name in meta["forests"]:
        arrays.update(getattr(model, name).to_arrays(prefix=name + "/"))
    return arrays


def save_model(model: CsfModel, path) -> None:
    write_npz(path, _model_arrays(model))


def load_model(path) -> CsfModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    if "model_meta" not in arrays:
        raise ModelFormatError(f"{path} is not a causal survival forest model")
    meta = json.loads(str(arrays["model_meta"][()]))
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format {meta.get('format_version')}")
    forests = {name: None for name in _FORESTS}
    for name in meta["forests"]:
        forests[name] = Forest.from_arrays(arrays, prefix=name + "/")
    return CsfModel(
        params=CsfParams(**meta["params"]),
        nuisances=NuisanceSet(e_hat=arrays["e_hat"], m_hat=arrays["m_hat"],
                              g_hat_at_u=arrays["g_hat_at_u"],
                              diagnostics=meta["nuisance_diagnostics"]),
        fingerprint=meta["fingerprint"], names=tuple(meta["names"]),
        diagnostics=meta["diagnostics"], score=meta["score"],
        **forests, **{name: arrays[name] for name in _VECTORS},
    )
