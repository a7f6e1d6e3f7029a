"""Doubly robust downstream inference on a fitted causal survival forest."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ParameterError, RankDeficiencyError


@dataclass(eq=False)
class DrScores:
    gamma: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float).ravel()
        if not np.all(np.isfinite(self.gamma)):
            raise ParameterError("doubly robust scores must be finite")

    def __len__(self):
        return self.gamma.shape[0]


@dataclass(frozen=True)
class Estimate:
    estimate: float
    std_err: float

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "std_err": self.std_err}


@dataclass(frozen=True)
class Coefficient:
    name: str
    estimate: float
    std_error: float
    t_value: float
    p_value: float


@dataclass(frozen=True)
class BlpResult:
    coefficients: tuple[Coefficient, ...]

    def __getitem__(self, name) -> Coefficient:
        for c in self.coefficients:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {c.name: {"estimate": c.estimate, "std_error": c.std_error,
                         "t_value": c.t_value, "p_value": c.p_value}
                for c in self.coefficients}

    def table(self) -> str:
        width = max(len(c.name) for c in self.coefficients)
        lines = [
            "Best linear projection of the conditional average treatment effect.",
            "Confidence intervals are heteroskedasticity-robust (HC3):",
            "",
            f"{'':<{width}} {'Estimate':>10} {'Std. Error':>10} {'t value':>7} {'Pr(>|t|)':>8}",
        ]
        for c in self.coefficients:
            lines.append(
                f"{c.name:<{width}} {c.estimate:>10.3f} {c.std_error:>10.3f} "
                f"{c.t_value:>7.2f} {_format_p(c.p_value):>8} {significance_stars(c.p_value)}".rstrip()
            )
        lines.append("---")
        lines.append("Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1")
        return "\n".join(lines)


@dataclass(eq=False)
class TocCurve:
    q_grid: np.ndarray
    toc_values: np.ndarray
    overall_ate: float


@dataclass(eq=False)
class RateResult:
    autoc_estimate: float
    std_err: float
    n_bootstrap: int
    toc: TocCurve
    # bootstrap standard errors of TOC on a thinned grid, for plotting
    toc_se_q: np.ndarray = field(default_factory=lambda: np.empty(0))
    toc_se: np.ndarray = field(default_factory=lambda: np.empty(0))

    def to_dict(self) -> dict:
        return {"estimate": self.autoc_estimate, "std_err": self.std_err,
                "n_bootstrap": self.n_bootstrap, "target": "AUTOC"}


def significance_stars(p: float) -> str:
    for cut, mark in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return mark
    return ""


def _format_p(p):
    return "<2e-16" if p < 2e-16 else f"{p:.3f}" if p >= 0.001 else f"{p:.1e}"


def dr_scores_from(tau, e_hat, m_hat, w, outcome, omega) -> DrScores:
    """AIPW-style scores with an IPCW-weighted residual term.

    ``gamma = tau + omega (W - e) / (e (1 - e)) (U - m - (W - e) tau)``; the
    arm-specific mean is rebuilt as ``m + (w - e) tau``, so the correction
    vanishes for incomplete cases (``omega = 0``).
    """
    tau, e_hat, m_hat, w, outcome, omega = (
        np.asarray(a, dtype=float) for a in (tau, e_hat, m_hat, w, outcome, omega)
    )
    if np.any(e_hat <= 0) or np.any(e_hat >= 1):
        raise ParameterError("propensity estimates must lie strictly inside (0, 1)")
    wr = w - e_hat
    gamma = tau + omega * wr / (e_hat * (1 - e_hat)) * (outcome - m_hat - wr * tau)
    return DrScores(gamma)


def dr_scores(model) -> DrScores:
    """Doubly robust scores for the training rows of a fitted model (OOB CATEs)."""
    return dr_scores_from(model.tau_oob, model.nuisances.e_hat, model.nuisances.m_hat,
                          model.w, model.outcome, model.ipcw)


def average_treatment_effect(scores: DrScores) -> Estimate:
    g = scores.gamma
    if g.shape[0] < 2:
        raise ParameterError("need at least two scores")
    return Estimate(float(g.mean()), float(g.std(ddof=1) / math.sqrt(g.shape[0])))


def _dependent_columns(a):
    kept, dependent = [], []
    for j in range(a.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(a[:, trial]) == len(trial):
            kept = trial
        else:
            dependent.append(j)
    return dependent


def hc3_ols(gamma, design):
    """OLS coefficients and HC3 covariance for ``gamma`` on ``design`` (no intercept added)."""
    design = np.asarray(design, dtype=float)
    q, r = np.linalg.qr(design)
    beta = np.linalg.solve(r, q.T @ gamma)
    resid = gamma - design @ beta
    lev = np.sum(q * q, axis=1)
    r_inv = np.linalg.inv(r)
    bread = r_inv @ r_inv.T
    scaled = design * (resid / (1 - lev))[:, None]
    meat = scaled.T @ scaled
    return beta, bread @ meat @ bread, resid, lev


def best_linear_projection(scores: DrScores, a=None, names=None) -> BlpResult:
    """Regress the DR scores on an intercept plus ``a`` with HC3 standard errors.

    p-values use the standard normal reference distribution.
    """
    gamma = scores.gamma
    n = gamma.shape[0]
    if a is None:
        a = np.empty((n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] != n:
        raise ParameterError(f"projection covariates have {a.shape[0]} rows, expected {n}")
    if names is None:
        names = [f"x{j + 1}" for j in range(a.shape[1])]
    names = ["(Intercept)", *names]
    design = np.column_stack([np.ones(n), a])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        bad = [names[j] for j in _dependent_columns(design)]
        raise RankDeficiencyError(f"projection design is rank deficient; dependent columns: {bad}")
    if n <= design.shape[1]:
        raise RankDeficiencyError("need more rows than projection coefficients")
    beta, cov, _, _ = hc3_ols(gamma, design)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf * np.sign(beta)))
    p = 2 * stats.norm.sf(np.abs(t))
    return BlpResult(tuple(Coefficient(nm, float(b), float(s), float(tv), float(pv))
                           for nm, b, s, tv, pv in zip(names, beta, se, t, p)))


def _priority_order(priorities):
    # descending priority, ties by ascending unit id (stable sort)
    return np.argsort(-np.asarray(priorities, dtype=float), kind="stable")


def _toc_from_sorted(g_sorted):
    prefix = np.cumsum(g_sorted) / np.arange(1, g_sorted.shape[0] + 1)
    return prefix - prefix[-1], prefix[-1]


def toc_curve(scores: DrScores, priorities) -> TocCurve:
    """TOC at q = k/n: mean score of the top-k prioritized units minus the overall mean."""
    g = scores.gamma
    s = np.asarray(priorities, dtype=float).ravel()
    if s.shape != g.shape:
        raise ParameterError("priorities and scores must have equal length")
    if g.shape[0] < 2:
        raise ParameterError("need at least two units")
    toc, ate = _toc_from_sorted(g[_priority_order(s)])
    n = g.shape[0]
    return TocCurve(q_grid=np.arange(1, n + 1) / n, toc_values=toc, overall_ate=float(ate))


def autoc(gamma, priorities) -> float:
    toc, _ = _toc_from_sorted(np.asarray(gamma, dtype=float)[_priority_order(priorities)])
    return float(toc.mean())


def thin_grid(n: int, max_points: int = 200) -> np.ndarray:
    """Indices k (1-based counts) for a plotting grid of at most ``max_points`` fractions."""
    k = np.unique(np.ceil(np.linspace(1, n, min(n, max_points))).astype(int))
    return k


def rate(scores: DrScores, priorities, n_bootstrap: int = 200, seed: int = 42) -> RateResult:
    """AUTOC with a half-sample bootstrap standard error.

    Each replicate draws ``floor(n/2)`` units without replacement and
    recomputes the AUTOC. Drawing ``m`` of ``n`` units without replacement
    shrinks the replicate spread around the full-sample value by the
    finite-population factor ``1 - m/n``, so the replicate standard
    deviation is scaled by ``sqrt(m / (n - m))``: exactly one for even ``n``.
    """
    g = scores.gamma
    s = np.asarray(priorities, dtype=float).ravel()
    n = g.shape[0]
    if n < 4:
        raise ParameterError("need at least four units")
    if int(n_bootstrap) != n_bootstrap or n_bootstrap < 2:
        raise ParameterError(f"n_bootstrap must be an integer >= 2, got {n_bootstrap}")
    toc = toc_curve(scores, s)
    est = float(toc.toc_values.mean())

    half = n // 2
    plot_q = thin_grid(n) / n
    reps = np.empty(n_bootstrap)
    toc_reps = np.empty((n_bootstrap, plot_q.size))
    for b in range(n_bootstrap):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(b,))))
        idx = np.sort(rng.choice(n, size=half, replace=False))
        tb, _ = _toc_from_sorted(g[idx][_priority_order(s[idx])])
        reps[b] = tb.mean()
        k = np.clip(np.ceil(plot_q * half).astype(int), 1, half)
        toc_reps[b] = tb[k - 1]
    scale = math.sqrt(half / (n - half))
    se = float(reps.std(ddof=1) * scale)
    toc_se = toc_reps.std(axis=0, ddof=1) * scale
    return RateResult(autoc_estimate=est, std_err=se, n_bootstrap=int(n_bootstrap), toc=toc,
                      toc_se_q=plot_q, toc_se=toc_se)
