"""Exponential survival simulator with closed-form RMST truth.

Covariates are iid Uniform(0, 1). The control arm has hazard
``baseline_rate * exp(prognostic * (x_0 - 0.5))``. The treated-arm hazard is
solved per unit so that the RMST difference at the horizon equals the
requested effect ``tau(x)``, which makes the true CATE exact rather than
approximate. Censoring times are exponential (or absent).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize

from .dataset import SurvivalDataset
from .errors import ParameterError

EFFECT_KINDS = ("constant", "step", "linear")


@dataclass(frozen=True)
class SimulationSpec:
    n: int
    p: int = 5
    horizon: float = 720.0
    effect: str = "constant"
    effect_value: float = 0.0
    effect_covariate: int = 1
    baseline_rate: float = 1 / 100
    prognostic: float = 0.0
    censoring_rate: float | None = None
    treat_fraction: float = 0.5
    seed: int = 0
    dgp: str = "exponential"

    def __post_init__(self):
        if self.dgp != "exponential":
            raise ParameterError(f"unknown dgp {self.dgp!r}")
        if self.n < 2 or self.p < 1:
            raise ParameterError("need n >= 2 and p >= 1")
        if self.effect not in EFFECT_KINDS:
            raise ParameterError(f"effect must be one of {EFFECT_KINDS}")
        if not 0 <= self.effect_covariate < self.p:
            raise ParameterError("effect_covariate out of range")
        if not self.baseline_rate > 0:
            raise ParameterError("baseline_rate must be positive")
        if self.censoring_rate is not None and not self.censoring_rate > 0:
            raise ParameterError("censoring_rate must be positive (or None for no censoring)")
        if not 0 < self.treat_fraction < 1:
            raise ParameterError("treat_fraction must lie in (0, 1)")
        if not self.horizon > 0:
            raise ParameterError("horizon must be positive")


@dataclass(eq=False)
class Truth:
    rmst0: np.ndarray
    rmst1: np.ndarray
    surv0: np.ndarray
    surv1: np.ndarray
    ate: float
    censoring_rate: float | None

    @property
    def cate(self) -> np.ndarray:
        return self.rmst1 - self.rmst0

    def to_json(self, spec: SimulationSpec) -> str:
        return json.dumps({
            "spec": asdict(spec),
            "ate": self.ate,
            "censoring_rate": self.censoring_rate,
            "rows": {
                "rmst0": self.rmst0.tolist(), "rmst1": self.rmst1.tolist(),
                "cate": self.cate.tolist(), "surv0": self.surv0.tolist(),
                "surv1": self.surv1.tolist(),
            },
        }, sort_keys=True)


def exp_rmst(rate, h):
    """E[min(T, h)] for T ~ Exponential(rate)."""
    rate = np.asarray(rate, dtype=float)
    return -np.expm1(-rate * h) / rate


def rate_for_rmst(target, h):
    """Exponential rate whose RMST at ``h`` equals ``target`` (vectorized bisection on log-rate)."""
    target = np.asarray(target, dtype=float)
    if np.any(target <= 0) or np.any(target >= h):
        raise ParameterError("requested RMST must lie strictly inside (0, h)")
    lo = np.full(target.shape, -60.0)
    hi = np.full(target.shape, 60.0)
    for _ in range(200):
        mid = (lo + hi) / 2
        too_long = exp_rmst(np.exp(mid), h) > target
        lo = np.where(too_long, mid, lo)
        hi = np.where(too_long, hi, mid)
    return np.exp((lo + hi) / 2)


def effect(spec: SimulationSpec, x) -> np.ndarray:
    xj = np.asarray(x)[:, spec.effect_covariate]
    if spec.effect == "constant":
        return np.full(xj.shape, float(spec.effect_value))
    if spec.effect == "step":
        return spec.effect_value * (xj > 0.5)
    return spec.effect_value * xj


def control_rate(spec: SimulationSpec, x) -> np.ndarray:
    return spec.baseline_rate * np.exp(spec.prognostic * (np.asarray(x)[:, 0] - 0.5))


def arm_rates(spec: SimulationSpec, x):
    lam0 = control_rate(spec, x)
    tau = effect(spec, x)
    target = exp_rmst(lam0, spec.horizon) + tau
    lam1 = lam0.copy()
    moved = tau != 0
    if np.any(moved):
        lam1[moved] = rate_for_rmst(target[moved], spec.horizon)
    return lam0, lam1


def analytic_censoring_rate(spec: SimulationSpec, n_quad: int = 400) -> float | None:
    """P(C < T) by midpoint quadrature over the covariates the hazards depend on."""
    if spec.censoring_rate is None:
        return None
    g = (np.arange(n_quad) + 0.5) / n_quad
    if spec.effect_covariate == 0 or spec.effect == "constant":
        xs = np.zeros((n_quad, spec.p))
        xs[:, 0] = g
        xs[:, spec.effect_covariate] = g
    else:
        a, b = np.meshgrid(g, g, indexing="ij")
        xs = np.zeros((n_quad * n_quad, spec.p))
        xs[:, 0] = a.ravel()
        xs[:, spec.effect_covariate] = b.ravel()
    lam0, lam1 = arm_rates(spec, xs)
    lc = spec.censoring_rate
    pc0 = np.mean(lc / (lc + lam0))
    pc1 = np.mean(lc / (lc + lam1))
    return float((1 - spec.treat_fraction) * pc0 + spec.treat_fraction * pc1)


def censoring_rate_for(spec: SimulationSpec, target: float) -> float:
    """Exponential censoring rate giving an overall censoring fraction ``target``."""
    if not 0 < target < 1:
        raise ParameterError("target censoring fraction must lie in (0, 1)")

    def gap(log_rate):
        s = SimulationSpec(**{**asdict(spec), "censoring_rate": float(np.exp(log_rate))})
        return analytic_censoring_rate(s, n_quad=100) - target

    return float(np.exp(optimize.brentq(gap, -30.0, 30.0, xtol=1e-12)))


def true_ate(spec: SimulationSpec) -> float:
    if spec.effect == "constant":
        return float(spec.effect_value)
    # step and linear effects average to half their value over Uniform(0, 1)
    return float(spec.effect_value) / 2


def simulate(spec: SimulationSpec) -> tuple[SurvivalDataset, Truth]:
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(size=(spec.n, spec.p))
    w = (rng.uniform(size=spec.n) < spec.treat_fraction).astype(float)
    lam0, lam1 = arm_rates(spec, x)
    t0 = rng.exponential(1 / lam0)
    t1 = rng.exponential(1 / lam1)
    t = np.where(w == 1, t1, t0)
    if spec.censoring_rate is None:
        c = np.full(spec.n, np.inf)
    else:
        c = rng.exponential(1 / spec.censoring_rate, size=spec.n)
    y = np.minimum(t, c)
    d = (t <= c).astype(float)
    h = spec.horizon
    truth = Truth(
        rmst0=exp_rmst(lam0, h), rmst1=exp_rmst(lam1, h),
        surv0=np.exp(-lam0 * h), surv1=np.exp(-lam1 * h),
        ate=true_ate(spec), censoring_rate=analytic_censoring_rate(spec),
    )
    ds = SurvivalDataset(x, y, w, d, names=tuple(f"x{j + 1}" for j in range(spec.p)),
                         no_censoring=bool(d.min() == 1))
    return ds, truth
