"""Plug-in estimators for the identified causal quantities.

Fixed-time curves average the conditional decision kernel over the empirical
(x, z) distribution with latent-class weights that condition only on
pre-treatment variables.  Shift estimates evaluate the same kernel at each
row's shifted realized time, by default weighted with the full-row posterior
(the realized time is part of the conditioning event there); a pretreatment
weighting mode is kept for sensitivity.

Confidence intervals are pointwise, from the delta method against the fit's
observed information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import fpt
from .data import Dataset
from .emfit import FitResult, delta_method_se
from .errors import ParameterDomainError, StratumEmptyError
from .latentmodel import LatentModelParams, posterior_matrix, row_links_batch

DEFAULT_GRID_HOURS = np.round(np.arange(0.1, 10.0 + 1e-9, 0.1), 10)

ESTIMAND_TAGS = ("theta", "gamma", "err0", "err1", "err_total", "theta_shift", "gamma_shift")


@dataclass(frozen=True)
class ShiftPolicy:
    """Time-shift rule f(T) = max(T + delta, floor), in minutes."""

    delta: float
    floor: float = 5.0

    def __post_init__(self):
        if not np.isfinite(self.delta):
            raise ParameterDomainError("shift delta must be finite")
        if not (np.isfinite(self.floor) and self.floor > 0.0):
            raise ParameterDomainError("shift floor must be positive")

    def apply(self, t_hours):
        """Apply the rule to times measured in hours."""
        return np.maximum(np.asarray(t_hours, dtype=float) + self.delta / 60.0,
                          self.floor / 60.0)


@dataclass(frozen=True)
class CurveResult:
    grid: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    estimand: str

    def __post_init__(self):
        if self.estimand not in ESTIMAND_TAGS:
            raise ParameterDomainError(f"unknown estimand tag {self.estimand!r}")

    def rows(self):
        for j in range(self.grid.size):
            yield (
                float(self.grid[j]),
                float(self.estimate[j]),
                float(self.se[j]),
                float(self.ci_low[j]),
                float(self.ci_high[j]),
            )

    def to_json(self) -> dict:
        return {
            "estimand": self.estimand,
            "t_hours": [float(v) for v in self.grid],
            "estimate": [float(v) for v in self.estimate],
            "se": [float(v) for v in self.se],
            "ci_low": [float(v) for v in self.ci_low],
            "ci_high": [float(v) for v in self.ci_high],
        }


# ---------------------------------------------------------------------------
# weights and kernels


def pretreatment_weights(params: LatentModelParams, x, z) -> np.ndarray:
    """(n, 2) class weights proportional to P(h | x) P(z | x, h).

    Deliberately receives only the pre-treatment projection (x, z); the
    decision, its timing and the outcome never enter.
    """
    links = row_links_batch(params, x, z)
    return _weights_from_links(links)


def _weights_from_links(links) -> np.ndarray:
    logw = links.log_h + links.z_ll
    m = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - m)
    return w / w.sum(axis=1, keepdims=True)


def _admit_kernel(links, grid) -> np.ndarray:
    """(n, 2, G) conditional admit probabilities at each grid time."""
    n = links.b.shape[0]
    grid = np.asarray(grid, dtype=float)
    t = np.broadcast_to(grid, (n, grid.size))
    out = np.empty((n, 2, grid.size))
    for h in (0, 1):
        mu = links.d[h] * links.b
        out[:, h, :] = fpt.conditional_admit_prob_batch(
            t, links.b[:, None], links.c[:, None], mu[:, None]
        )
    return out


def _curve_values(params: LatentModelParams, ds: Dataset, grid, kind: str) -> np.ndarray:
    """Point estimates for one estimand over the grid."""
    links = row_links_batch(params, ds.x, ds.z)
    w = _weights_from_links(links)
    p = _admit_kernel(links, grid)
    if kind == "theta":
        return np.einsum("nh,nhg->g", w, p) / ds.n
    if kind == "gamma":
        pi = expit(params.cell_logits)  # [h, a]
        inner = pi[:, 1][None, :, None] * p + pi[:, 0][None, :, None] * (1.0 - p)
        return np.einsum("nh,nhg->g", w, inner) / ds.n
    if kind in ("err0", "err1", "err_total"):
        w0 = w[:, 0].sum()
        w1 = w[:, 1].sum()
        if kind != "err_total" and (w0 <= 1e-12 or w1 <= 1e-12):
            raise StratumEmptyError("a latent-class stratum carries zero weight")
        if kind == "err0":
            return w[:, 0] @ p[:, 0, :] / w0
        if kind == "err1":
            return w[:, 1] @ (1.0 - p[:, 1, :]) / w1
        return (w[:, 0] @ p[:, 0, :] + w[:, 1] @ (1.0 - p[:, 1, :])) / ds.n
    raise ParameterDomainError(f"unknown curve kind {kind!r}")


def _finish_curve(fit, ds, grid, kind, tag, level, compute_ci):
    grid = np.asarray(grid, dtype=float)
    if np.any(grid <= 0.0):
        raise ParameterDomainError("grid times must be positive")
    if compute_ci:
        est, se = delta_method_se(
            fit, fit.params, lambda p: _curve_values(p, ds, grid, kind)
        )
    else:
        est = _curve_values(fit.params, ds, grid, kind)
        se = np.full(grid.size, np.nan)
    zq = norm.ppf(0.5 + level / 2.0)
    return CurveResult(
        grid=grid,
        estimate=est,
        se=se,
        ci_low=est - zq * se,
        ci_high=est + zq * se,
        estimand=tag,
    )


def theta_curve(fit: FitResult, ds: Dataset, grid=DEFAULT_GRID_HOURS,
                level=0.95, compute_ci=True) -> CurveResult:
    """Average potential decision rate if time were fixed to each grid value."""
    return _finish_curve(fit, ds, grid, "theta", "theta", level, compute_ci)


def gamma_curve(fit: FitResult, ds: Dataset, grid=DEFAULT_GRID_HOURS,
                level=0.95, compute_ci=True) -> CurveResult:
    """Average potential outcome rate if time were fixed to each grid value."""
    return _finish_curve(fit, ds, grid, "gamma", "gamma", level, compute_ci)


def error_curves(fit: FitResult, ds: Dataset, grid=DEFAULT_GRID_HOURS,
                 level=0.95, compute_ci=True):
    """(err0, err1, err_total): decision-vs-class disagreement rates by class."""
    return (
        _finish_curve(fit, ds, grid, "err0", "err0", level, compute_ci),
        _finish_curve(fit, ds, grid, "err1", "err1", level, compute_ci),
        _finish_curve(fit, ds, grid, "err_total", "err_total", level, compute_ci),
    )


# ---------------------------------------------------------------------------
# shift interventions


@dataclass(frozen=True)
class ShiftEntry:
    delta_minutes: float
    floor_minutes: float
    theta: float
    theta_se: float
    theta_lo: float
    theta_hi: float
    gamma: float
    gamma_se: float
    gamma_lo: float
    gamma_hi: float
    dtheta: float
    dtheta_se: float
    dtheta_lo: float
    dtheta_hi: float
    dgamma: float
    dgamma_se: float
    dgamma_lo: float
    dgamma_hi: float


@dataclass(frozen=True)
class ShiftResult:
    weight_mode: str
    level: float
    entries: tuple[ShiftEntry, ...]

    def to_json(self) -> dict:
        return {
            "weight_mode": self.weight_mode,
            "level": self.level,
            "entries": [vars(e) for e in self.entries],
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


def _shift_values(params: LatentModelParams, ds: Dataset, policy: ShiftPolicy,
                  weight_mode: str) -> np.ndarray:
    """[theta_hat(f), gamma_hat(f)] under one policy."""
    links = row_links_batch(params, ds.x, ds.z)
    if weight_mode == "full_posterior":
        w = posterior_matrix(params, ds)
    elif weight_mode == "pretreatment":
        w = _weights_from_links(links)
    else:
        raise ParameterDomainError(f"unknown weight_mode {weight_mode!r}")
    t_new = policy.apply(ds.t)
    p = np.empty((ds.n, 2))
    for h in (0, 1):
        p[:, h] = fpt.conditional_admit_prob_batch(
            t_new, links.b, links.c, links.d[h] * links.b
        )
    theta = float(np.einsum("nh,nh->", w, p) / ds.n)
    pi = expit(params.cell_logits)
    inner = pi[:, 1][None, :] * p + pi[:, 0][None, :] * (1.0 - p)
    gamma = float(np.einsum("nh,nh->", w, inner) / ds.n)
    return np.array([theta, gamma])


def shift_estimates(fit: FitResult, ds: Dataset, policies,
                    weight_mode: str = "full_posterior", level: float = 0.95) -> ShiftResult:
    """Per-policy plug-in estimates with deltas against the unshifted policy.

    The unshifted reference uses delta = 0 with the same floor, so the
    reported difference at delta = 0 is exactly zero.
    """
    zq = norm.ppf(0.5 + level / 2.0)
    entries = []
    for policy in policies:
        base = ShiftPolicy(0.0, policy.floor)

        def paired(params, _policy=policy, _base=base):
            shifted = _shift_values(params, ds, _policy, weight_mode)
            unshifted = _shift_values(params, ds, _base, weight_mode)
            return np.concatenate([shifted, shifted - unshifted])

        # at delta = 0 the paired difference is identically zero, so its
        # gradient and standard error vanish without a special case
        est, se = delta_method_se(fit, fit.params, paired)
        entries.append(
            ShiftEntry(
                delta_minutes=policy.delta,
                floor_minutes=policy.floor,
                theta=float(est[0]), theta_se=float(se[0]),
                theta_lo=float(est[0] - zq * se[0]), theta_hi=float(est[0] + zq * se[0]),
                gamma=float(est[1]), gamma_se=float(se[1]),
                gamma_lo=float(est[1] - zq * se[1]), gamma_hi=float(est[1] + zq * se[1]),
                dtheta=float(est[2]), dtheta_se=float(se[2]),
                dtheta_lo=float(est[2] - zq * se[2]), dtheta_hi=float(est[2] + zq * se[2]),
                dgamma=float(est[3]), dgamma_se=float(se[3]),
                dgamma_lo=float(est[3] - zq * se[3]), dgamma_hi=float(est[3] + zq * se[3]),
            )
        )
    return ShiftResult(weight_mode=weight_mode, level=level, entries=tuple(entries))
