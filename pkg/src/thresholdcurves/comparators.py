"""Alternative estimators for the sensitivity study.

Three families: a generalized-propensity-score dose-response model (no latent
class, adjusts for measured covariates only), a latent-class model with a
lognormal time regression and a logistic decision model in place of the
boundary-crossing process, and no-latent versions of both process models.

The propensity density R uses the mean-regression form with the extra
sigma^2/2 shift inside the exponent; the lognormal time densities carry the
same shift.  Both are kept exactly in that form everywhere (fitting and
curve evaluation), so each estimator is internally consistent.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit, logsumexp
from scipy.stats import norm

from . import fpt
from .data import Dataset
from .effects import CurveResult, _weights_from_links
from .emfit import (
    FitControls,
    PosteriorWeights,
    StartDiagnostics,
    cell_logits_from_weights,
    delta_method_se,
    oakes_information_core,
    standard_errors,
    weighted_least_squares,
    weighted_logistic,
)
from .errors import FitError, ParameterDomainError
from .latentmodel import (
    LatentModelParams,
    ZComponentParams,
    class_prior_and_proxy_ll,
    class_proxy_score,
    design_x,
    design_xz,
    outcome_cell_score,
    threshold_q_and_grad,
    threshold_theta,
    with_threshold_theta,
)

_LOG_2PI = float(np.log(2.0 * np.pi))


def _zq(level):
    return norm.ppf(0.5 + level / 2.0)


def _curve_with_ci(fit_info, params, values_fn, grid, tag, level, compute_ci):
    grid = np.asarray(grid, dtype=float)
    if compute_ci:
        est, se = delta_method_se(fit_info, params, values_fn)
    else:
        est = values_fn(params)
        se = np.full(grid.size, np.nan)
    z = _zq(level)
    return CurveResult(grid=grid, estimate=est, se=se,
                       ci_low=est - z * se, ci_high=est + z * se, estimand=tag)


# ---------------------------------------------------------------------------
# generalized propensity score


@dataclass(frozen=True)
class GpsParams:
    """Two-stage dose-response model: lognormal time density as the score,
    quadratic-logistic decision and outcome models on (t, r)."""

    beta: np.ndarray  # (1 + k + p,) coefficients of log E[T | x, z]
    sigma: float
    alpha: np.ndarray  # (5,) decision model on [1, r, r^2, t, t^2]
    gamma: np.ndarray  # (8,) outcome model on [1, r, r^2, t, t^2, a, a r, a t]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.beta, [math.log(self.sigma)], self.alpha, self.gamma])

    def with_flat(self, vec) -> "GpsParams":
        nb = self.beta.size
        return GpsParams(
            beta=vec[:nb].copy(),
            sigma=float(np.exp(vec[nb])),
            alpha=vec[nb + 1 : nb + 6].copy(),
            gamma=vec[nb + 6 : nb + 14].copy(),
        )

    @property
    def n_params(self) -> int:
        return self.beta.size + 1 + 5 + 8


def gps_score_density(t, w_mean, sigma):
    """Propensity density r(t | W, sigma) in the printed mean-shift form."""
    t = np.asarray(t, dtype=float)
    return np.exp(-((np.log(t) - w_mean - sigma**2 / 2.0) ** 2) / (2.0 * sigma**2)) / (
        t * sigma * math.sqrt(2.0 * math.pi)
    )


def _psi_design(t, r):
    return np.column_stack([np.ones_like(t), r, r**2, t, t**2])


def _phi_design(a, t, r):
    return np.column_stack([np.ones_like(t), r, r**2, t, t**2, a, a * r, a * t])


def _gps_loglik(params: GpsParams, ds: Dataset) -> float:
    xzd = design_xz(ds.x, ds.z)
    w_mean = xzd @ params.beta
    sigma = params.sigma
    logt = np.log(ds.t)
    m = w_mean - sigma**2 / 2.0  # location of the fitted lognormal
    ll = float(
        np.sum(-logt - math.log(sigma) - 0.5 * _LOG_2PI - (logt - m) ** 2 / (2 * sigma**2))
    )
    r = gps_score_density(ds.t, w_mean, sigma)
    a = np.asarray(ds.a, dtype=float)
    y = np.asarray(ds.y, dtype=float)
    u = _psi_design(ds.t, r) @ params.alpha
    ll += float(np.sum(a * log_expit(u) + (1 - a) * log_expit(-u)))
    v = _phi_design(a, ds.t, r) @ params.gamma
    ll += float(np.sum(y * log_expit(v) + (1 - y) * log_expit(-v)))
    return ll


@dataclass(frozen=True)
class GpsFit:
    params: GpsParams
    info: np.ndarray
    se: np.ndarray
    loglik: float
    flags: tuple[str, ...] = ()


def gps_fit(ds: Dataset) -> GpsFit:
    """Two-stage MLE: lognormal time regression, then joint logistic models."""
    xzd = design_xz(ds.x, ds.z)
    logt = np.log(ds.t)
    m_coef, msr = weighted_least_squares(xzd, logt, np.ones(ds.n))
    sigma = math.sqrt(max(msr, 1e-12))
    beta = m_coef.copy()
    beta[0] += sigma**2 / 2.0  # mean regression includes the lognormal shift

    r = gps_score_density(ds.t, xzd @ beta, sigma)
    flags = []
    alpha, flagged = weighted_logistic(_psi_design(ds.t, r), np.asarray(ds.a, float),
                                       np.ones(ds.n))
    if flagged:
        flags.append("decision stage: ridge fallback")
    gamma, flagged = weighted_logistic(
        _phi_design(np.asarray(ds.a, float), ds.t, r), np.asarray(ds.y, float), np.ones(ds.n)
    )
    if flagged:
        flags.append("outcome stage: ridge fallback")

    params = GpsParams(beta=beta, sigma=sigma, alpha=alpha, gamma=gamma)
    info = _fd_hessian_info(lambda p: _gps_loglik(p, ds), params)
    return GpsFit(params=params, info=info, se=standard_errors(info),
                  loglik=_gps_loglik(params, ds), flags=tuple(flags))


def gps_curve(fit: GpsFit, ds: Dataset, grid, target: str = "outcome",
              level: float = 0.95, compute_ci: bool = True) -> CurveResult:
    """Plug-in dose-response curve: average outcome (or decision) at each t."""
    grid = np.asarray(grid, dtype=float)
    xzd = design_xz(ds.x, ds.z)

    def values(params):
        w_mean = xzd @ params.beta
        out = np.empty(grid.size)
        for j, t in enumerate(grid):
            tvec = np.full(ds.n, float(t))
            r = gps_score_density(tvec, w_mean, params.sigma)
            psi1 = expit(_psi_design(tvec, r) @ params.alpha)
            if target == "decision":
                out[j] = psi1.mean()
            else:
                phi1 = expit(_phi_design(np.ones(ds.n), tvec, r) @ params.gamma)
                phi0 = expit(_phi_design(np.zeros(ds.n), tvec, r) @ params.gamma)
                out[j] = (phi1 * psi1 + phi0 * (1.0 - psi1)).mean()
        return out

    tag = "theta" if target == "decision" else "gamma"
    return _curve_with_ci(fit.info, fit.params, values, grid, tag, level, compute_ci)


def _fd_hessian_info(loglik_fn, params, step_scale=1e-4):
    """-Hessian of a log-likelihood by central differences on the flat vector."""
    vec = params.flatten()
    q = vec.size
    steps = step_scale * np.maximum(1.0, np.abs(vec))
    hess = np.empty((q, q))
    for j in range(q):
        vp, vm = vec.copy(), vec.copy()
        vp[j] += steps[j]
        vm[j] -= steps[j]
        for l in range(j, q):
            vpp, vpm = vp.copy(), vp.copy()
            vpp[l] += steps[l]
            vpm[l] -= steps[l]
            vmp, vmm = vm.copy(), vm.copy()
            vmp[l] += steps[l]
            vmm[l] -= steps[l]
            val = (
                loglik_fn(params.with_flat(vpp))
                - loglik_fn(params.with_flat(vpm))
                - loglik_fn(params.with_flat(vmp))
                + loglik_fn(params.with_flat(vmm))
            ) / (4.0 * steps[j] * steps[l])
            hess[j, l] = val
            hess[l, j] = val
    return -hess


# ---------------------------------------------------------------------------
# lognormal latent-class model


@dataclass(frozen=True)
class LognormalParams:
    """Latent-class model with lognormal times and a logistic decision model.

    The time regression has no global intercept: the class indicators h and
    (1 - h) carry it.  Same for the decision model.
    """

    eta_h: np.ndarray
    z_models: tuple[ZComponentParams, ...]
    t_coef: np.ndarray  # (k + p + 2,): [x, z, h, 1 - h]
    log_sigma: float
    nu: np.ndarray  # (k + p + 3,): [x, z, log t, h, 1 - h]
    cell_logits: np.ndarray  # (2, 2)

    @property
    def k(self) -> int:
        return self.eta_h.size - 1

    @property
    def p(self) -> int:
        return len(self.z_models)

    def flatten(self) -> np.ndarray:
        parts = [self.eta_h]
        for zm in self.z_models:
            parts.append(zm.coef)
            if zm.kind == "continuous":
                parts.append([zm.log_var])
        parts += [self.t_coef, [self.log_sigma], self.nu, self.cell_logits.ravel()]
        return np.concatenate([np.asarray(prt, dtype=float).ravel() for prt in parts])

    def with_flat(self, vec) -> "LognormalParams":
        vec = np.asarray(vec, dtype=float)
        pos = 0

        def take(m):
            nonlocal pos
            out = vec[pos : pos + m].copy()
            pos += m
            return out

        eta = take(self.eta_h.size)
        z_models = []
        for zm in self.z_models:
            coef = take(zm.coef.size)
            lv = float(take(1)[0]) if zm.kind == "continuous" else None
            z_models.append(ZComponentParams(zm.kind, coef, lv))
        t_coef = take(self.t_coef.size)
        log_sigma = float(take(1)[0])
        nu = take(self.nu.size)
        cells = take(4).reshape(2, 2)
        return LognormalParams(eta, tuple(z_models), t_coef, log_sigma, nu, cells)

    @property
    def n_params(self) -> int:
        return self.flatten().size


def _ln_eta(params: LognormalParams, ds: Dataset, h: int) -> np.ndarray:
    feat = np.column_stack([ds.x, ds.z])
    kp = params.k + params.p
    return feat @ params.t_coef[:kp] + params.t_coef[kp] * h + params.t_coef[kp + 1] * (1 - h)


def _ln_decision_logit(params: LognormalParams, ds: Dataset, h: int, logt=None) -> np.ndarray:
    feat = np.column_stack([ds.x, ds.z])
    kp = params.k + params.p
    logt = np.log(ds.t) if logt is None else logt
    return (
        feat @ params.nu[:kp]
        + params.nu[kp] * logt
        + params.nu[kp + 1] * h
        + params.nu[kp + 2] * (1 - h)
    )


def lognormal_complete_ll(params: LognormalParams, ds: Dataset) -> np.ndarray:
    """(n, 2) complete-data log-likelihood of the lognormal variant."""
    log_h, z_ll = class_prior_and_proxy_ll(params.eta_h, params.z_models, ds.x, ds.z)
    out = log_h + z_ll
    sigma = math.exp(params.log_sigma)
    logt = np.log(ds.t)
    a = np.asarray(ds.a, dtype=float)
    y = np.asarray(ds.y, dtype=float)
    for h in (0, 1):
        resid = logt - _ln_eta(params, ds, h) - sigma**2 / 2.0
        out[:, h] += -logt - params.log_sigma - 0.5 * _LOG_2PI - resid**2 / (2 * sigma**2)
        u = _ln_decision_logit(params, ds, h)
        out[:, h] += a * log_expit(u) + (1 - a) * log_expit(-u)
        cell = params.cell_logits[h, ds.a]
        out[:, h] += y * log_expit(cell) + (1 - y) * log_expit(-cell)
    return out


def lognormal_observed_loglik(params: LognormalParams, ds: Dataset) -> float:
    return float(logsumexp(lognormal_complete_ll(params, ds), axis=1).sum())


def lognormal_posterior(params: LognormalParams, ds: Dataset) -> np.ndarray:
    ll = lognormal_complete_ll(params, ds)
    w1 = expit(ll[:, 1] - ll[:, 0])
    return np.column_stack([1.0 - w1, w1])


def lognormal_complete_score(params: LognormalParams, ds: Dataset) -> np.ndarray:
    """(n, 2, q) analytic score of the lognormal complete-data likelihood."""
    n = ds.n
    out = np.zeros((n, 2, params.n_params))
    hz = class_proxy_score(params.eta_h, params.z_models, ds.x, ds.z)
    pos = hz.shape[2]
    out[:, :, :pos] = hz

    feat = np.column_stack([ds.x, ds.z])
    kp = params.k + params.p
    sigma = math.exp(params.log_sigma)
    logt = np.log(ds.t)
    a = np.asarray(ds.a, dtype=float)
    nt = params.t_coef.size
    for h in (0, 1):
        resid = logt - _ln_eta(params, ds, h) - sigma**2 / 2.0
        scaled = resid / sigma**2
        out[:, h, pos : pos + kp] = scaled[:, None] * feat
        out[:, h, pos + kp] = scaled * h
        out[:, h, pos + kp + 1] = scaled * (1 - h)
        out[:, h, pos + nt] = -1.0 + resid + resid**2 / sigma**2
    pos += nt + 1

    nn = params.nu.size
    for h in (0, 1):
        u = _ln_decision_logit(params, ds, h)
        resid = a - expit(u)
        out[:, h, pos : pos + kp] = resid[:, None] * feat
        out[:, h, pos + kp] = resid * logt
        out[:, h, pos + kp + 1] = resid * h
        out[:, h, pos + kp + 2] = resid * (1 - h)
    pos += nn

    out[:, :, pos : pos + 4] = outcome_cell_score(params.cell_logits, ds.a, ds.y)
    return out


@dataclass(frozen=True)
class LognormalFit:
    params: LognormalParams
    loglik_trace: np.ndarray
    info: np.ndarray
    se: np.ndarray
    converged: bool
    iterations: int
    messages: tuple[str, ...] = ()
    starts: tuple[StartDiagnostics, ...] = ()

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


def _ln_m_step(params: LognormalParams, ds: Dataset, W, notes) -> LognormalParams:
    n = ds.n
    xd = design_x(ds.x)
    eta_new, flagged = weighted_logistic(xd, W[:, 1], np.ones(n), init=params.eta_h)
    if flagged:
        notes.append("eta_h: ridge fallback")

    design = np.vstack([np.column_stack([xd, np.zeros(n)]), np.column_stack([xd, np.ones(n)])])
    wts = np.concatenate([W[:, 0], W[:, 1]])
    z_new = []
    for j, zm in enumerate(params.z_models):
        labels = np.concatenate([ds.z[:, j], ds.z[:, j]])
        if zm.kind == "binary":
            coef, flagged = weighted_logistic(design, labels, wts, init=zm.coef)
            if flagged:
                notes.append(f"z[{j}]: ridge fallback")
            z_new.append(ZComponentParams(zm.kind, coef))
        else:
            coef, msr = weighted_least_squares(design, labels, wts)
            z_new.append(ZComponentParams(zm.kind, coef, float(np.log(max(msr, 1e-12)))))

    # time block: weighted least squares for the location, then strip the
    # sigma^2/2 shift off the class indicators (they jointly hold the intercept)
    feat = np.column_stack([ds.x, ds.z])
    tdesign = np.vstack(
        [np.column_stack([feat, np.zeros(n), np.ones(n)]),
         np.column_stack([feat, np.ones(n), np.zeros(n)])]
    )
    tlabels = np.concatenate([np.log(ds.t), np.log(ds.t)])
    m_coef, msr = weighted_least_squares(tdesign, tlabels, wts)
    sigma2 = max(msr, 1e-12)
    t_coef = m_coef.copy()
    t_coef[-1] -= sigma2 / 2.0
    t_coef[-2] -= sigma2 / 2.0

    # decision block: weighted logistic without a global intercept
    logt = np.log(ds.t)
    adesign = np.vstack(
        [np.column_stack([feat, logt, np.zeros(n), np.ones(n)]),
         np.column_stack([feat, logt, np.ones(n), np.zeros(n)])]
    )
    alabels = np.concatenate([np.asarray(ds.a, float), np.asarray(ds.a, float)])
    nu, flagged = weighted_logistic(adesign, alabels, wts, init=params.nu)
    if flagged:
        notes.append("decision block: ridge fallback")

    cells = cell_logits_from_weights(W, ds.a, ds.y, params.cell_logits)
    cand = LognormalParams(eta_new, tuple(z_new), t_coef, float(0.5 * np.log(sigma2)), nu, cells)

    # block-level monotonicity guard on the full expected objective
    q_new = float(np.sum(W * lognormal_complete_ll(cand, ds)))
    q_old = float(np.sum(W * lognormal_complete_ll(params, ds)))
    return cand if q_new >= q_old - 1e-10 else params


def _ln_template(ds: Dataset) -> LognormalParams:
    k, p = ds.schema.k, ds.schema.p
    return LognormalParams(
        eta_h=np.zeros(1 + k),
        z_models=tuple(
            ZComponentParams(kind, np.zeros(k + 2), 0.0 if kind == "continuous" else None)
            for kind in ds.schema.z_kinds
        ),
        t_coef=np.zeros(k + p + 2),
        log_sigma=0.0,
        nu=np.zeros(k + p + 3),
        cell_logits=np.zeros((2, 2)),
    )


def lognormal_fit(ds: Dataset, init: LognormalParams | None = None,
                  controls: FitControls = FitControls(),
                  compute_information: bool = True) -> LognormalFit:
    """EM for the lognormal variant; same driver contract as the main fitter."""
    template = _ln_template(ds)
    starts: list[tuple[str, LognormalParams]] = []
    if init is not None:
        starts.append(("explicit", init))
    else:
        a = np.asarray(ds.a, dtype=float)
        W_soft = np.column_stack([0.85 - 0.7 * a, 0.15 + 0.7 * a])
        warm = _ln_m_step(template, ds, W_soft, [])
        starts.append(("warm", warm))
        seeds = np.random.SeedSequence(controls.seed).spawn(max(controls.n_starts - 1, 0))
        for s, ss in enumerate(seeds):
            rng = np.random.default_rng(ss)
            vec = 0.25 * rng.standard_normal(template.n_params)
            cand = template.with_flat(vec)
            y_rate = float(np.clip(ds.y.mean(), 1e-6, 1 - 1e-6))
            cand = replace(
                cand,
                log_sigma=float(0.5 * np.log(np.log(ds.t).var() + 1e-6)),
                cell_logits=np.full((2, 2), float(np.log(y_rate / (1 - y_rate)))),
            )
            starts.append((f"random{s}", cand))

    results, diagnostics = [], []
    for idx, (kind, p0) in enumerate(starts):
        try:
            params = p0
            notes: list[str] = []
            trace = []
            converged = False
            ll = lognormal_observed_loglik(params, ds)
            for _ in range(controls.max_iter):
                W = lognormal_posterior(params, ds)
                params = _ln_m_step(params, ds, W, notes)
                ll_new = lognormal_observed_loglik(params, ds)
                trace.append(ll_new)
                if abs(ll_new - ll) < controls.rel_tol * (1.0 + abs(ll_new)):
                    converged = True
                    break
                ll = ll_new
            results.append((params, np.asarray(trace), converged, len(trace), notes))
            diagnostics.append(StartDiagnostics(
                start=idx, kind=kind, loglik=float(trace[-1]), iterations=len(trace),
                converged=converged, messages=tuple(notes),
            ))
        except Exception as exc:
            diagnostics.append(StartDiagnostics(
                start=idx, kind=kind, loglik=float("-inf"), iterations=0,
                converged=False, messages=(f"failed: {exc!r}",),
            ))
    if not results:
        raise FitError("every lognormal EM start failed", diagnostics=diagnostics)

    best = int(np.argmax([r[1][-1] for r in results]))
    params, trace, converged, iters, notes = results[best]

    if compute_information:
        def posterior_fn(vec):
            return lognormal_posterior(params.with_flat(vec), ds)

        def score_sum_fn(vec, W):
            return np.einsum("nh,nhq->q", W, lognormal_complete_score(params.with_flat(vec), ds))

        info = oakes_information_core(params.flatten(), posterior_fn, score_sum_fn)
        se = standard_errors(info)
    else:
        q = params.n_params
        info = np.full((q, q), np.nan)
        se = np.full(q, np.nan)
    return LognormalFit(params=params, loglik_trace=trace, info=info, se=se,
                        converged=converged, iterations=iters,
                        messages=tuple(notes), starts=tuple(diagnostics))


def lognormal_curve(fit: LognormalFit, ds: Dataset, grid, kind: str = "theta",
                    level: float = 0.95, compute_ci: bool = True) -> CurveResult:
    """Fixed-time decision/outcome curves under the lognormal variant."""
    grid = np.asarray(grid, dtype=float)

    def values(params):
        log_h, z_ll = class_prior_and_proxy_ll(params.eta_h, params.z_models, ds.x, ds.z)
        logw = log_h + z_ll
        m = logw.max(axis=1, keepdims=True)
        w = np.exp(logw - m)
        w /= w.sum(axis=1, keepdims=True)
        out = np.empty(grid.size)
        pi = expit(params.cell_logits)
        for j, t in enumerate(grid):
            logt = np.full(ds.n, math.log(float(t)))
            acc = 0.0
            for h in (0, 1):
                p = expit(_ln_decision_logit(params, ds, h, logt=logt))
                if kind == "theta":
                    acc += float(w[:, h] @ p)
                else:
                    acc += float(w[:, h] @ (pi[h, 1] * p + pi[h, 0] * (1.0 - p)))
            out[j] = acc / ds.n
        return out

    return _curve_with_ci(fit.info, fit.params, values, grid, kind, level, compute_ci)


# ---------------------------------------------------------------------------
# no-latent variants


def _first_binary_z(ds: Dataset) -> int:
    for j, kind in enumerate(ds.schema.z_kinds):
        if kind == "binary":
            return j
    raise ParameterDomainError(
        "no-latent drift classes need a binary z column; none found in the schema"
    )


@dataclass(frozen=True)
class NoLatentBrownianParams:
    """Boundary-process model with the latent class struck out.

    The two signed drifts are indexed by an observed binary proxy column; the
    outcome cells collapse to one probability per decision.
    """

    beta_b: np.ndarray
    beta_c: np.ndarray
    delta: np.ndarray  # same signed-exponential drifts, indexed by the proxy
    cell_logits_a: np.ndarray  # (2,)
    class_column: int

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.beta_b, self.beta_c, self.delta, self.cell_logits_a])

    def with_flat(self, vec) -> "NoLatentBrownianParams":
        nb, nc = self.beta_b.size, self.beta_c.size
        return NoLatentBrownianParams(
            beta_b=vec[:nb].copy(),
            beta_c=vec[nb : nb + nc].copy(),
            delta=vec[nb + nc : nb + nc + 2].copy(),
            cell_logits_a=vec[nb + nc + 2 :].copy(),
            class_column=self.class_column,
        )

    @property
    def drifts(self) -> tuple[float, float]:
        return (-float(np.exp(self.delta[0])), float(np.exp(self.delta[0] + self.delta[1])))

    @property
    def n_params(self) -> int:
        return self.flatten().size


@dataclass(frozen=True)
class NoLatentFit:
    model: str  # "brownian" | "lognormal"
    params: object
    loglik: float
    info: np.ndarray
    se: np.ndarray
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class NoLatentResult:
    fit: NoLatentFit
    theta: CurveResult
    gamma: CurveResult


def _onehot_weights(ds: Dataset, col: int) -> np.ndarray:
    zeta = ds.z[:, col]
    if not np.isin(zeta, (0.0, 1.0)).all():
        raise ParameterDomainError("drift class column must be binary")
    return np.column_stack([1.0 - zeta, zeta])


def _carrier(ds: Dataset) -> LatentModelParams:
    k, p = ds.schema.k, ds.schema.p
    return LatentModelParams(
        eta_h=np.zeros(1 + k),
        z_models=tuple(
            ZComponentParams(kind, np.zeros(k + 2), 0.0 if kind == "continuous" else None)
            for kind in ds.schema.z_kinds
        ),
        beta_b=np.zeros(1 + k),
        beta_c=np.zeros(1 + k + p),
        delta=np.zeros(2),
        cell_logits=np.zeros((2, 2)),
    )


def _cells_by_decision(ds: Dataset) -> np.ndarray:
    out = np.zeros(2)
    y = np.asarray(ds.y, dtype=float)
    for aa in (0, 1):
        mask = ds.a == aa
        rate = float(y[mask].mean()) if mask.any() else float(y.mean())
        rate = min(max(rate, 1e-10), 1 - 1e-10)
        out[aa] = math.log(rate / (1.0 - rate))
    return out


def _nl_brownian_loglik(params: NoLatentBrownianParams, ds: Dataset) -> float:
    carrier = _carrier(ds)
    W = _onehot_weights(ds, params.class_column)
    theta = np.concatenate([params.beta_b, params.beta_c, params.delta])
    q, _ = threshold_q_and_grad(theta, carrier, ds, W)
    y = np.asarray(ds.y, dtype=float)
    cell = params.cell_logits_a[ds.a]
    return q + float(np.sum(y * log_expit(cell) + (1 - y) * log_expit(-cell)))


def _nl_brownian_score(params: NoLatentBrownianParams, ds: Dataset) -> np.ndarray:
    carrier = _carrier(ds)
    W = _onehot_weights(ds, params.class_column)
    theta = np.concatenate([params.beta_b, params.beta_c, params.delta])
    _, g_thresh = threshold_q_and_grad(theta, carrier, ds, W)
    y = np.asarray(ds.y, dtype=float)
    g_cells = np.zeros(2)
    for aa in (0, 1):
        mask = ds.a == aa
        g_cells[aa] = float(np.sum(y[mask] - expit(params.cell_logits_a[aa])))
    return np.concatenate([g_thresh, g_cells])


def _score_fd_info(score_fn, params, step_scale=1e-4):
    vec = params.flatten()
    q = vec.size
    steps = step_scale * np.maximum(1.0, np.abs(vec))
    hess = np.empty((q, q))
    for j in range(q):
        vp, vm = vec.copy(), vec.copy()
        vp[j] += steps[j]
        vm[j] -= steps[j]
        hess[:, j] = (score_fn(params.with_flat(vp)) - score_fn(params.with_flat(vm))) / (
            2.0 * steps[j]
        )
    return -0.5 * (hess + hess.T)


def _fit_no_latent_brownian(ds: Dataset, class_column, controls: FitControls) -> NoLatentFit:
    col = _first_binary_z(ds) if class_column is None else class_column
    carrier = _carrier(ds)
    W = _onehot_weights(ds, col)
    res = minimize(
        lambda th: tuple(-v for v in threshold_q_and_grad(th, carrier, ds, W)),
        threshold_theta(carrier),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 500, "gtol": controls.inner_gtol, "ftol": 1e-14},
    )
    nb, nc = carrier.beta_b.size, carrier.beta_c.size
    params = NoLatentBrownianParams(
        beta_b=res.x[:nb].copy(),
        beta_c=res.x[nb : nb + nc].copy(),
        delta=res.x[nb + nc :].copy(),
        cell_logits_a=_cells_by_decision(ds),
        class_column=col,
    )
    info = _score_fd_info(lambda p: _nl_brownian_score(p, ds), params)
    flags = () if res.success else (f"optimizer: {res.message}",)
    return NoLatentFit(model="brownian", params=params,
                       loglik=_nl_brownian_loglik(params, ds),
                       info=info, se=standard_errors(info), flags=flags)


def _nl_brownian_curves(fit, ds, grid, level, compute_ci):
    grid = np.asarray(grid, dtype=float)

    def admit_matrix(params):
        xd = design_x(ds.x)
        b = np.exp(xd @ params.beta_b)
        c = expit(design_xz(ds.x, ds.z) @ params.beta_c)
        zeta = ds.z[:, params.class_column].astype(int)
        d = np.where(zeta == 1, params.drifts[1], params.drifts[0])
        t = np.broadcast_to(grid, (ds.n, grid.size))
        return fpt.conditional_admit_prob_batch(t, b[:, None], c[:, None], (d * b)[:, None])

    def theta_values(params):
        return admit_matrix(params).mean(axis=0)

    def gamma_values(params):
        p = admit_matrix(params)
        pi = expit(params.cell_logits_a)
        return (pi[1] * p + pi[0] * (1.0 - p)).mean(axis=0)

    theta = _curve_with_ci(fit.info, fit.params, theta_values, grid, "theta", level, compute_ci)
    gamma = _curve_with_ci(fit.info, fit.params, gamma_values, grid, "gamma", level, compute_ci)
    return theta, gamma


@dataclass(frozen=True)
class NoLatentLognormalParams:
    t_coef: np.ndarray  # (1 + k + p,) location regression with intercept
    log_sigma: float
    nu: np.ndarray  # (1 + k + p + 1,) decision model on [1, x, z, log t]
    cell_logits_a: np.ndarray  # (2,)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.t_coef, [self.log_sigma], self.nu, self.cell_logits_a])

    def with_flat(self, vec) -> "NoLatentLognormalParams":
        nt = self.t_coef.size
        nn = self.nu.size
        return NoLatentLognormalParams(
            t_coef=vec[:nt].copy(),
            log_sigma=float(vec[nt]),
            nu=vec[nt + 1 : nt + 1 + nn].copy(),
            cell_logits_a=vec[nt + 1 + nn :].copy(),
        )

    @property
    def n_params(self) -> int:
        return self.flatten().size


def _nl_lognormal_loglik(params: NoLatentLognormalParams, ds: Dataset) -> float:
    xzd = design_xz(ds.x, ds.z)
    sigma = math.exp(params.log_sigma)
    logt = np.log(ds.t)
    resid = logt - xzd @ params.t_coef - sigma**2 / 2.0
    ll = float(np.sum(-logt - params.log_sigma - 0.5 * _LOG_2PI - resid**2 / (2 * sigma**2)))
    u = np.column_stack([xzd, logt]) @ params.nu
    a = np.asarray(ds.a, dtype=float)
    y = np.asarray(ds.y, dtype=float)
    ll += float(np.sum(a * log_expit(u) + (1 - a) * log_expit(-u)))
    cell = params.cell_logits_a[ds.a]
    ll += float(np.sum(y * log_expit(cell) + (1 - y) * log_expit(-cell)))
    return ll


def _fit_no_latent_lognormal(ds: Dataset, controls: FitControls) -> NoLatentFit:
    xzd = design_xz(ds.x, ds.z)
    logt = np.log(ds.t)
    m_coef, msr = weighted_least_squares(xzd, logt, np.ones(ds.n))
    sigma2 = max(msr, 1e-12)
    t_coef = m_coef.copy()
    t_coef[0] -= sigma2 / 2.0
    flags = []
    nu, flagged = weighted_logistic(np.column_stack([xzd, logt]), np.asarray(ds.a, float),
                                    np.ones(ds.n))
    if flagged:
        flags.append("decision block: ridge fallback")
    params = NoLatentLognormalParams(
        t_coef=t_coef, log_sigma=float(0.5 * math.log(sigma2)), nu=nu,
        cell_logits_a=_cells_by_decision(ds),
    )
    info = _fd_hessian_info(lambda p: _nl_lognormal_loglik(p, ds), params)
    return NoLatentFit(model="lognormal", params=params,
                       loglik=_nl_lognormal_loglik(params, ds),
                       info=info, se=standard_errors(info), flags=tuple(flags))


def _nl_lognormal_curves(fit, ds, grid, level, compute_ci):
    grid = np.asarray(grid, dtype=float)
    xzd = design_xz(ds.x, ds.z)

    def admit_matrix(params):
        out = np.empty((ds.n, grid.size))
        for j, t in enumerate(grid):
            logt = np.full(ds.n, math.log(float(t)))
            out[:, j] = expit(np.column_stack([xzd, logt]) @ params.nu)
        return out

    def theta_values(params):
        return admit_matrix(params).mean(axis=0)

    def gamma_values(params):
        p = admit_matrix(params)
        pi = expit(params.cell_logits_a)
        return (pi[1] * p + pi[0] * (1.0 - p)).mean(axis=0)

    theta = _curve_with_ci(fit.info, fit.params, theta_values, grid, "theta", level, compute_ci)
    gamma = _curve_with_ci(fit.info, fit.params, gamma_values, grid, "gamma", level, compute_ci)
    return theta, gamma


def no_latent_variant(model: str, ds: Dataset, grid=None,
                      controls: FitControls = FitControls(), class_column=None,
                      level: float = 0.95, compute_ci: bool = True) -> NoLatentResult:
    """Fit a latent-free variant and evaluate its fixed-time curves."""
    from .effects import DEFAULT_GRID_HOURS

    grid = DEFAULT_GRID_HOURS if grid is None else np.asarray(grid, dtype=float)
    if model == "brownian":
        fit = _fit_no_latent_brownian(ds, class_column, controls)
        theta, gamma = _nl_brownian_curves(fit, ds, grid, level, compute_ci)
    elif model == "lognormal":
        fit = _fit_no_latent_lognormal(ds, controls)
        theta, gamma = _nl_lognormal_curves(fit, ds, grid, level, compute_ci)
    else:
        raise ParameterDomainError(f"unknown no-latent model {model!r}")
    return NoLatentResult(fit=fit, theta=theta, gamma=gamma)


def embed_no_latent_in_full(nl: NoLatentFit, ds: Dataset) -> LatentModelParams:
    """Express a fitted no-latent boundary model as a point of the full family.

    The drift class becomes the latent class: the class prior regresses the
    proxy column on x, the proxy models are fit with the class observed (the
    class column itself separates, which the ridge fallback caps), and the
    decision block is copied.  Useful as a warm start and for nesting checks.
    """
    if nl.model != "brownian":
        raise ParameterDomainError("only the boundary-process variant embeds in the full model")
    params = nl.params
    zeta = ds.z[:, params.class_column]
    xd = design_x(ds.x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eta, _ = weighted_logistic(xd, zeta, np.ones(ds.n))
        n = ds.n
        design = np.vstack(
            [np.column_stack([xd, np.zeros(n)]), np.column_stack([xd, np.ones(n)])]
        )
        wts = np.concatenate([1.0 - zeta, zeta])
        z_models = []
        for j, kind in enumerate(ds.schema.z_kinds):
            labels = np.concatenate([ds.z[:, j], ds.z[:, j]])
            if kind == "binary":
                coef, _ = weighted_logistic(design, labels, wts)
                z_models.append(ZComponentParams(kind, coef))
            else:
                coef, msr = weighted_least_squares(design, labels, wts)
                z_models.append(ZComponentParams(kind, coef, float(np.log(max(msr, 1e-12)))))
    cells = np.vstack([params.cell_logits_a, params.cell_logits_a])
    return LatentModelParams(
        eta_h=eta,
        z_models=tuple(z_models),
        beta_b=params.beta_b.copy(),
        beta_c=params.beta_c.copy(),
        delta=params.delta.copy(),
        cell_logits=cells,
    )
