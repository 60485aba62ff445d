"""Tilted-likelihood refits that systematically violate the conditional
independence between the decision process and the potential outcomes.

Each row's (decision, time, outcome) block is multiplied by psi1^(a*y) when
admitted and psi0^((1-a)*y) when discharged, then renormalized over decision,
time and outcome jointly so the block stays a proper density given the class
and covariates.  The neutral tilt (1, 1) is routed through the base fitter,
so it reproduces the untilted fit exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit, logsumexp

from . import emfit, fpt
from .data import Dataset
from .effects import gamma_curve
from .emfit import FitControls, FitResult, StartDiagnostics
from .errors import FitError, ParameterDomainError
from .latentmodel import (
    LatentModelParams,
    class_prior_and_proxy_ll,
    class_proxy_score,
    complete_loglik_matrix,
    complete_score,
    design_x,
    design_xz,
    row_links_batch,
)

PSI_GRID_VALUES = (0.95, 0.975, 1.0, 1.025, 1.05)


@dataclass(frozen=True)
class PsiConfig:
    """Tilting factors for the admitted (psi1) and discharged (psi0) channels."""

    psi0: float = 1.0
    psi1: float = 1.0

    def __post_init__(self):
        if not (self.psi0 > 0.0 and self.psi1 > 0.0):
            raise ParameterDomainError("tilting factors must be strictly positive")

    @property
    def neutral(self) -> bool:
        return self.psi0 == 1.0 and self.psi1 == 1.0


def default_psi_grid() -> list[PsiConfig]:
    return [PsiConfig(p0, p1) for p0 in PSI_GRID_VALUES for p1 in PSI_GRID_VALUES]


# ---------------------------------------------------------------------------
# tilted likelihood


def _tilt_pieces(params: LatentModelParams, ds: Dataset, psi: PsiConfig):
    """Per-row/class normalizer pieces: (log C, P1, k0, k1, pi)."""
    links = row_links_batch(params, ds.x, ds.z)
    pi = expit(params.cell_logits)  # (2, 2) [h, a]
    k0 = 1.0 - pi[:, 0] + pi[:, 0] * psi.psi0  # (2,)
    k1 = 1.0 - pi[:, 1] + pi[:, 1] * psi.psi1
    p1 = np.empty((ds.n, 2))
    for h in (0, 1):
        p1[:, h] = fpt._exit_prob_upper_batch(links.b, links.c, links.d[h] * links.b)
    c_norm = k0[None, :] + p1 * (k1 - k0)[None, :]
    return np.log(c_norm), p1, k0, k1, pi


def tilted_complete_ll(params: LatentModelParams, ds: Dataset, psi: PsiConfig) -> np.ndarray:
    """(n, 2) complete-data log-likelihood under the tilt."""
    ll = complete_loglik_matrix(params, ds)
    log_c, *_ = _tilt_pieces(params, ds, psi)
    ay = (ds.a * ds.y).astype(float)
    ny = ((1 - ds.a) * ds.y).astype(float)
    tilt = ay * math.log(psi.psi1) + ny * math.log(psi.psi0)
    return ll + tilt[:, None] - log_c


def tilted_observed_loglik(params: LatentModelParams, ds: Dataset, psi: PsiConfig) -> float:
    return float(logsumexp(tilted_complete_ll(params, ds, psi), axis=1).sum())


def _tilted_posterior_and_ll(params, ds, psi):
    ll = tilted_complete_ll(params, ds, psi)
    w1 = expit(ll[:, 1] - ll[:, 0])
    total = float(np.logaddexp(ll[:, 0], ll[:, 1]).sum())
    return np.column_stack([1.0 - w1, w1]), total


def tilted_complete_score(params: LatentModelParams, ds: Dataset, psi: PsiConfig) -> np.ndarray:
    """Analytic (n, 2, q) score of the tilted complete-data log-likelihood."""
    s = complete_score(params, ds)
    log_c, p1, k0, k1, pi = _tilt_pieces(params, ds, psi)
    c_norm = np.exp(log_c)
    links = row_links_batch(params, ds.x, ds.z)
    xd = design_x(ds.x)
    xzd = design_xz(ds.x, ds.z)

    hz = class_proxy_score(params.eta_h, params.z_models, ds.x, ds.z).shape[2]
    nb, nc = params.beta_b.size, params.beta_c.size
    for h in (0, 1):
        u = 2.0 * links.d[h] * links.b**2
        _, dp_du, dp_dc = fpt._exit_prob_upper_uc_grads(u, links.c)
        scale = (k1[h] - k0[h]) / c_norm[:, h]
        s[:, h, hz : hz + nb] -= (scale * dp_du * 2.0 * u)[:, None] * xd
        s[:, h, hz + nb : hz + nb + nc] -= (
            scale * dp_dc * links.c * (1.0 - links.c)
        )[:, None] * xzd
        s[:, h, hz + nb + nc] -= scale * dp_du * u
        if h == 1:
            s[:, h, hz + nb + nc + 1] -= scale * dp_du * u
        # outcome cells: d k_a / d logit = pi (1 - pi) (psi_a - 1)
        base = hz + nb + nc + 2
        dk0 = pi[h, 0] * (1.0 - pi[h, 0]) * (psi.psi0 - 1.0)
        dk1 = pi[h, 1] * (1.0 - pi[h, 1]) * (psi.psi1 - 1.0)
        s[:, h, base + 2 * h] -= (1.0 - p1[:, h]) * dk0 / c_norm[:, h]
        s[:, h, base + 2 * h + 1] -= p1[:, h] * dk1 / c_norm[:, h]
    return s


# ---------------------------------------------------------------------------
# tilted M step: joint quasi-Newton over the decision block and outcome cells


def _joint_theta(params: LatentModelParams) -> np.ndarray:
    return np.concatenate(
        [params.beta_b, params.beta_c, params.delta, params.cell_logits.ravel()]
    )


def _with_joint_theta(params: LatentModelParams, theta) -> LatentModelParams:
    nb, nc = params.beta_b.size, params.beta_c.size
    return replace(
        params,
        beta_b=theta[:nb].copy(),
        beta_c=theta[nb : nb + nc].copy(),
        delta=theta[nb + nc : nb + nc + 2].copy(),
        cell_logits=theta[nb + nc + 2 :].reshape(2, 2).copy(),
    )


def _joint_q_and_grad(theta, params, ds, W, psi):
    """Expected tilted objective for the decision + outcome block."""
    trial = _with_joint_theta(params, np.asarray(theta, dtype=float))
    links = row_links_batch(trial, ds.x, ds.z)
    xd = design_x(ds.x)
    xzd = design_xz(ds.x, ds.z)
    a = np.asarray(ds.a, dtype=float)
    y = np.asarray(ds.y, dtype=float)
    log_c, p1, k0, k1, pi = _tilt_pieces(trial, ds, psi)

    nb, nc = xd.shape[1], xzd.shape[1]
    q_val = 0.0
    grad = np.zeros(theta.shape[0])
    for h in (0, 1):
        wh = W[:, h]
        mu = links.d[h] * links.b
        logg, db, dc, dmu = fpt.log_density_batch(ds.t, links.b, links.c, mu, a, grad=True)
        cell = trial.cell_logits[h, ds.a]
        ll_y = y * log_expit(cell) + (1.0 - y) * log_expit(-cell)
        q_val += float(wh @ (logg + ll_y - log_c[:, h]))

        u = 2.0 * links.d[h] * links.b**2
        _, dp_du, dp_dc = fpt._exit_prob_upper_uc_grads(u, links.c)
        scale = (k1[h] - k0[h]) / np.exp(log_c[:, h])

        grad[:nb] += (wh * (links.b * (db + links.d[h] * dmu) - scale * dp_du * 2.0 * u)) @ xd
        grad[nb : nb + nc] += (
            wh * (dc - scale * dp_dc) * links.c * (1.0 - links.c)
        ) @ xzd
        g_d0 = float(wh @ (dmu * mu - scale * dp_du * u))
        grad[nb + nc] += g_d0
        if h == 1:
            grad[nb + nc + 1] += g_d0
        # cells
        base = nb + nc + 2
        resid = y - expit(cell)
        dk0 = pi[h, 0] * (1.0 - pi[h, 0]) * (psi.psi0 - 1.0)
        dk1 = pi[h, 1] * (1.0 - pi[h, 1]) * (psi.psi1 - 1.0)
        for aa in (0, 1):
            mask = ds.a == aa
            grad[base + 2 * h + aa] += float(wh[mask] @ resid[mask])
        grad[base + 2 * h] -= float(wh @ ((1.0 - p1[:, h]) * dk0 / np.exp(log_c[:, h])))
        grad[base + 2 * h + 1] -= float(wh @ (p1[:, h] * dk1 / np.exp(log_c[:, h])))
    return q_val, grad


def _tilted_m_step(params, ds, W, psi, controls, notes):
    n = ds.n
    xd = design_x(ds.x)
    eta_new, flagged = emfit.weighted_logistic(xd, W[:, 1], np.ones(n), init=params.eta_h)
    if flagged:
        notes.append("eta_h: ridge fallback")
    if emfit._eta_block_q(eta_new, xd, W) < emfit._eta_block_q(params.eta_h, xd, W) - 1e-10:
        eta_new = params.eta_h

    design = np.vstack([np.column_stack([xd, np.zeros(n)]), np.column_stack([xd, np.ones(n)])])
    wts = np.concatenate([W[:, 0], W[:, 1]])
    z_new = []
    for j, zm in enumerate(params.z_models):
        zj = ds.z[:, j]
        labels = np.concatenate([zj, zj])
        if zm.kind == "binary":
            coef, flagged = emfit.weighted_logistic(design, labels, wts, init=zm.coef)
            if flagged:
                notes.append(f"z[{j}]: ridge fallback")
            cand = replace(zm, coef=coef)
        else:
            coef, msr = emfit.weighted_least_squares(design, labels, wts)
            cand = replace(zm, coef=coef, log_var=float(np.log(max(msr, 1e-12))))
        if emfit._z_block_q(cand, xd, zj, W) < emfit._z_block_q(zm, xd, zj, W) - 1e-10:
            cand = zm
        z_new.append(cand)
    mid = replace(params, eta_h=eta_new, z_models=tuple(z_new))

    theta0 = _joint_theta(mid)
    res = minimize(
        lambda th: tuple(-v for v in _joint_q_and_grad(th, mid, ds, W, psi)),
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": controls.inner_max_iter, "gtol": controls.inner_gtol,
                 "ftol": 1e-14},
    )
    q_new, _ = _joint_q_and_grad(res.x, mid, ds, W, psi)
    q_old, _ = _joint_q_and_grad(theta0, mid, ds, W, psi)
    theta = res.x if q_new >= q_old - 1e-10 else theta0
    return _with_joint_theta(mid, theta)


# ---------------------------------------------------------------------------
# driver


def tilted_fit(ds: Dataset, psi: PsiConfig, controls: FitControls = FitControls(),
               init: LatentModelParams | None = None,
               compute_information: bool = True) -> FitResult:
    """Refit the full model under a tilt; psi = (1, 1) is exactly the base fit."""
    if psi.neutral:
        return emfit.fit(ds, init=init, controls=controls,
                         compute_information=compute_information)

    starts: list[tuple[str, LatentModelParams]] = []
    if init is not None:
        starts.append(("explicit", init))
    else:
        base = emfit.fit(ds, controls=controls, compute_information=False)
        starts.append(("base-fit", base.params))

    results, diagnostics = [], []
    for idx, (kind, p0) in enumerate(starts):
        try:
            params = p0
            notes: list[str] = []
            trace = []
            converged = False
            W, ll = _tilted_posterior_and_ll(params, ds, psi)
            for _ in range(controls.max_iter):
                params = _tilted_m_step(params, ds, W, psi, controls, notes)
                W, ll_new = _tilted_posterior_and_ll(params, ds, psi)
                trace.append(ll_new)
                if abs(ll_new - ll) < controls.rel_tol * (1.0 + abs(ll_new)):
                    converged = True
                    break
                ll = ll_new
            results.append((params, np.asarray(trace), converged, len(trace), notes))
            diagnostics.append(StartDiagnostics(
                start=idx, kind=kind, loglik=float(trace[-1]), iterations=len(trace),
                converged=converged, messages=tuple(notes)))
        except Exception as exc:
            diagnostics.append(StartDiagnostics(
                start=idx, kind=kind, loglik=float("-inf"), iterations=0,
                converged=False, messages=(f"failed: {exc!r}",)))
    if not results:
        raise FitError("tilted fit failed", diagnostics=diagnostics)

    best = int(np.argmax([r[1][-1] for r in results]))
    params, trace, converged, iters, notes = results[best]

    if compute_information:
        def posterior_fn(vec):
            W, _ = _tilted_posterior_and_ll(params.with_flat(vec), ds, psi)
            return W

        def score_sum_fn(vec, W):
            s = tilted_complete_score(params.with_flat(vec), ds, psi)
            return np.einsum("nh,nhq->q", W, s)

        info = emfit.oakes_information_core(
            params.flatten(), posterior_fn, score_sum_fn, names=params.param_names()
        )
        se = emfit.standard_errors(info)
    else:
        q = params.n_params
        info = np.full((q, q), np.nan)
        se = np.full(q, np.nan)

    w_fin, _ = _tilted_posterior_and_ll(params, ds, psi)
    grad = np.einsum("nh,nhq->q", w_fin, tilted_complete_score(params, ds, psi))
    return FitResult(
        params=params, loglik_trace=trace, info=info, converged=converged,
        iterations=iters, se=se, gradient_norm=float(np.linalg.norm(grad)),
        messages=tuple(notes), starts=tuple(diagnostics), seed=controls.seed,
    )


# ---------------------------------------------------------------------------
# grid table


@dataclass(frozen=True)
class SensitivityRow:
    psi0: float
    psi1: float
    t_hours: float
    estimate: float
    se: float
    lo: float
    hi: float
    converged: bool


def sensitivity_table(ds: Dataset, psi_grid=None, times=(0.5, 1.0, 2.0, 3.0),
                      controls: FitControls = FitControls(),
                      level: float = 0.95) -> list[SensitivityRow]:
    """Outcome-curve estimates per tilt cell, long format; failures leave NaN
    rows flagged as unconverged rather than aborting the grid."""
    psi_grid = default_psi_grid() if psi_grid is None else list(psi_grid)
    base = emfit.fit(ds, controls=controls)
    rows: list[SensitivityRow] = []
    for psi in psi_grid:
        try:
            res = (
                base
                if psi.neutral
                else tilted_fit(ds, psi, controls=controls, init=base.params)
            )
            curve = gamma_curve(res, ds, np.asarray(times, dtype=float), level=level)
            for j, t in enumerate(times):
                rows.append(SensitivityRow(
                    psi0=psi.psi0, psi1=psi.psi1, t_hours=float(t),
                    estimate=float(curve.estimate[j]), se=float(curve.se[j]),
                    lo=float(curve.ci_low[j]), hi=float(curve.ci_high[j]),
                    converged=bool(res.converged),
                ))
        except Exception:
            for t in times:
                rows.append(SensitivityRow(
                    psi0=psi.psi0, psi1=psi.psi1, t_hours=float(t),
                    estimate=float("nan"), se=float("nan"),
                    lo=float("nan"), hi=float("nan"), converged=False,
                ))
    return rows
