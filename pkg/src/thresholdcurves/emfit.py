"""EM maximum likelihood for the latent-class model, with Oakes-identity
information and delta-method confidence intervals.

The M step maximizes the expected complete-data objective block by block:
soft-label logistic regression for the class prior, per-component logistic or
weighted-least-squares updates for the proxies, closed-form weighted
proportions for the outcome cells, and quasi-Newton ascent for the decision
block (boundary, start, drifts).  Every block keeps its previous value if the
candidate update would lower its contribution, so each sweep is monotone up
to float noise.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from scipy.stats import norm

from .data import ColumnSchema, Dataset
from .errors import (
    ConditioningWarning,
    FitError,
    InformationError,
    OptimizerWarning,
    SeparationWarning,
)
from .latentmodel import (
    LatentModelParams,
    ZComponentParams,
    complete_loglik_matrix,
    complete_score,
    design_x,
    design_xz,
    observed_score,
    threshold_q_and_grad,
    threshold_theta,
    with_threshold_theta,
)

_LOG_2PI = float(np.log(2.0 * np.pi))
_RIDGE = 1e-6
_COEF_BLOWUP = 30.0


@dataclass(frozen=True)
class PosteriorWeights:
    """Per-row responsibilities P(H=1 | full row)."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or np.any((w < 0.0) | (w > 1.0)):
            raise ValueError("weights must be a 1-d array inside [0, 1]")
        object.__setattr__(self, "w", w)

    def matrix(self) -> np.ndarray:
        return np.column_stack([1.0 - self.w, self.w])


@dataclass(frozen=True)
class FitControls:
    max_iter: int = 500
    rel_tol: float = 1e-8
    n_starts: int = 5
    seed: int = 0
    inner_max_iter: int = 200  # quasi-Newton iterations inside one M step
    inner_gtol: float = 1e-6


@dataclass(frozen=True)
class StartDiagnostics:
    start: int
    kind: str
    loglik: float
    iterations: int
    converged: bool
    messages: tuple[str, ...] = ()


@dataclass(frozen=True)
class FitResult:
    params: LatentModelParams
    loglik_trace: np.ndarray
    info: np.ndarray
    converged: bool
    iterations: int
    se: np.ndarray
    gradient_norm: float
    messages: tuple[str, ...] = ()
    starts: tuple[StartDiagnostics, ...] = ()
    seed: int = 0

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    def to_json(self, schema: ColumnSchema | None = None) -> dict:
        names = self.params.param_names(schema)
        return {
            "params": self.params.to_json(schema),
            "se": {n: float(s) for n, s in zip(names, self.se)},
            "info": self.info.tolist(),
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
            "messages": list(self.messages),
            "starts": [
                {
                    "start": s.start,
                    "kind": s.kind,
                    "loglik": float(s.loglik),
                    "iterations": s.iterations,
                    "converged": s.converged,
                    "messages": list(s.messages),
                }
                for s in self.starts
            ],
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, doc: dict, schema: ColumnSchema) -> "FitResult":
        params = LatentModelParams.from_json(doc["params"], schema)
        names = params.param_names(schema)
        return cls(
            params=params,
            loglik_trace=np.asarray(doc["loglik_trace"], dtype=float),
            info=np.asarray(doc["info"], dtype=float),
            converged=bool(doc["converged"]),
            iterations=int(doc["iterations"]),
            se=np.array([doc["se"][n] for n in names]),
            gradient_norm=float(doc["gradient_norm"]),
            messages=tuple(doc.get("messages", ())),
            starts=tuple(
                StartDiagnostics(
                    start=s["start"], kind=s["kind"], loglik=s["loglik"],
                    iterations=s["iterations"], converged=s["converged"],
                    messages=tuple(s.get("messages", ())),
                )
                for s in doc.get("starts", ())
            ),
            seed=int(doc.get("seed", 0)),
        )

    def save(self, path, schema: ColumnSchema | None = None):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(schema), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, schema: ColumnSchema) -> "FitResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh), schema)


# ---------------------------------------------------------------------------
# shared weighted solvers (also used by the comparator fitters)


def _logistic_obj(beta, X, y, w, ridge):
    u = X @ beta
    ll = float(w @ (y * log_expit(u) + (1.0 - y) * log_expit(-u)))
    return ll - 0.5 * ridge * float(beta @ beta)


def weighted_logistic(X, y, w, init=None, ridge=0.0, max_iter=100, tol=1e-10):
    """Newton/IRLS for weighted logistic regression with soft labels.

    Returns (coef, separable_flag).  On separation or a failed solve the fit
    restarts with a small ridge penalty and flags it.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    beta = np.zeros(X.shape[1]) if init is None else np.asarray(init, dtype=float).copy()

    for _ in range(max_iter):
        u = X @ beta
        p = expit(u)
        g = X.T @ (w * (y - p)) - ridge * beta
        hw = w * p * (1.0 - p)
        H = (X * hw[:, None]).T @ X + (ridge + 1e-12) * np.eye(X.shape[1])
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            if ridge > 0.0:
                return beta, True
            return weighted_logistic(X, y, w, init=init, ridge=_RIDGE,
                                     max_iter=max_iter, tol=tol)[0], True
        # halve until the penalized objective does not decrease
        f0 = _logistic_obj(beta, X, y, w, ridge)
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            if _logistic_obj(cand, X, y, w, ridge) >= f0 - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
        if np.max(np.abs(beta)) > _COEF_BLOWUP and ridge == 0.0:
            coef, _ = weighted_logistic(X, y, w, init=None, ridge=_RIDGE,
                                        max_iter=max_iter, tol=tol)
            return coef, True
        if np.max(np.abs(scale * step)) < tol:
            break
    return beta, ridge > 0.0


def weighted_least_squares(X, y, w):
    """Closed-form weighted least squares; returns (coef, weighted mean sq resid)."""
    sw = np.sqrt(np.asarray(w, dtype=float))
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ coef
    msr = float((w * resid**2).sum() / w.sum())
    return coef, msr


def cell_logits_from_weights(W, a, y, fallback):
    """Weighted outcome proportions per (class, decision) cell, on logit scale."""
    logits = fallback.copy()
    y = np.asarray(y, dtype=float)
    for h in (0, 1):
        for aa in (0, 1):
            mask = a == aa
            denom = W[mask, h].sum()
            if denom <= 1e-12:
                continue  # empty cell keeps its previous value
            pi = float((W[mask, h] * y[mask]).sum() / denom)
            pi = min(max(pi, 1e-10), 1.0 - 1e-10)
            logits[h, aa] = np.log(pi / (1.0 - pi))
    return logits


# ---------------------------------------------------------------------------
# E and M steps


def _posterior_and_ll(params: LatentModelParams, ds: Dataset):
    ll = complete_loglik_matrix(params, ds)
    w1 = expit(ll[:, 1] - ll[:, 0])
    total = float(np.logaddexp(ll[:, 0], ll[:, 1]).sum())
    return np.column_stack([1.0 - w1, w1]), total


def e_step(params: LatentModelParams, ds: Dataset) -> PosteriorWeights:
    """Posterior responsibilities for the high-needs class."""
    W, _ = _posterior_and_ll(params, ds)
    return PosteriorWeights(w=W[:, 1])


def _eta_block_q(eta, xd, W):
    u = xd @ eta
    return float(W[:, 1] @ log_expit(u) + W[:, 0] @ log_expit(-u))


def _z_block_q(zm: ZComponentParams, xd, zj, W):
    q = 0.0
    for h in (0, 1):
        v = xd @ zm.coef[:-1] + zm.coef[-1] * h
        if zm.kind == "binary":
            q += float(W[:, h] @ (zj * log_expit(v) + (1.0 - zj) * log_expit(-v)))
        else:
            var = np.exp(zm.log_var)
            q += float(W[:, h] @ (-0.5 * (_LOG_2PI + zm.log_var) - (zj - v) ** 2 / (2.0 * var)))
    return q


def _cells_q(logits, W, a, y):
    q = 0.0
    y = np.asarray(y, dtype=float)
    for h in (0, 1):
        cell = logits[h, a]
        q += float(W[:, h] @ (y * log_expit(cell) + (1.0 - y) * log_expit(-cell)))
    return q


def m_step(
    params: LatentModelParams,
    ds: Dataset,
    weights: PosteriorWeights,
    controls: FitControls = FitControls(),
    messages: list | None = None,
) -> LatentModelParams:
    """One block-wise maximization sweep of the expected complete-data objective."""
    notes = messages if messages is not None else []
    W = weights.matrix()
    xd = design_x(ds.x)
    n = ds.n

    # (i) class prior from soft labels
    eta_new, flagged = weighted_logistic(xd, W[:, 1], np.ones(n), init=params.eta_h)
    if flagged:
        notes.append("eta_h: ridge fallback (separable soft labels)")
        warnings.warn("class-prior block was separable; ridge applied", SeparationWarning)
    if _eta_block_q(eta_new, xd, W) < _eta_block_q(params.eta_h, xd, W) - 1e-10:
        eta_new = params.eta_h

    # (ii) proxy components on the class-duplicated design
    design = np.vstack([np.column_stack([xd, np.zeros(n)]), np.column_stack([xd, np.ones(n)])])
    wts = np.concatenate([W[:, 0], W[:, 1]])
    z_new = []
    for j, zm in enumerate(params.z_models):
        zj = ds.z[:, j]
        labels = np.concatenate([zj, zj])
        if zm.kind == "binary":
            coef, flagged = weighted_logistic(design, labels, wts, init=zm.coef)
            if flagged:
                notes.append(f"z[{j}]: ridge fallback (separable)")
                warnings.warn(f"proxy block {j} was separable; ridge applied", SeparationWarning)
            cand = ZComponentParams(zm.kind, coef)
        else:
            coef, msr = weighted_least_squares(design, labels, wts)
            cand = ZComponentParams(zm.kind, coef, float(np.log(max(msr, 1e-12))))
        if _z_block_q(cand, xd, zj, W) < _z_block_q(zm, xd, zj, W) - 1e-10:
            cand = zm
        z_new.append(cand)

    # (iii) outcome cells
    cells = cell_logits_from_weights(W, ds.a, ds.y, params.cell_logits)
    if _cells_q(cells, W, ds.a, ds.y) < _cells_q(params.cell_logits, W, ds.a, ds.y) - 1e-10:
        cells = params.cell_logits

    # (iv) decision block by quasi-Newton ascent
    theta0 = threshold_theta(params)
    res = minimize(
        lambda th: _neg_threshold_q(th, params, ds, W),
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": controls.inner_max_iter,
            "gtol": controls.inner_gtol,
            "ftol": 1e-14,
        },
    )
    if not res.success and "ABNORMAL" in str(res.message).upper():
        notes.append(f"decision block line search stopped early: {res.message}")
        warnings.warn(f"decision-block optimizer stopped early: {res.message}", OptimizerWarning)
    q_new, _ = threshold_q_and_grad(res.x, params, ds, W)
    q_old, _ = threshold_q_and_grad(theta0, params, ds, W)
    theta = res.x if q_new >= q_old - 1e-10 else theta0

    out = replace(params, eta_h=eta_new, z_models=tuple(z_new), cell_logits=cells)
    return with_threshold_theta(out, theta)


def _neg_threshold_q(theta, params, ds, W):
    q, g = threshold_q_and_grad(theta, params, ds, W)
    return -q, -g


# ---------------------------------------------------------------------------
# initialization


def _random_init(template: LatentModelParams, ds: Dataset, rng) -> LatentModelParams:
    vec = 0.25 * rng.standard_normal(template.n_params)
    cand = template.with_flat(vec)
    y_rate = float(np.clip(ds.y.mean(), 1e-6, 1 - 1e-6))
    y_logit = float(np.log(y_rate / (1.0 - y_rate)))
    z_models = []
    for j, zm in enumerate(cand.z_models):
        if zm.kind == "continuous":
            z_models.append(replace(zm, log_var=float(np.log(ds.z[:, j].var() + 1e-6))))
        else:
            z_models.append(zm)
    return replace(
        cand,
        z_models=tuple(z_models),
        delta=np.zeros(2),
        cell_logits=np.full((2, 2), y_logit),
    )


def _warm_init(template: LatentModelParams, ds: Dataset, controls: FitControls) -> LatentModelParams:
    """Cheap start that treats the observed decision as the latent class."""
    n = ds.n
    xd = design_x(ds.x)
    a = np.asarray(ds.a, dtype=float)
    eta, _ = weighted_logistic(xd, a, np.ones(n))

    design = np.vstack([np.column_stack([xd, np.zeros(n)]), np.column_stack([xd, np.ones(n)])])
    wts = np.concatenate([1.0 - a, a])
    z_models = []
    for j, zm in enumerate(template.z_models):
        labels = np.concatenate([ds.z[:, j], ds.z[:, j]])
        if zm.kind == "binary":
            coef, _ = weighted_logistic(design, labels, wts)
            z_models.append(ZComponentParams(zm.kind, coef))
        else:
            coef, msr = weighted_least_squares(design, labels, wts)
            z_models.append(ZComponentParams(zm.kind, coef, float(np.log(max(msr, 1e-12)))))

    cells = np.zeros((2, 2))
    for aa in (0, 1):
        rate = float(np.clip(ds.y[ds.a == aa].mean() if np.any(ds.a == aa) else ds.y.mean(),
                             1e-6, 1 - 1e-6))
        cells[:, aa] = np.log(rate / (1.0 - rate))

    base = replace(template, eta_h=eta, z_models=tuple(z_models),
                   beta_b=np.zeros_like(template.beta_b),
                   beta_c=np.zeros_like(template.beta_c),
                   delta=np.zeros(2), cell_logits=cells)
    W = np.column_stack([1.0 - a, a])
    res = minimize(
        lambda th: _neg_threshold_q(th, base, ds, W),
        threshold_theta(base),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": controls.inner_max_iter, "gtol": controls.inner_gtol, "ftol": 1e-14},
    )
    return with_threshold_theta(base, res.x)


def _template(ds: Dataset) -> LatentModelParams:
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


# ---------------------------------------------------------------------------
# EM driver


def _em_single(params, ds, controls):
    trace = []
    messages: list[str] = []
    converged = False
    W, ll = _posterior_and_ll(params, ds)
    for it in range(1, controls.max_iter + 1):
        params = m_step(params, ds, PosteriorWeights(W[:, 1]), controls, messages)
        W, ll_new = _posterior_and_ll(params, ds)
        trace.append(ll_new)
        if abs(ll_new - ll) < controls.rel_tol * (1.0 + abs(ll_new)):
            converged = True
            ll = ll_new
            break
        ll = ll_new
    return params, np.asarray(trace), converged, len(trace), messages


def fit(
    ds: Dataset,
    init: LatentModelParams | None = None,
    controls: FitControls = FitControls(),
    compute_information: bool = True,
) -> FitResult:
    """EM fit with multi-start; keeps the start with the best final loglik."""
    template = _template(ds)
    starts: list[tuple[str, LatentModelParams]] = []
    if init is not None:
        init.validate_for(ds.schema.k, ds.schema.p, ds.schema.z_kinds)
        starts.append(("explicit", init))
    else:
        starts.append(("warm", _warm_init(template, ds, controls)))
        seeds = np.random.SeedSequence(controls.seed).spawn(max(controls.n_starts - 1, 0))
        for s, ss in enumerate(seeds):
            starts.append((f"random{s}", _random_init(template, ds, np.random.default_rng(ss))))

    results = []
    diagnostics = []
    for idx, (kind, p0) in enumerate(starts):
        try:
            out = _em_single(p0, ds, controls)
            results.append(out)
            diagnostics.append(
                StartDiagnostics(
                    start=idx, kind=kind, loglik=float(out[1][-1]),
                    iterations=out[3], converged=out[2], messages=tuple(out[4]),
                )
            )
        except Exception as exc:  # keep going; other starts may succeed
            diagnostics.append(
                StartDiagnostics(
                    start=idx, kind=kind, loglik=float("-inf"), iterations=0,
                    converged=False, messages=(f"failed: {exc!r}",),
                )
            )

    if not results:
        raise FitError("every EM start failed", diagnostics=diagnostics)

    best_idx = int(np.argmax([r[1][-1] for r in results]))
    params, trace, converged, iters, messages = results[best_idx]

    if compute_information:
        info = oakes_information(params, ds)
        se = standard_errors(info)
    else:
        q = params.n_params
        info = np.full((q, q), np.nan)
        se = np.full(q, np.nan)
    grad_norm = float(np.linalg.norm(observed_score(params, ds)))
    return FitResult(
        params=params,
        loglik_trace=trace,
        info=info,
        converged=converged,
        iterations=iters,
        se=se,
        gradient_norm=grad_norm,
        messages=tuple(messages),
        starts=tuple(diagnostics),
        seed=controls.seed,
    )


# ---------------------------------------------------------------------------
# Oakes-identity observed information


def standard_errors(info: np.ndarray) -> np.ndarray:
    """sqrt(diag(info^-1)), falling back to the pseudo-inverse with a warning."""
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        warnings.warn("information matrix singular; using pseudo-inverse", ConditioningWarning)
        cov = np.linalg.pinv(info)
    diag = np.diag(cov).copy()
    bad = diag < 0
    if bad.any():
        warnings.warn("negative variance estimates clipped to zero", ConditioningWarning)
        diag[bad] = 0.0
    return np.sqrt(diag)


def oakes_information_core(theta_hat, posterior_fn, score_sum_fn, step_scale=1e-4,
                           names=None):
    """Observed information via the Oakes identity with central differences.

    ``posterior_fn(vec)`` gives the (n, 2) responsibilities at vec;
    ``score_sum_fn(vec, W)`` gives the expected complete-data score, i.e.
    the gradient in the first argument of Q(theta, theta').  The two Hessian
    blocks are the derivative of that gradient in theta (at fixed weights)
    and in theta' (through the weights).
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    q = theta_hat.size
    steps = step_scale * np.maximum(1.0, np.abs(theta_hat))
    w_hat = posterior_fn(theta_hat)

    h_theta = np.empty((q, q))
    h_mixed = np.empty((q, q))
    for j in range(q):
        e = np.zeros(q)
        e[j] = steps[j]
        h_theta[:, j] = (
            score_sum_fn(theta_hat + e, w_hat) - score_sum_fn(theta_hat - e, w_hat)
        ) / (2.0 * steps[j])
        h_mixed[:, j] = (
            score_sum_fn(theta_hat, posterior_fn(theta_hat + e))
            - score_sum_fn(theta_hat, posterior_fn(theta_hat - e))
        ) / (2.0 * steps[j])

    info = -(h_theta + h_mixed)
    if not np.all(np.isfinite(info)):
        bad = np.argwhere(~np.isfinite(info))[0]
        label = (
            f"({names[bad[0]]}, {names[bad[1]]})" if names is not None else f"{tuple(bad)}"
        )
        raise InformationError(f"non-finite information entry at coordinate pair {label}")
    return 0.5 * (info + info.T)


def oakes_information(params_hat: LatentModelParams, ds: Dataset, step_scale=1e-4,
                      check_step_halving=False) -> np.ndarray:
    """Observed information of the latent-class model at params_hat."""

    def posterior_fn(vec):
        W, _ = _posterior_and_ll(params_hat.with_flat(vec), ds)
        return W

    def score_sum_fn(vec, W):
        s = complete_score(params_hat.with_flat(vec), ds)
        return np.einsum("nh,nhq->q", W, s)

    names = params_hat.param_names()
    info = oakes_information_core(
        params_hat.flatten(), posterior_fn, score_sum_fn, step_scale, names
    )
    if check_step_halving:
        half = oakes_information_core(
            params_hat.flatten(), posterior_fn, score_sum_fn, step_scale / 2.0, names
        )
        denom = max(float(np.linalg.norm(info)), 1e-12)
        drift = float(np.linalg.norm(half - info)) / denom
        if drift > 1e-3:
            warnings.warn(
                f"information estimate moved {drift:.2e} under step halving",
                ConditioningWarning,
            )
    return info


# ---------------------------------------------------------------------------
# delta method


def _solve_cov(info, vectors):
    """info^-1 @ vectors with a pseudo-inverse fallback."""
    try:
        return np.linalg.solve(info, vectors)
    except np.linalg.LinAlgError:
        warnings.warn("information matrix singular; using pseudo-inverse", ConditioningWarning)
        return np.linalg.pinv(info) @ vectors


def functional_gradient(params: LatentModelParams, functional, step_scale=1e-5):
    """Central-difference gradient of a scalar or vector functional of params."""
    vec = params.flatten()
    steps = step_scale * np.maximum(1.0, np.abs(vec))
    f0 = np.atleast_1d(np.asarray(functional(params), dtype=float))
    jac = np.empty((f0.size, vec.size))
    for j in range(vec.size):
        vp, vm = vec.copy(), vec.copy()
        vp[j] += steps[j]
        vm[j] -= steps[j]
        fp = np.atleast_1d(np.asarray(functional(params.with_flat(vp)), dtype=float))
        fm = np.atleast_1d(np.asarray(functional(params.with_flat(vm)), dtype=float))
        jac[:, j] = (fp - fm) / (2.0 * steps[j])
    return f0, jac


def delta_method_se(fit_or_info, params, functional, step_scale=1e-5):
    """(values, ses) for a possibly vector-valued functional of the parameters."""
    info = fit_or_info.info if hasattr(fit_or_info, "info") else np.asarray(fit_or_info)
    f0, jac = functional_gradient(params, functional, step_scale)
    sol = _solve_cov(info, jac.T)  # (q, m)
    var = np.einsum("mq,qm->m", jac, sol)
    var = np.where(var < 0.0, 0.0, var)
    return f0, np.sqrt(var)


def delta_ci(fit: FitResult, functional, level: float = 0.95):
    """Delta-method interval (estimate, lower, upper) for a scalar functional."""
    f0, se = delta_method_se(fit, fit.params, functional)
    zq = norm.ppf(0.5 + level / 2.0)
    est = float(f0[0])
    half = zq * float(se[0])
    return est, est - half, est + half
