"""First-passage toolbox for drifted Brownian motion on the interval (0, b).

The process starts at ``c*b`` with ``0 < c < 1``, drifts at rate ``mu = d*b``
and has unit diffusion variance per unit time (the diffusion scale is pinned,
not a free parameter).  Exit through the upper boundary carries label 1, exit
through 0 carries label 0, so the pair (label, exit time) has joint
sub-densities ``g(a, t)``.

Densities and CDFs use two classical series expansions: a trigonometric
(spectral) series that converges quickly for large normalized time
``tau = t / b**2`` and an image-method series that converges quickly for small
``tau``.  Each evaluation picks whichever series needs fewer terms for the
target tail bound.  Everything evaluates in log space so likelihood code never
sees a hard underflow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr

from .errors import (
    DegenerateDensityWarning,
    ParameterDomainError,
    SeriesAccuracyError,
    TimeDomainError,
)

# Per-evaluation absolute tail bound for the truncated series and the hard cap
# on the number of terms.  The cap is far above what either series needs at
# this bound for any representable positive time.
SERIES_EPS = 1e-12
MAX_TERMS = 500

# Normalized-time threshold below which the CDF uses the image series.
_CDF_TAU_SPLIT = 0.25

_LOG_2PI = math.log(2.0 * math.pi)
_TINY = 1e-300


@dataclass(frozen=True)
class FptSpec:
    """Boundary b > 0, relative start c in (0, 1), drift coefficient d.

    The effective drift of the process is ``mu = d * b``; the diffusion
    variance is fixed at 1 per unit time.
    """

    b: float
    c: float
    d: float

    def __post_init__(self):
        b, c, d = float(self.b), float(self.c), float(self.d)
        if not (np.isfinite(b) and b > 0.0):
            raise ParameterDomainError(f"boundary b must be finite and > 0, got {self.b!r}")
        if not (np.isfinite(c) and 0.0 < c < 1.0):
            raise ParameterDomainError(f"relative start c must lie in (0, 1), got {self.c!r}")
        if not np.isfinite(d):
            raise ParameterDomainError(f"drift coefficient d must be finite, got {self.d!r}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    @property
    def mu(self) -> float:
        return self.d * self.b


def _require_positive_times(t):
    t = np.asarray(t, dtype=float)
    if t.size and (not np.all(np.isfinite(t)) or np.any(t <= 0.0)):
        raise TimeDomainError("time points must be finite and > 0")
    return t


def _term_counts(tau):
    """Terms needed by each series for tail bound SERIES_EPS.

    Standard bounds for the normalized lower-exit density f(tau | w): the
    image series needs ~ 2 + sqrt(-2 tau log(2 eps sqrt(2 pi tau))) terms,
    the spectral series ~ sqrt(-2 log(pi tau eps) / (pi^2 tau)).
    """
    eps = SERIES_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        arg_s = 2.0 * eps * np.sqrt(2.0 * np.pi * tau)
        ks = np.where(
            arg_s < 1.0,
            2.0 + np.sqrt(np.maximum(-2.0 * tau * np.log(np.maximum(arg_s, _TINY)), 0.0)),
            np.sqrt(tau) + 1.0,
        )
        ks = np.maximum(ks, 2.0)

        arg_l = np.pi * tau * eps
        bl = 1.0 / (np.pi * np.sqrt(tau))
        kl = np.where(
            arg_l < 1.0,
            np.sqrt(np.maximum(-2.0 * np.log(np.maximum(arg_l, _TINY)), 0.0) / (np.pi**2 * tau)),
            bl,
        )
        kl = np.maximum(np.maximum(kl, bl), 1.0)
    return ks, kl


def _check_cap(n_terms, which):
    if n_terms > MAX_TERMS:
        raise SeriesAccuracyError(
            f"{which} series needs {n_terms} terms for tail bound {SERIES_EPS:g}, "
            f"cap is {MAX_TERMS}",
            achieved_bound=SERIES_EPS,
            terms=int(n_terms),
        )


def _small_time_sums(w, tau, n_terms, grad):
    """Scaled image-series sums (k = 0 exponent factored out).

    Returns (s0, s_w, s_tau) where log f = -1.5 log tau - 0.5 log 2pi
    - w^2/(2 tau) + log s0 and d log f / dw = s_w / s0, etc.
    """
    k = np.arange(-n_terms, n_terms + 1, dtype=float)
    a = w[:, None] + 2.0 * k  # signed image offsets
    with np.errstate(over="ignore", under="ignore"):
        ex = np.exp(-2.0 * k * (k + w[:, None]) / tau[:, None])
    s0 = (a * ex).sum(axis=1)
    if not grad:
        return s0, None, None
    a2 = a * a
    s_w = ((1.0 - a2 / tau[:, None]) * ex).sum(axis=1)
    s_tau = (a * (a2 / (2.0 * tau[:, None] ** 2) - 1.5 / tau[:, None]) * ex).sum(axis=1)
    return s0, s_w, s_tau


def _large_time_sums(w, tau, n_terms, grad):
    """Scaled spectral-series sums (k = 1 exponent factored out)."""
    k = np.arange(1, n_terms + 1, dtype=float)
    kk = k * k
    with np.errstate(over="ignore", under="ignore"):
        ex = np.exp(-(kk - 1.0) * (np.pi**2) * tau[:, None] / 2.0)
    sin_k = np.sin(np.pi * np.outer(w, k))
    l0 = (k * sin_k * ex).sum(axis=1)
    if not grad:
        return l0, None, None
    cos_k = np.cos(np.pi * np.outer(w, k))
    l_w = np.pi * (kk * cos_k * ex).sum(axis=1)
    l_tau = -(np.pi**2) / 2.0 * (kk * k * sin_k * ex).sum(axis=1)
    return l0, l_w, l_tau


def _log_f_and_grads(w, tau, grad, series=None):
    """log of the normalized lower-exit density f(tau | w) plus w/tau grads.

    ``series`` forces one representation ("small" or "large"); by default each
    element uses whichever series needs fewer terms.
    """
    n = w.shape[0]
    logf = np.empty(n)
    d_w = np.empty(n) if grad else None
    d_tau = np.empty(n) if grad else None

    ks, kl = _term_counts(tau)
    if series == "small":
        use_small = np.ones(n, dtype=bool)
    elif series == "large":
        use_small = np.zeros(n, dtype=bool)
    else:
        use_small = ks <= kl

    for small_branch in (True, False):
        idx = np.flatnonzero(use_small == small_branch)
        if idx.size == 0:
            continue
        w_, tau_ = w[idx], tau[idx]
        if small_branch:
            n_terms = int(math.ceil(ks[idx].max()))
            _check_cap(n_terms, "image")
            s0, s_w, s_tau = _small_time_sums(w_, tau_, n_terms, grad)
            s0c = np.maximum(s0, _TINY)
            logf[idx] = -0.5 * _LOG_2PI - 1.5 * np.log(tau_) - w_**2 / (2.0 * tau_) + np.log(s0c)
        else:
            n_terms = int(math.ceil(kl[idx].max()))
            _check_cap(n_terms, "spectral")
            s0, s_w, s_tau = _large_time_sums(w_, tau_, n_terms, grad)
            s0c = np.maximum(s0, _TINY)
            logf[idx] = math.log(math.pi) - (np.pi**2) * tau_ / 2.0 + np.log(s0c)
        if grad:
            ok = s0 > _TINY
            d_w[idx] = np.where(ok, s_w / s0c, 0.0)
            d_tau[idx] = np.where(ok, s_tau / s0c, 0.0)
    return logf, d_w, d_tau


def log_density_batch(t, b, c, mu, a, grad=False, series=None):
    """Elementwise log g(a, t | b, c, mu) over broadcast arrays.

    ``a`` holds boundary labels in {0, 1}.  The upper-boundary density is the
    lower-boundary one after the reflection substitution (c, mu) ->
    (1 - c, -mu).  With ``grad=True`` also returns the partial derivatives of
    log g with respect to b, c and mu (at fixed t).
    """
    t, b, c, mu, a = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (t, b, c, mu, a))
    )
    shape = t.shape
    t, b, c, mu, a = (np.ravel(v) for v in (t, b, c, mu, a))

    upper = a == 1.0
    w = np.where(upper, 1.0 - c, c)
    m = np.where(upper, -mu, mu)
    tau = t / b**2

    logf, d_w, d_tau = _log_f_and_grads(w, tau, grad, series=series)
    logg = -m * w * b - m**2 * t / 2.0 - 2.0 * np.log(b) + logf
    if not grad:
        return logg.reshape(shape)

    # Derivatives in reflected coordinates, then mapped back through the
    # substitution (dc = -dw, dmu = -dm on the upper branch).
    dlog_dw = -m * b + d_w
    dlog_dm = -w * b - m * t
    dlog_db = -m * w - 2.0 / b - (2.0 * tau / b) * d_tau
    dlog_dc = np.where(upper, -dlog_dw, dlog_dw)
    dlog_dmu = np.where(upper, -dlog_dm, dlog_dm)
    return (
        logg.reshape(shape),
        dlog_db.reshape(shape),
        dlog_dc.reshape(shape),
        dlog_dmu.reshape(shape),
    )


def fpt_logdensity(spec: FptSpec, a: int, t, series=None):
    """Log of the exit sub-density g(a, t | spec); t may be an array."""
    if a not in (0, 1):
        raise ParameterDomainError(f"boundary label must be 0 or 1, got {a!r}")
    t = _require_positive_times(t)
    out = log_density_batch(t, spec.b, spec.c, spec.mu, a, series=series)
    return out if np.ndim(out) else float(out)


def fpt_density(spec: FptSpec, a: int, t, series=None):
    """Exit sub-density g(a, t | spec), the joint density of (A, T) = (a, t)."""
    out = np.exp(fpt_logdensity(spec, a, t, series=series))
    return out if np.ndim(out) else float(out)


def _exit_prob_upper_batch(b, c, mu):
    """P(exit through the upper boundary) for arrays, via the ruin identity.

    P = (1 - exp(-2*mu*c*b)) / (1 - exp(-2*mu*b)), with limit c as mu -> 0.
    """
    b, c, mu = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (b, c, mu))
    )
    u = 2.0 * mu * b  # total log drift-to-boundary ratio
    out = np.empty(u.shape)

    tiny = np.abs(u) < 1e-12
    big_neg = u < -30.0
    big_pos = u > 30.0
    mid = ~(tiny | big_neg | big_pos)

    out[tiny] = c[tiny]
    with np.errstate(over="ignore", under="ignore"):
        out[big_pos] = -np.expm1(-u[big_pos] * c[big_pos])
        out[big_neg] = np.exp(u[big_neg] * (1.0 - c[big_neg]))
        out[mid] = np.expm1(-u[mid] * c[mid]) / np.expm1(-u[mid])
    return np.clip(out, 0.0, 1.0)


def exit_probability(spec: FptSpec) -> float:
    """P(A = 1), the probability of exiting through the upper boundary."""
    return float(_exit_prob_upper_batch(spec.b, spec.c, spec.mu))


def _exit_prob_upper_uc_grads(u, c):
    """(P1, dP1/du, dP1/dc) with u = 2*mu*b, stable across the whole u range."""
    u, c = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(c, dtype=float))
    p = np.empty(u.shape)
    dp_du = np.empty(u.shape)
    dp_dc = np.empty(u.shape)

    tiny = np.abs(u) < 1e-6
    big_pos = u > 30.0
    big_neg = u < -30.0
    mid = ~(tiny | big_pos | big_neg)

    ct, ut = c[tiny], u[tiny]
    p[tiny] = ct + ut * ct * (1.0 - ct) / 2.0
    dp_du[tiny] = ct * (1.0 - ct) / 2.0
    dp_dc[tiny] = 1.0 + ut * (1.0 - 2.0 * ct) / 2.0

    with np.errstate(over="ignore", under="ignore"):
        cb, ub = c[big_pos], u[big_pos]
        ec = np.exp(-ub * cb)
        p[big_pos] = 1.0 - ec
        dp_du[big_pos] = cb * ec
        dp_dc[big_pos] = ub * ec

        cn, un = c[big_neg], u[big_neg]
        en = np.exp(un * (1.0 - cn))
        p[big_neg] = en
        dp_du[big_neg] = (1.0 - cn) * en
        dp_dc[big_neg] = -un * en

        cm, um = c[mid], u[mid]
        ec = np.exp(-um * cm)
        e = np.exp(-um)
        d = -np.expm1(-um)  # 1 - exp(-u)
        num = -np.expm1(-um * cm)  # 1 - exp(-u c)
        p[mid] = num / d
        dp_dc[mid] = um * ec / d
        dp_du[mid] = (cm * ec * d - num * e) / d**2

    return np.clip(p, 0.0, 1.0), dp_du, dp_dc


def conditional_admit_prob_batch(t, b, c, mu):
    """P(A = 1 | T = t) elementwise: g(1, t) / (g(0, t) + g(1, t))."""
    log_g0 = log_density_batch(t, b, c, mu, 0)
    log_g1 = log_density_batch(t, b, c, mu, 1)
    diff = log_g1 - log_g0
    bad = ~np.isfinite(diff)
    if np.any(bad):
        # Both sub-densities underflowed even in log space; substitute the
        # analytic limit for the relevant tail.
        t_, b_, c_, mu_ = np.broadcast_arrays(
            *(np.asarray(v, dtype=float) for v in (t, b, c, mu))
        )
        tau = t_ / b_**2
        small = tau < 1.0
        limit = np.where(
            small,
            np.where(c_ > 0.5, np.inf, np.where(c_ < 0.5, -np.inf, 0.0)),
            mu_ * b_,
        )
        diff = np.where(bad, limit, diff)
        warnings.warn(
            "degenerate total density; analytic limit substituted",
            DegenerateDensityWarning,
            stacklevel=2,
        )
    return expit(diff)


def conditional_admit_prob(spec: FptSpec, t):
    """P(A = 1 | T = t) for one spec; t may be an array."""
    t = _require_positive_times(t)
    out = conditional_admit_prob_batch(t, spec.b, spec.c, spec.mu)
    return out if np.ndim(out) else float(out)


def fpt_mean(spec: FptSpec) -> float:
    """E[T]; x0*(b - x0) for zero drift, else Wald's identity (b*P1 - x0)/mu."""
    x0 = spec.c * spec.b
    mu = spec.mu
    if abs(mu) * spec.b < 1e-8:
        return float(x0 * (spec.b - x0))
    p1 = exit_probability(spec)
    return float((spec.b * p1 - x0) / mu)


def _sub_cdf_lower_batch(t, b, c, mu):
    """P(T <= t, lower exit) for arrays already in lower-exit coordinates."""
    tau = t / b**2
    out = np.empty(t.shape)

    img = tau < _CDF_TAU_SPLIT
    if np.any(img):
        t_, b_, c_, mu_, tau_ = (v[img] for v in (t, b, c, mu, tau))
        # Image terms integrate to pairs of (scaled) normal CDFs.
        n_terms = int(math.ceil((1.0 + math.sqrt(73.6 * float(tau_.max()))) / 2.0)) + 2
        _check_cap(2 * n_terms + 1, "image-cdf")
        k = np.arange(-n_terms, n_terms + 1, dtype=float)
        alpha = (c_[:, None] + 2.0 * k) * b_[:, None]
        sgn = np.sign(alpha)
        nu = -mu_[:, None]
        sq = np.sqrt(t_)[:, None]
        z1 = sgn * (nu * t_[:, None] - alpha) / sq
        z2 = sgn * (-nu * t_[:, None] - alpha) / sq
        base = 2.0 * k * b_[:, None] * mu_[:, None]
        with np.errstate(over="ignore", under="ignore"):
            term = sgn * (
                np.exp(np.minimum(base + log_ndtr(z1), 0.0))
                + np.exp(np.minimum(base + 2.0 * alpha * nu + log_ndtr(z2), 0.0))
            )
        out[img] = term.sum(axis=1)

    spec_mask = ~img
    if np.any(spec_mask):
        t_, b_, c_, mu_, tau_ = (v[spec_mask] for v in (t, b, c, mu, tau))
        p_lower = 1.0 - _exit_prob_upper_batch(b_, c_, mu_)
        n_terms = int(math.ceil(math.sqrt(8.4 / float(tau_.min())))) + 2
        _check_cap(n_terms, "spectral-cdf")
        k = np.arange(1, n_terms + 1, dtype=float)
        lam = (mu_[:, None] ** 2 + (k * np.pi / b_[:, None]) ** 2) / 2.0
        with np.errstate(over="ignore", under="ignore"):
            ex = np.exp(-mu_[:, None] * c_[:, None] * b_[:, None] - lam * t_[:, None])
        tail = (np.pi / b_**2) * (
            k * np.sin(np.pi * np.outer(c_, k)) * ex / lam
        ).sum(axis=1)
        out[spec_mask] = p_lower - tail

    return np.clip(out, 0.0, 1.0)


def sub_cdf_batch(t, b, c, mu, a):
    """P(T <= t, A = a) elementwise over broadcast arrays."""
    t, b, c, mu, a = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (t, b, c, mu, a))
    )
    shape = t.shape
    t, b, c, mu, a = (np.ravel(v).copy() for v in (t, b, c, mu, a))
    upper = a == 1.0
    w = np.where(upper, 1.0 - c, c)
    m = np.where(upper, -mu, mu)
    return _sub_cdf_lower_batch(t, b, w, m).reshape(shape)


def fpt_cdf(spec: FptSpec, t, boundary=None):
    """P(T <= t) (boundary=None) or the sub-CDF P(T <= t, A = boundary)."""
    t = _require_positive_times(t)
    if boundary is None:
        out = sub_cdf_batch(t, spec.b, spec.c, spec.mu, 0) + sub_cdf_batch(
            t, spec.b, spec.c, spec.mu, 1
        )
        out = np.clip(out, 0.0, 1.0)
    elif boundary in (0, 1):
        out = sub_cdf_batch(t, spec.b, spec.c, spec.mu, boundary)
    else:
        raise ParameterDomainError(f"boundary label must be 0, 1 or None, got {boundary!r}")
    return out if np.ndim(out) else float(out)


def inverse_sub_cdf_batch(u, b, c, mu, a, tol=1e-10, max_doublings=200):
    """Per-element conditional quantiles: t with P(T <= t | A = a) = u.

    Bisection on the sub-CDF normalized by the exit probability; ``tol`` is
    the relative bracket width at which bisection stops.
    """
    u, b, c, mu, a = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (u, b, c, mu, a))
    )
    shape = u.shape
    u, b, c, mu, a = (np.ravel(v).copy() for v in (u, b, c, mu, a))
    u = np.clip(u, 1e-14, 1.0 - 1e-14)

    p_up = _exit_prob_upper_batch(b, c, mu)
    p_a = np.where(a == 1.0, p_up, 1.0 - p_up)
    if np.any(p_a <= 0.0):
        raise ParameterDomainError("conditional sampling from a zero-probability boundary")
    target = u * p_a

    lo = np.zeros_like(u)
    hi = b**2
    for _ in range(max_doublings):
        vals = sub_cdf_batch(hi, b, c, mu, a)
        need = vals < target
        if not np.any(need):
            break
        hi[need] *= 2.0
    else:
        raise SeriesAccuracyError("could not bracket the requested quantile")

    # Bisection: bracket halves every step, so ~60 steps reach 1e-10 relative.
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        less = sub_cdf_batch(mid, b, c, mu, a) < target
        lo = np.where(less, mid, lo)
        hi = np.where(less, hi, mid)
        if np.all(hi - lo <= tol * (1.0 + hi)):
            break
    return (0.5 * (lo + hi)).reshape(shape)


def sample_first_passage(spec: FptSpec, n: int, rng, tol=1e-10):
    """Draw n exact (a, t) pairs: boundary from the exit probability, then the
    conditional time by inverse-CDF bisection."""
    p1 = exit_probability(spec)
    a = (rng.random(n) < p1).astype(np.int8)
    u = rng.random(n)
    t = inverse_sub_cdf_batch(u, spec.b, spec.c, spec.mu, a, tol=tol)
    return a, t
