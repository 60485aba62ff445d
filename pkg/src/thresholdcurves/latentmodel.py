"""Full parametric model of (X, H, Z, T, A, Y).

Blocks and links:

* latent class prior     logit P(H=1 | x) = eta_h . [1, x]
* proxy components       binary z_j:      logit P(z_j=1 | x, h) = coef_j . [1, x, h]
                         continuous z_j:  z_j | x, h ~ Normal(coef_j . [1, x, h], var_j)
* decision process       b = exp(beta_b . [1, x]),  c = expit(beta_c . [1, x, z]),
                         d(0) = -exp(delta0), d(1) = +exp(delta0 + delta1)
* outcome cells          P(Y=1 | h, a) = expit(cell_logits[h, a])

The drift signs are structural: the low-needs class always drifts toward the
lower boundary and the high-needs class toward the upper one.  Outcome cells
are stored on the logit scale, which parametrizes the same saturated 2x2 cell
model while keeping probabilities inside (0, 1) during optimization.

Everything likelihood-shaped evaluates in log space, vectorized across rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from . import fpt
from .data import ColumnSchema, Dataset, Observation
from .errors import ParameterDomainError, ShapeError

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ZComponentParams:
    """One proxy component model: Bernoulli-logistic or Gaussian."""

    kind: str  # "binary" | "continuous"
    coef: np.ndarray  # (1 + k + 1,) for [1, x, h]
    log_var: float | None = None  # continuous only

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float)
        object.__setattr__(self, "coef", coef)
        if self.kind not in ("binary", "continuous"):
            raise ParameterDomainError(f"unknown z component kind {self.kind!r}")
        if not np.all(np.isfinite(coef)):
            raise ParameterDomainError("z component coefficients must be finite")
        if self.kind == "continuous":
            if self.log_var is None or not np.isfinite(self.log_var):
                raise ParameterDomainError("continuous z component needs a finite log variance")
            object.__setattr__(self, "log_var", float(self.log_var))
        elif self.log_var is not None:
            raise ParameterDomainError("binary z component must not carry a variance")


@dataclass(frozen=True)
class LatentModelParams:
    """All free coefficients of the latent-class decision/outcome model."""

    eta_h: np.ndarray  # (1 + k,)
    z_models: tuple[ZComponentParams, ...]
    beta_b: np.ndarray  # (1 + k,)
    beta_c: np.ndarray  # (1 + k + p,)
    delta: np.ndarray  # (2,): log|d|(h) = delta0 + delta1 * h
    cell_logits: np.ndarray  # (2, 2) indexed [h, a]

    def __post_init__(self):
        for name in ("eta_h", "beta_b", "beta_c", "delta", "cell_logits"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ParameterDomainError(f"{name} must be finite")
            object.__setattr__(self, name, arr)
        if self.delta.shape != (2,):
            raise ShapeError("delta must hold exactly two coefficients")
        if self.cell_logits.shape != (2, 2):
            raise ShapeError("cell_logits must be a 2x2 array indexed [h, a]")

    # dimensions -------------------------------------------------------
    @property
    def k(self) -> int:
        return self.eta_h.shape[0] - 1

    @property
    def p(self) -> int:
        return len(self.z_models)

    def validate_for(self, k: int, p: int, z_kinds) -> None:
        if self.eta_h.shape != (1 + k,) or self.beta_b.shape != (1 + k,):
            raise ShapeError("eta_h/beta_b length must be 1 + k")
        if self.beta_c.shape != (1 + k + p,):
            raise ShapeError("beta_c length must be 1 + k + p")
        if len(self.z_models) != p:
            raise ShapeError("one z model per z column required")
        for zm, kind in zip(self.z_models, z_kinds):
            if zm.kind != kind:
                raise ShapeError(f"z model kind {zm.kind!r} does not match column kind {kind!r}")
            if zm.coef.shape != (k + 2,):
                raise ShapeError("z component coefficient length must be 1 + k + 1")

    @property
    def drifts(self) -> tuple[float, float]:
        """(d0, d1) with the structural signs applied."""
        return (-float(np.exp(self.delta[0])), float(np.exp(self.delta[0] + self.delta[1])))

    # flat free-parameter vector --------------------------------------
    def flatten(self) -> np.ndarray:
        parts = [self.eta_h]
        for zm in self.z_models:
            parts.append(zm.coef)
            if zm.kind == "continuous":
                parts.append([zm.log_var])
        parts += [self.beta_b, self.beta_c, self.delta, self.cell_logits.ravel()]
        return np.concatenate([np.asarray(prt, dtype=float).ravel() for prt in parts])

    def with_flat(self, vec: np.ndarray) -> "LatentModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {vec.shape}")
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
        beta_b = take(self.beta_b.size)
        beta_c = take(self.beta_c.size)
        delta = take(2)
        cells = take(4).reshape(2, 2)
        return LatentModelParams(eta, tuple(z_models), beta_b, beta_c, delta, cells)

    @property
    def n_params(self) -> int:
        return self.flatten().size

    def param_names(self, schema: ColumnSchema | None = None) -> list[str]:
        x_names = [s.name for s in schema.x_columns] if schema else [f"x{i+1}" for i in range(self.k)]
        z_names = [s.name for s in schema.z_columns] if schema else [f"z{j+1}" for j in range(self.p)]
        names = [f"h_prior:{n}" for n in ["intercept"] + x_names]
        for zn, zm in zip(z_names, self.z_models):
            names += [f"z:{zn}:{n}" for n in ["intercept"] + x_names + ["h"]]
            if zm.kind == "continuous":
                names.append(f"z:{zn}:log_var")
        names += [f"log_b:{n}" for n in ["intercept"] + x_names]
        names += [f"logit_c:{n}" for n in ["intercept"] + x_names + z_names]
        names += ["drift:delta0", "drift:delta1"]
        names += [f"outcome:h{h}_a{a}" for h in (0, 1) for a in (0, 1)]
        return names

    # JSON -------------------------------------------------------------
    def to_json(self, schema: ColumnSchema | None = None) -> dict:
        names = self.param_names(schema)
        doc: dict = {}
        for name, value in zip(names, self.flatten()):
            block, _, term = name.partition(":")
            if block == "z":
                comp, _, term = term.partition(":")
                doc.setdefault("z", {}).setdefault(comp, {})[term] = float(value)
            else:
                doc.setdefault(block, {})[term] = float(value)
        doc["z_kinds"] = {
            (schema.z_columns[j].name if schema else f"z{j+1}"): zm.kind
            for j, zm in enumerate(self.z_models)
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict, schema: ColumnSchema) -> "LatentModelParams":
        x_names = ["intercept"] + [s.name for s in schema.x_columns]
        eta = np.array([doc["h_prior"][n] for n in x_names])
        z_models = []
        for s in schema.z_columns:
            comp = doc["z"][s.name]
            coef = np.array([comp[n] for n in x_names + ["h"]])
            lv = comp.get("log_var")
            z_models.append(ZComponentParams(s.kind, coef, lv))
        beta_b = np.array([doc["log_b"][n] for n in x_names])
        beta_c = np.array([doc["logit_c"][n] for n in x_names + [s.name for s in schema.z_columns]])
        delta = np.array([doc["drift"]["delta0"], doc["drift"]["delta1"]])
        cells = np.array([[doc["outcome"][f"h{h}_a{a}"] for a in (0, 1)] for h in (0, 1)])
        return cls(eta, tuple(z_models), beta_b, beta_c, delta, cells)

    def save(self, path, schema: ColumnSchema | None = None):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(schema), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, schema: ColumnSchema) -> "LatentModelParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh), schema)


@dataclass(frozen=True)
class RowLinks:
    """Per-row derived quantities, all recomputable from (params, row)."""

    b: float
    c: float
    d0: float
    d1: float
    h_prior: float
    z_loglik: tuple[float, float]  # log P(z | x, h) for h = 0, 1
    y_prob: np.ndarray  # (2, 2) cell probabilities [h, a]


# ---------------------------------------------------------------------------
# design matrices and batched links


def design_x(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x])


def design_xz(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x, z])


@dataclass(frozen=True)
class BatchLinks:
    """Pre-treatment pieces of the likelihood for a batch of rows."""

    b: np.ndarray  # (n,)
    c: np.ndarray  # (n,)
    d: tuple[float, float]
    log_h: np.ndarray  # (n, 2): log P(H=h | x)
    z_ll: np.ndarray  # (n, 2): log P(z | x, h)


def _check_dims(params: LatentModelParams, x: np.ndarray, z: np.ndarray):
    k, p = x.shape[1], z.shape[1]
    params.validate_for(k, p, [zm.kind for zm in params.z_models])


def class_prior_and_proxy_ll(eta_h, z_models, x, z):
    """(log P(H=h | x), log P(z | x, h)) as (n, 2) arrays; shared across models."""
    xd = design_x(x)
    u = xd @ eta_h
    log_h = np.column_stack([log_expit(-u), log_expit(u)])
    z_ll = np.zeros((x.shape[0], 2))
    for j, zm in enumerate(z_models):
        zj = z[:, j]
        for h in (0, 1):
            v = xd @ zm.coef[:-1] + zm.coef[-1] * h
            if zm.kind == "binary":
                z_ll[:, h] += zj * log_expit(v) + (1.0 - zj) * log_expit(-v)
            else:
                var = np.exp(zm.log_var)
                z_ll[:, h] += -0.5 * (_LOG_2PI + zm.log_var) - (zj - v) ** 2 / (2.0 * var)
    return log_h, z_ll


def row_links_batch(params: LatentModelParams, x: np.ndarray, z: np.ndarray) -> BatchLinks:
    """Evaluate the (X, Z)-only links for every row; never touches (T, A, Y)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    _check_dims(params, x, z)
    log_h, z_ll = class_prior_and_proxy_ll(params.eta_h, params.z_models, x, z)
    b = np.exp(design_x(x) @ params.beta_b)
    c = expit(design_xz(x, z) @ params.beta_c)
    return BatchLinks(b=b, c=c, d=params.drifts, log_h=log_h, z_ll=z_ll)


def links_for_row(params: LatentModelParams, row: Observation) -> RowLinks:
    """Single-row view of the link functions."""
    bl = row_links_batch(params, row.x[None, :], row.z[None, :])
    return RowLinks(
        b=float(bl.b[0]),
        c=float(bl.c[0]),
        d0=bl.d[0],
        d1=bl.d[1],
        h_prior=float(np.exp(bl.log_h[0, 1])),
        z_loglik=(float(bl.z_ll[0, 0]), float(bl.z_ll[0, 1])),
        y_prob=expit(params.cell_logits.copy()),
    )


# ---------------------------------------------------------------------------
# likelihood


def _outcome_ll(params: LatentModelParams, a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(n, 2) outcome log-likelihood per latent class."""
    out = np.empty((a.shape[0], 2))
    for h in (0, 1):
        cell = params.cell_logits[h, a]
        out[:, h] = y * log_expit(cell) + (1.0 - y) * log_expit(-cell)
    return out


def complete_loglik_matrix(params: LatentModelParams, ds: Dataset) -> np.ndarray:
    """(n, 2) complete-data log-likelihood: rows x latent class."""
    bl = row_links_batch(params, ds.x, ds.z)
    a = np.asarray(ds.a, dtype=float)
    out = bl.log_h + bl.z_ll + _outcome_ll(params, ds.a, np.asarray(ds.y, dtype=float))
    for h in (0, 1):
        out[:, h] += fpt.log_density_batch(ds.t, bl.b, bl.c, bl.d[h] * bl.b, a)
    return out


def complete_loglik(params: LatentModelParams, row: Observation, h: int) -> float:
    """log [P(H=h|x) P(z|x,h) g(a,t|b,c,d_h) P(y|h,a)] for a single row."""
    ds = Dataset(
        schema=_scratch_schema(row),
        x=row.x[None, :].copy(),
        z=row.z[None, :].copy(),
        t=np.array([row.t]),
        a=np.array([row.a], dtype=np.int8),
        y=np.array([row.y], dtype=np.int8),
    )
    return float(complete_loglik_matrix(params, ds)[0, h])


def _scratch_schema(row: Observation) -> ColumnSchema:
    from .data import ColumnSpec

    return ColumnSchema(
        x_columns=tuple(ColumnSpec(f"x{i+1}", "continuous") for i in range(row.x.size)),
        z_columns=tuple(ColumnSpec(f"z{j+1}", "continuous") for j in range(row.z.size)),
        t_column="t", a_column="a", y_column="y",
    )


def observed_loglik(params: LatentModelParams, ds: Dataset) -> float:
    """Total log-likelihood with the latent class marginalized out."""
    ll = complete_loglik_matrix(params, ds)
    return float(logsumexp(ll, axis=1).sum())


def observed_loglik_rows(params: LatentModelParams, ds: Dataset) -> np.ndarray:
    return logsumexp(complete_loglik_matrix(params, ds), axis=1)


def posterior_matrix(params: LatentModelParams, ds: Dataset) -> np.ndarray:
    """(n, 2) posterior class responsibilities given the full row."""
    ll = complete_loglik_matrix(params, ds)
    w1 = expit(ll[:, 1] - ll[:, 0])
    return np.column_stack([1.0 - w1, w1])


# ---------------------------------------------------------------------------
# analytic scores (per-row, per-class gradients of the complete log-likelihood)


def threshold_slice(params: LatentModelParams) -> slice:
    """Location of (beta_b, beta_c, delta) inside the flat vector."""
    start = params.eta_h.size + sum(
        zm.coef.size + (1 if zm.kind == "continuous" else 0) for zm in params.z_models
    )
    return slice(start, start + params.beta_b.size + params.beta_c.size + 2)


def class_proxy_score(eta_h, z_models, x, z) -> np.ndarray:
    """(n, 2, q_hz) score of the class-prior and proxy blocks."""
    xd = design_x(x)
    q_hz = xd.shape[1] + sum(
        zm.coef.size + (1 if zm.kind == "continuous" else 0) for zm in z_models
    )
    out = np.zeros((x.shape[0], 2, q_hz))
    pos = 0
    sig = expit(xd @ eta_h)
    for h in (0, 1):
        out[:, h, pos : pos + xd.shape[1]] = (h - sig)[:, None] * xd
    pos += xd.shape[1]
    for j, zm in enumerate(z_models):
        zj = z[:, j]
        m = xd @ zm.coef[:-1]
        for h in (0, 1):
            v = m + zm.coef[-1] * h
            if zm.kind == "binary":
                resid = zj - expit(v)
            else:
                resid = (zj - v) / np.exp(zm.log_var)
            out[:, h, pos : pos + xd.shape[1]] = resid[:, None] * xd
            out[:, h, pos + xd.shape[1]] = resid * h
        pos += xd.shape[1] + 1
        if zm.kind == "continuous":
            var = np.exp(zm.log_var)
            for h in (0, 1):
                v = m + zm.coef[-1] * h
                out[:, h, pos] = -0.5 + (zj - v) ** 2 / (2.0 * var)
            pos += 1
    return out


def outcome_cell_score(cell_logits, a, y) -> np.ndarray:
    """(n, 2, 4) score of the saturated outcome cells (C-order over [h, a])."""
    n = a.shape[0]
    out = np.zeros((n, 2, 4))
    y = np.asarray(y, dtype=float)
    for h in (0, 1):
        resid = y - expit(cell_logits[h, a])
        for aa in (0, 1):
            mask = a == aa
            out[mask, h, 2 * h + aa] = resid[mask]
    return out


def complete_score(params: LatentModelParams, ds: Dataset) -> np.ndarray:
    """(n, 2, q) gradient of the complete-data log-likelihood per row/class."""
    n = ds.n
    q = params.n_params
    out = np.zeros((n, 2, q))
    xd = design_x(ds.x)
    xzd = design_xz(ds.x, ds.z)
    a = np.asarray(ds.a, dtype=float)

    hz = class_proxy_score(params.eta_h, params.z_models, ds.x, ds.z)
    pos = hz.shape[2]
    out[:, :, :pos] = hz

    # decision-process block
    b = np.exp(xd @ params.beta_b)
    c = expit(xzd @ params.beta_c)
    d = params.drifts
    for h in (0, 1):
        mu = d[h] * b
        _, db, dc, dmu = fpt.log_density_batch(ds.t, b, c, mu, a, grad=True)
        out[:, h, pos : pos + xd.shape[1]] = (b * (db + d[h] * dmu))[:, None] * xd
        off = pos + xd.shape[1]
        out[:, h, off : off + xzd.shape[1]] = (dc * c * (1.0 - c))[:, None] * xzd
        off += xzd.shape[1]
        out[:, h, off] = dmu * mu
        out[:, h, off + 1] = dmu * mu * h
    pos += xd.shape[1] + xzd.shape[1] + 2

    # outcome cells
    out[:, :, pos : pos + 4] = outcome_cell_score(params.cell_logits, ds.a, ds.y)
    pos += 4
    assert pos == q
    return out


def observed_score(params: LatentModelParams, ds: Dataset) -> np.ndarray:
    """Gradient of the observed log-likelihood (Fisher's identity)."""
    w = posterior_matrix(params, ds)
    s = complete_score(params, ds)
    return np.einsum("nh,nhq->q", w, s)


# ---------------------------------------------------------------------------
# decision-process block objective for the M step


def threshold_theta(params: LatentModelParams) -> np.ndarray:
    return np.concatenate([params.beta_b, params.beta_c, params.delta])


def with_threshold_theta(params: LatentModelParams, theta: np.ndarray) -> LatentModelParams:
    nb = params.beta_b.size
    nc = params.beta_c.size
    return replace(
        params,
        beta_b=theta[:nb].copy(),
        beta_c=theta[nb : nb + nc].copy(),
        delta=theta[nb + nc :].copy(),
    )


def threshold_q_and_grad(theta, params, ds, weights):
    """Weighted decision-block objective sum_ih w_ih log g_ih and its gradient."""
    trial = with_threshold_theta(params, np.asarray(theta, dtype=float))
    xd = design_x(ds.x)
    xzd = design_xz(ds.x, ds.z)
    a = np.asarray(ds.a, dtype=float)
    b = np.exp(xd @ trial.beta_b)
    c = expit(xzd @ trial.beta_c)
    d = trial.drifts

    q_val = 0.0
    grad = np.zeros(theta.shape[0])
    nb, nc = xd.shape[1], xzd.shape[1]
    for h in (0, 1):
        wh = weights[:, h]
        mu = d[h] * b
        logg, db, dc, dmu = fpt.log_density_batch(ds.t, b, c, mu, a, grad=True)
        q_val += float(wh @ logg)
        grad[:nb] += (wh * b * (db + d[h] * dmu)) @ xd
        grad[nb : nb + nc] += (wh * dc * c * (1.0 - c)) @ xzd
        g_delta0 = float(wh @ (dmu * mu))
        grad[nb + nc] += g_delta0
        if h == 1:
            grad[nb + nc + 1] += g_delta0
    return q_val, grad
