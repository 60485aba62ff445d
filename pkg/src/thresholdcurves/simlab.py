"""Synthetic-data generator and independent Monte Carlo oracles.

The generator draws the full causal chain X -> H -> Z -> (A, T) -> Y with
exact first-passage sampling (inverse CDF), so datasets carry no
discretization bias.  The Euler path simulator is a deliberately separate
method (discretized, with an optional boundary-crossing bridge correction) so
the two can validate each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from . import fpt
from .data import ColumnSchema, ColumnSpec, Dataset
from .errors import ParameterDomainError
from .latentmodel import LatentModelParams, ZComponentParams, row_links_batch


@dataclass(frozen=True)
class McControls:
    dt: float = 1e-4
    n_paths: int = 100_000
    bridge_correction: bool = True

    def __post_init__(self):
        if self.dt <= 0 or self.dt > 1e-3:
            raise ParameterDomainError("path step dt must lie in (0, 1e-3]")


@dataclass(frozen=True)
class SimConfig:
    n: int
    x_kinds: tuple[str, ...]
    z_kinds: tuple[str, ...]
    params: LatentModelParams
    seed: int = 0
    mc: McControls = field(default_factory=McControls)

    def __post_init__(self):
        if self.n < 1:
            raise ParameterDomainError("n must be >= 1")
        self.params.validate_for(len(self.x_kinds), len(self.z_kinds), self.z_kinds)

    def schema(self) -> ColumnSchema:
        return ColumnSchema(
            x_columns=tuple(
                ColumnSpec(f"x{i+1}", kind) for i, kind in enumerate(self.x_kinds)
            ),
            z_columns=tuple(
                ColumnSpec(f"z{j+1}", kind) for j, kind in enumerate(self.z_kinds)
            ),
            t_column="t_hours",
            a_column="admit",
            y_column="outcome",
        )


def reference_scenario(n: int = 20_000, seed: int = 0) -> SimConfig:
    """Moderate-confounding fixture used by the recovery and coverage checks.

    All values are fixture choices: three covariates (two continuous, one
    binary), a binary and a continuous proxy, drift increment 0.7 on the log
    scale.
    """
    params = LatentModelParams(
        eta_h=np.array([-0.3, 0.5, -0.4, 0.6]),
        z_models=(
            ZComponentParams("binary", np.array([-0.5, 0.3, 0.0, 0.2, 1.4])),
            ZComponentParams("continuous", np.array([0.2, -0.3, 0.4, 0.0, 1.0]),
                             log_var=math.log(0.64)),
        ),
        beta_b=np.array([1.1, 0.15, -0.1, 0.05]),
        beta_c=np.array([-0.4, 0.1, -0.15, 0.1, 0.25, -0.2]),
        delta=np.array([-1.45, 0.7]),
        cell_logits=np.array([
            [math.log(0.10 / 0.90), math.log(0.15 / 0.85)],
            [math.log(0.35 / 0.65), math.log(0.18 / 0.82)],
        ]),
    )
    return SimConfig(
        n=n,
        x_kinds=("continuous", "continuous", "binary"),
        z_kinds=("binary", "continuous"),
        params=params,
        seed=seed,
    )


def confounded_scenario(n: int = 20_000, seed: int = 0) -> SimConfig:
    """Strong-confounding fixture for the comparator bias demonstration.

    The latent class dominates the drift and the outcome while the proxies
    carry only a moderate signal, so estimators that ignore the latent class
    have no observed stand-in that can absorb the confounding.
    """
    params = LatentModelParams(
        eta_h=np.array([-0.2, 0.6, -0.5, 0.5]),
        z_models=(
            ZComponentParams("binary", np.array([-0.4, 0.2, 0.1, 0.1, 1.0])),
            ZComponentParams("continuous", np.array([0.0, -0.2, 0.3, 0.1, 0.8]),
                             log_var=math.log(1.0)),
        ),
        beta_b=np.array([1.15, 0.1, -0.05, 0.1]),
        beta_c=np.array([-0.5, 0.1, -0.1, 0.05, 0.2, -0.15]),
        delta=np.array([-1.6, 1.1]),
        cell_logits=np.array([
            [math.log(0.08 / 0.92), math.log(0.12 / 0.88)],
            [math.log(0.45 / 0.55), math.log(0.15 / 0.85)],
        ]),
    )
    return SimConfig(
        n=n,
        x_kinds=("continuous", "continuous", "binary"),
        z_kinds=("binary", "continuous"),
        params=params,
        seed=seed,
    )


@dataclass(frozen=True)
class SimTruth:
    """Sealed generator-side record; never read by fitters."""

    h: np.ndarray  # (n,) latent class per row
    admit_prob: np.ndarray  # (n,) exit probability used for the decision draw


def _draw_pretreatment(cfg: SimConfig, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (x, h, z) for cfg.n rows."""
    n = cfg.n
    x = np.empty((n, len(cfg.x_kinds)))
    for i, kind in enumerate(cfg.x_kinds):
        x[:, i] = rng.standard_normal(n) if kind == "continuous" else rng.binomial(1, 0.5, n)
    ones = np.ones((n, 1))
    xd = np.hstack([ones, x])
    h = (rng.random(n) < expit(xd @ cfg.params.eta_h)).astype(np.int8)
    z = np.empty((n, len(cfg.z_kinds)))
    for j, zm in enumerate(cfg.params.z_models):
        v = xd @ zm.coef[:-1] + zm.coef[-1] * h
        if zm.kind == "binary":
            z[:, j] = (rng.random(n) < expit(v)).astype(float)
        else:
            z[:, j] = v + math.sqrt(math.exp(zm.log_var)) * rng.standard_normal(n)
    return x, h, z


def simulate_dataset(cfg: SimConfig) -> tuple[Dataset, SimTruth]:
    """Draw one observational dataset plus its latent truth sidecar."""
    rng = np.random.default_rng(cfg.seed)
    x, h, z = _draw_pretreatment(cfg, rng)
    links = row_links_batch(cfg.params, x, z)
    d = np.where(h == 1, links.d[1], links.d[0])
    mu = d * links.b

    p1 = fpt._exit_prob_upper_batch(links.b, links.c, mu)
    a = (rng.random(cfg.n) < p1).astype(np.int8)
    t = fpt.inverse_sub_cdf_batch(rng.random(cfg.n), links.b, links.c, mu, a)

    pi = expit(cfg.params.cell_logits)[h, a]
    y = (rng.random(cfg.n) < pi).astype(np.int8)

    ds = Dataset(schema=cfg.schema(), x=x, z=z, t=t, a=a, y=y)
    return ds, SimTruth(h=h, admit_prob=p1)


# ---------------------------------------------------------------------------
# Euler-Maruyama path oracle


@njit(cache=True)
def _euler_shard(seed, n_paths, x0, b, mu, dt, horizon, bridge, edges, counts, exit_counts):
    np.random.seed(seed)
    sqdt = math.sqrt(dt)
    nb = edges.shape[0] - 1
    n_over = 0
    for _ in range(n_paths):
        w = x0
        t = 0.0
        exited = -1
        while t < horizon:
            wn = w + mu * dt + sqdt * np.random.normal()
            t += dt
            if wn <= 0.0:
                exited = 0
                break
            if wn >= b:
                exited = 1
                break
            if bridge:
                # Prob. the continuous bridge crossed a boundary inside the step.
                if np.random.random() < math.exp(-2.0 * w * wn / dt):
                    exited = 0
                    break
                if np.random.random() < math.exp(-2.0 * (b - w) * (b - wn) / dt):
                    exited = 1
                    break
            w = wn
        if exited < 0:
            n_over += 1
        else:
            exit_counts[exited] += 1
            j = np.searchsorted(edges, t) - 1
            if 0 <= j < nb:
                counts[exited, j] += 1
    return n_over


@dataclass(frozen=True)
class McFirstPassageResult:
    bin_edges: np.ndarray
    counts: np.ndarray  # (2, nbins)
    density: np.ndarray  # (2, nbins) sub-density estimates
    se: np.ndarray  # (2, nbins) binomial standard errors on the density scale
    exit_counts: np.ndarray  # (2,)
    n_paths: int
    n_overflow: int
    dt: float
    horizon: float

    def density_at(self, a: int, t: float) -> tuple[float, float]:
        """(estimate, se) of the sub-density in the bin containing t."""
        j = int(np.searchsorted(self.bin_edges, t)) - 1
        if not 0 <= j < self.density.shape[1]:
            raise ValueError(f"t={t} outside the histogram range")
        return float(self.density[a, j]), float(self.se[a, j])


def mc_first_passage(
    spec: fpt.FptSpec,
    n_paths: int,
    dt: float = 1e-4,
    bridge_correction: bool = True,
    seed: int = 0,
    bin_edges=None,
    horizon: float | None = None,
    n_shards: int = 16,
) -> McFirstPassageResult:
    """Euler path histogram of (exit label, exit time) with binomial SEs.

    Deterministic given (seed, n_shards): each shard runs a counter-derived
    stream, so shards could execute in parallel without changing the result.
    """
    if dt <= 0 or dt > 1e-3:
        raise ParameterDomainError("path step dt must lie in (0, 1e-3]")
    lam1 = (spec.mu**2 + (math.pi / spec.b) ** 2) / 2.0
    if horizon is None:
        horizon = 40.0 / lam1  # survival decays at rate lam1, so ~e-40 residual
    if bin_edges is None:
        bin_edges = np.linspace(0.0, 20.0 * fpt.fpt_mean(spec), 201)
    bin_edges = np.asarray(bin_edges, dtype=float)

    counts = np.zeros((2, bin_edges.size - 1), dtype=np.int64)
    exit_counts = np.zeros(2, dtype=np.int64)
    shard_sizes = np.full(n_shards, n_paths // n_shards, dtype=np.int64)
    shard_sizes[: n_paths % n_shards] += 1
    shard_seeds = np.random.SeedSequence(seed).generate_state(n_shards)

    n_overflow = 0
    for s in range(n_shards):
        if shard_sizes[s] == 0:
            continue
        n_overflow += _euler_shard(
            int(shard_seeds[s]) % 2**31,
            int(shard_sizes[s]),
            spec.c * spec.b,
            spec.b,
            spec.mu,
            dt,
            horizon,
            bridge_correction,
            bin_edges,
            counts,
            exit_counts,
        )

    widths = np.diff(bin_edges)
    phat = counts / n_paths
    density = phat / widths
    se = np.sqrt(phat * (1.0 - phat) / n_paths) / widths
    return McFirstPassageResult(
        bin_edges=bin_edges,
        counts=counts,
        density=density,
        se=se,
        exit_counts=exit_counts,
        n_paths=n_paths,
        n_overflow=n_overflow,
        dt=dt,
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# interventional ground truth


@dataclass(frozen=True)
class InterventionalTruth:
    theta: float
    theta_se: float
    gamma: float
    gamma_se: float
    err0: float  # P(decision = 1 | class 0)
    err0_se: float
    err1: float  # P(decision = 0 | class 1)
    err1_se: float
    n_draws: int


def _binom_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 1e-12) / n)


def interventional_mc(
    cfg: SimConfig, *, fix_t: float | None = None, shift=None, n_reps: int = 1
) -> InterventionalTruth:
    """Ground-truth estimands by resimulating the causal chain.

    ``fix_t`` forces every decision time to t; ``shift`` applies a policy
    object with an ``apply(t_hours)`` method to each realized time.  Exactly
    one of the two must be given.
    """
    if (fix_t is None) == (shift is None):
        raise ParameterDomainError("give exactly one of fix_t or shift")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x1A7E)))

    a_all, y_all, h_all = [], [], []
    for _ in range(n_reps):
        x, h, z = _draw_pretreatment(cfg, rng)
        links = row_links_batch(cfg.params, x, z)
        d = np.where(h == 1, links.d[1], links.d[0])
        mu = d * links.b
        if fix_t is not None:
            t_new = np.full(cfg.n, float(fix_t))
        else:
            a_obs = (rng.random(cfg.n) < fpt._exit_prob_upper_batch(links.b, links.c, mu)).astype(float)
            t_obs = fpt.inverse_sub_cdf_batch(rng.random(cfg.n), links.b, links.c, mu, a_obs)
            t_new = shift.apply(t_obs)
        p_adm = fpt.conditional_admit_prob_batch(t_new, links.b, links.c, mu)
        a_new = (rng.random(cfg.n) < p_adm).astype(np.int8)
        y_new = (rng.random(cfg.n) < expit(cfg.params.cell_logits)[h, a_new]).astype(np.int8)
        a_all.append(a_new)
        y_all.append(y_new)
        h_all.append(h)

    a = np.concatenate(a_all)
    y = np.concatenate(y_all)
    h = np.concatenate(h_all)
    n = a.size
    n0 = int((h == 0).sum())
    n1 = n - n0
    theta = float(a.mean())
    gamma = float(y.mean())
    err0 = float(a[h == 0].mean()) if n0 else float("nan")
    err1 = float(1.0 - a[h == 1].mean()) if n1 else float("nan")
    return InterventionalTruth(
        theta=theta,
        theta_se=_binom_se(theta, n),
        gamma=gamma,
        gamma_se=_binom_se(gamma, n),
        err0=err0,
        err0_se=_binom_se(err0, max(n0, 1)),
        err1=err1,
        err1_se=_binom_se(err1, max(n1, 1)),
        n_draws=n,
    )
