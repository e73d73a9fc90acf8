"""Classification EM for mixtures of random-intercept logistic cluster-weighted components.

Each component multiplies a mixed logistic regression for the response by a
multivariate normal (continuous block), independent multinomials
(categorical block) and an Ising model (dependent binary block).  The fitter
alternates parameter updates on hard partitions with re-assignment of every
row to its most probable component.
"""
from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from .data import design_matrix
from .dists import (FactorizationError, IsingModel, categorical_block_logpmf, cholesky_ridged,
                    ising_fit_pseudo, ising_logpmf, mvn_logpdf)
from .glmm import _bernoulli_ll, conditional_loglik, fit_logistic_mixed
from .model import VARIANTS, ClusterParams, FitConfig, ModelFit

log = logging.getLogger(__name__)

BLOCKS = ("regression", "continuous", "categorical", "dichotomous")
_GH_X, _GH_W = hermgauss(24)


class RestartRequired(RuntimeError):
    """The current start produced an unusable partition and must be re-drawn."""


class FitFailed(RuntimeError):
    """Every restart attempt of a start failed."""


@dataclass(frozen=True, eq=False)
class Problem:
    """Arrays the fitter works on, derived once from a dataset."""

    F: np.ndarray
    design_names: tuple
    y: np.ndarray | None
    groups: np.ndarray
    J: int
    U: np.ndarray
    V: np.ndarray
    k: tuple
    D: np.ndarray
    domain: str
    variant: str
    formula: tuple
    intercept: bool

    @property
    def n(self):
        return self.groups.shape[0]

    @property
    def m(self):
        return self.F.shape[1]


def dichotomous_as_categorical(D, domain):
    """1-based two-level category codes for a binary block."""
    D = np.asarray(D, dtype=float)
    return (D.astype(int) + 1) if domain == "01" else ((D + 1) / 2).astype(int) + 1


def prepare(ds, formula=None, intercept=True, variant="full"):
    """Build the working arrays; ``noD`` routes the binary block through the multinomial term."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if formula is None:
        formula = ds.u_names + ds.v_names + ds.d_names + ds.fixed_names
    F, names = design_matrix(ds, formula, intercept)
    V, k, D = ds.V, tuple(ds.n_categories), ds.D
    if variant == "noD" and ds.h:
        V = np.hstack([V, dichotomous_as_categorical(D, ds.ising_domain)])
        k = k + (2,) * ds.h
        D = np.zeros((ds.n_obs, 0))
    return Problem(F=F, design_names=tuple(names), y=ds.y, groups=ds.groups, J=ds.n_groups,
                   U=ds.U, V=V, k=k, D=D, domain=ds.ising_domain, variant=variant,
                   formula=tuple(formula), intercept=intercept)


def count_parameters(C, m, p, k, h, variant="full"):
    """Free-parameter count per block and in total.

    ``k`` are the category counts of the categorical columns only; in the
    ``noD`` variant the h binary columns cost one parameter each.
    """
    out = {
        "regression": C * (1 + m),
        "continuous": C * p * (p + 3) // 2,
        "categorical": C * sum(kr - 1 for kr in k),
        "dichotomous": C * h * (h + 1) // 2 if variant == "full" else C * h,
        "weights": C - 1,
    }
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def regression_loglik(reg, prob, rows=slice(None), mode="conditional"):
    """Per-row log p(y | x) for the regression term of one component."""
    F, g, y = prob.F[rows], prob.groups[rows], prob.y[rows]
    if mode == "conditional":
        return conditional_loglik(reg, F, g, y)
    eta = F @ reg.beta
    s = np.sqrt(2.0) * reg.sigma_b
    ll = _bernoulli_ll(y[:, None], eta[:, None] + s * _GH_X[None, :])
    return logsumexp(ll, axis=1, b=_GH_W[None, :] / np.sqrt(np.pi))


def block_logdens(cp, prob, rows=slice(None), y_mode="conditional"):
    """Per-row log densities of each block of one component (no mixture weight)."""
    out = {}
    out["regression"] = (regression_loglik(cp.regression, prob, rows, y_mode)
                         if prob.y is not None else np.zeros(prob.U[rows].shape[0]))
    out["continuous"] = mvn_logpdf(prob.U[rows], cp.mu, cp.Sigma)
    out["categorical"] = categorical_block_logpmf(prob.V[rows], cp.lambdas)
    out["dichotomous"] = (ising_logpmf(prob.D[rows], cp.ising) if prob.D.shape[1]
                          else np.zeros(prob.U[rows].shape[0]))
    return out


def log_joint(prob, params, y_mode="conditional", with_response=True):
    """N x C matrix of log(w_c * component density) for every row."""
    cols = []
    for cp in params:
        b = block_logdens(cp, prob, y_mode=y_mode)
        total = b["continuous"] + b["categorical"] + b["dichotomous"] + np.log(cp.w)
        if with_response:
            total = total + b["regression"]
        cols.append(total)
    return np.column_stack(cols)


def responsibilities(logd):
    """Row-normalized posterior weights from a log-joint matrix."""
    logd = np.asarray(logd, dtype=float)
    mx = logd.max(axis=1, keepdims=True)
    bad = np.flatnonzero(~np.isfinite(mx[:, 0]))
    if bad.size:
        raise FloatingPointError(f"row {int(bad[0]) + 1} has zero density under every component")
    e = np.exp(logd - mx)
    return e / e.sum(axis=1, keepdims=True)


def e_step(prob, params, y_mode="conditional"):
    """Posterior component probabilities, rows summing to one."""
    return responsibilities(log_joint(prob, params, y_mode))


def hard_assign(tau):
    """Row-wise argmax; ties go to the lowest component index."""
    return np.argmax(np.asarray(tau), axis=1)


def classification_loglik(prob, params, z, y_mode="conditional"):
    """Complete-data log-likelihood with the hard labels ``z`` plugged in."""
    logd = log_joint(prob, params, y_mode)
    return float(logd[np.arange(prob.n), np.asarray(z)].sum())


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def update_weights(z, C):
    return np.bincount(z, minlength=C) / z.size


def update_gaussian(U, ridge=1e-8, label=""):
    """Sample mean and (1/n) scatter, ridged until positive definite."""
    mu = U.mean(axis=0)
    R = U - mu
    S = R.T @ R / U.shape[0]
    p = S.shape[0]
    if p == 0:
        return mu, S
    try:
        np.linalg.cholesky(S)
        return mu, S
    except np.linalg.LinAlgError:
        pass
    L = cholesky_ridged(S, ridge=ridge, label=label)
    return mu, L @ L.T


def update_categorical(Vcol, k, floor=1e-6):
    """Category frequencies with every entry kept at or above ``floor``."""
    lam = np.bincount(Vcol, minlength=k + 1)[1:].astype(float)
    lam /= lam.sum()
    low = lam < floor
    if low.any():
        lam[low] = floor
        lam[~low] *= (1.0 - floor * low.sum()) / lam[~low].sum()
    return lam


def min_cluster_size(config, m):
    return config.min_cluster_size if config.min_cluster_size is not None else max(5, m + 2)


def m_step(prob, z, C, config, prev=None):
    """Per-component parameter updates on the partition ``z``.

    With ``prev`` given and ``config.monotone_guard`` set, a block whose new
    estimate scores lower than the previous one on the current members keeps
    the previous estimate.  Returns ``(params, n_guard_triggers)``.
    """
    z = np.asarray(z)
    sizes = np.bincount(z, minlength=C)
    floor = min_cluster_size(config, prob.m)
    if sizes.min() < floor:
        raise RestartRequired(f"cluster sizes {sizes.tolist()} below minimum {floor}")
    w = sizes / prob.n
    params, triggers = [], 0
    for c in range(C):
        idx = np.flatnonzero(z == c)
        old = prev[c] if prev is not None else None
        try:
            mu, Sigma = update_gaussian(prob.U[idx], config.sigma_ridge, label=f"cluster {c + 1}")
        except FactorizationError as exc:
            raise RestartRequired(str(exc)) from exc
        lambdas = tuple(update_categorical(prob.V[idx, r], kr, config.lambda_floor)
                        for r, kr in enumerate(prob.k))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if prob.D.shape[1]:
                ising = ising_fit_pseudo(prob.D[idx], domain=prob.domain,
                                         init=old.ising if old is not None else None)
            else:
                ising = IsingModel.independent(0, prob.domain)
            try:
                reg = fit_logistic_mixed(prob.F[idx], prob.groups[idx], prob.y[idx], n_groups=prob.J,
                                         init=old.regression if old is not None else None)
            except ValueError as exc:
                raise RestartRequired(f"cluster {c + 1}: {exc}") from exc
        cp = ClusterParams(w=float(w[c]), regression=reg, mu=mu, Sigma=Sigma, lambdas=lambdas, ising=ising)
        if old is not None and config.monotone_guard:
            cp, n = _guard(cp, old, prob, idx, config.y_likelihood)
            triggers += n
        params.append(cp)
    return params, triggers


def _guard(new, old, prob, idx, y_mode):
    """Keep any block of ``old`` that fits the member rows better than ``new``."""
    nb = block_logdens(new, prob, idx, y_mode)
    ob = block_logdens(old, prob, idx, y_mode)
    fields_for = {"regression": ("regression",), "continuous": ("mu", "Sigma"),
                  "categorical": ("lambdas",), "dichotomous": ("ising",)}
    kw = {}
    n = 0
    for block, names in fields_for.items():
        new_val, old_val = nb[block].sum(), ob[block].sum()
        if old_val > new_val:
            n += 1
            for name in names:
                kw[name] = getattr(old, name)
    if not kw:
        return new, 0
    return ClusterParams(**{**{k: getattr(new, k) for k in ("w", "regression", "mu", "Sigma",
                                                             "lambdas", "ising")}, **kw}), n


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def initial_partition(prob, C, config, rng):
    if C == 1:
        return np.zeros(prob.n, dtype=int)
    if config.init == "kmeans" and prob.U.shape[1] > 0:
        X = prob.U
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        _, z = kmeans2(X, C, minit="++", seed=rng)
        return z.astype(int)
    return rng.integers(0, C, size=prob.n)


def _canonical_order(params):
    def key(i):
        cp = params[i]
        first = float(cp.mu[0]) if cp.mu.size else 0.0
        return (-cp.w, first, i)
    return sorted(range(len(params)), key=key)


def start_rng(seed, C, start):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(C), int(start)]))


def _run(prob, C, config, z):
    params, trace, triggers = None, [], 0
    converged = False
    logd = None
    for _ in range(config.max_iter):
        params, g = m_step(prob, z, C, config, prev=params)
        triggers += g
        logd = log_joint(prob, params, config.y_likelihood)
        z = hard_assign(logd)
        trace.append(float(logd[np.arange(prob.n), z].sum()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < config.tol:
            converged = True
            break
    return params, logd, z, trace, converged, triggers


def fit_single(ds, C, config=None, seed=None, start=0, variant="full", prob=None):
    """One classification-EM start (with re-draws on unusable partitions)."""
    config = config or FitConfig()
    seed = config.seed if seed is None else seed
    prob = prob or prepare(ds, config.formula, config.intercept, variant)
    if prob.y is None:
        raise ValueError("fitting needs a response column")
    rng = start_rng(seed, C, start)
    last = None
    for attempt in range(1, config.max_restarts + 1):
        z0 = initial_partition(prob, C, config, rng)
        try:
            params, logd, z, trace, converged, triggers = _run(prob, C, config, z0)
        except RestartRequired as exc:
            last = exc
            log.debug("C=%d start=%d attempt %d restarted: %s", C, start, attempt, exc)
            continue
        order = _canonical_order(params)
        params = [params[i] for i in order]
        logd = logd[:, order]
        tau = responsibilities(logd)
        z = hard_assign(tau)
        loglik = float(logsumexp(logd, axis=1).sum())
        k = n_params_for(prob, C)
        return ModelFit(
            C=C, components=tuple(params), tau=tau, z=z, loglik=loglik,
            objective=trace[-1], bic=float(-2.0 * loglik + k * np.log(prob.n)), n_params=k,
            trace=trace, seed=int(seed), start=int(start), converged=converged, variant=variant,
            design_names=prob.design_names, formula=prob.formula, intercept=prob.intercept,
            schema=ds.roles() if ds is not None else {}, config=config.to_dict(),
            n_obs=prob.n, guard_triggers=triggers, attempts=attempt,
        )
    raise FitFailed(f"C={C} start={start}: all {config.max_restarts} attempts failed ({last})")


def n_params_for(prob, C):
    """BIC parameter count for a prepared problem."""
    if prob.variant == "full":
        return count_parameters(C, prob.m, prob.U.shape[1], prob.k, prob.D.shape[1])["total"]
    # in the noD layout the trailing two-level columns stand for the binary block;
    # each costs one parameter per cluster either way
    return count_parameters(C, prob.m, prob.U.shape[1], prob.k, 0)["total"]


def fit_variant_noD(ds, C, config=None, seed=None, start=0):
    """Same fitter with the binary block modelled as independent two-level categoricals."""
    return fit_single(ds, C, config, seed, start, variant="noD")


@dataclass
class Selection:
    best: ModelFit | None
    table: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)

    @property
    def selected_C(self):
        return None if self.best is None else self.best.C


def _task(args):
    ds, C, config, start, variant = args
    t0 = time.perf_counter()
    try:
        fit = fit_single(ds, C, config, config.seed, start, variant)
        return C, start, fit, None, time.perf_counter() - t0
    except (FitFailed, FloatingPointError) as exc:
        return C, start, None, str(exc), time.perf_counter() - t0


def fit_select(ds, config=None, variant="full", jobs=1):
    """Fit every C of the grid from ``n_starts`` starts and pick the lowest BIC.

    For each C the start with the highest observed log-likelihood is kept.
    A C whose starts all fail is reported as failed and skipped.
    """
    config = config or FitConfig()
    tasks = [(ds, C, config, s, variant) for C in config.c_grid for s in range(config.n_starts)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    sel = Selection(best=None)
    best_per_c = {}
    for C, start, fit, err, secs in results:
        row = {"C": C, "start": start, "status": "ok" if fit else "failed", "seconds": secs}
        if fit is not None:
            row.update(loglik=fit.loglik, objective=fit.objective, bic=fit.bic, n_iter=fit.n_iter,
                       converged=fit.converged, attempts=fit.attempts, guard_triggers=fit.guard_triggers,
                       trace=list(fit.trace))
            if C not in best_per_c or fit.loglik > best_per_c[C].loglik:
                best_per_c[C] = fit
        else:
            row["error"] = err
            log.warning("C=%d start=%d failed: %s", C, start, err)
        sel.runs.append(row)
    for C in config.c_grid:
        fit = best_per_c.get(C)
        if fit is None:
            sel.table.append({"C": C, "status": "failed", "loglik": float("nan"), "bic": float("nan"),
                              "n_params": None, "start": None,
                              "n_failed": sum(r["C"] == C and r["status"] == "failed" for r in sel.runs)})
            continue
        sel.fits[C] = fit
        sel.table.append({"C": C, "status": "ok", "loglik": fit.loglik, "bic": fit.bic,
                          "n_params": fit.n_params, "start": fit.start,
                          "n_failed": sum(r["C"] == C and r["status"] == "failed" for r in sel.runs)})
        if sel.best is None or fit.bic < sel.best.bic:
            sel.best = fit
    return sel
