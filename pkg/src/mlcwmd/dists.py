"""Log-density kernels for the covariate blocks of a cluster-weighted model.

Continuous covariates use a multivariate normal, categorical covariates a
product of independent multinomials and dependent binary covariates an Ising
model.  Everything is evaluated in log space.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular
from scipy.special import expit, logsumexp

H_MAX = 15
NU_CAP = 10.0
DOMAINS = ("01", "pm1")

_LOG_2PI = np.log(2.0 * np.pi)


class FactorizationError(np.linalg.LinAlgError):
    """Covariance matrix could not be factorized even after ridging."""


class IsingCapacityError(ValueError):
    """Exact enumeration requested for a model with too many variables."""


# ---------------------------------------------------------------------------
# Multivariate normal
# ---------------------------------------------------------------------------

def cholesky_ridged(Sigma, ridge=1e-8, max_ridge=1e-4, label=""):
    """Lower Cholesky factor of ``Sigma``.

    If the plain factorization fails, ``ridge * I`` is added and the ridge is
    escalated by a factor of ten up to ``max_ridge``.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(Sigma.shape[0])
    r = ridge
    while r <= max_ridge * (1 + 1e-12):
        try:
            return np.linalg.cholesky(Sigma + r * eye)
        except np.linalg.LinAlgError:
            r *= 10.0
    where = f" for {label}" if label else ""
    raise FactorizationError(f"covariance{where} is not positive definite (ridge up to {max_ridge:g})")


def mvn_logpdf(u, mu, Sigma, chol=None, label=""):
    """Log density of N(mu, Sigma) at ``u``.

    ``u`` may be a single length-p vector or an (n, p) matrix of rows; the
    result is a float or a length-n array accordingly.
    """
    u = np.asarray(u, dtype=float)
    mu = np.asarray(mu, dtype=float)
    single = u.ndim == 1
    U = np.atleast_2d(u)
    p = mu.shape[0]
    if p == 0:
        out = np.zeros(U.shape[0])
        return float(out[0]) if single else out
    L = cholesky_ridged(Sigma, label=label) if chol is None else chol
    resid = solve_triangular(L, (U - mu).T, lower=True)
    maha = np.einsum("ij,ij->j", resid, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (p * _LOG_2PI + logdet + maha)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Multinomial
# ---------------------------------------------------------------------------

def multinomial_logpmf(v, lam):
    """log lambda_s for observed category ``v`` (1-based codes)."""
    lam = np.asarray(lam, dtype=float)
    v_arr = np.asarray(v)
    if np.any(v_arr < 1) or np.any(v_arr > lam.shape[0]):
        raise IndexError(f"category index out of range 1..{lam.shape[0]}: {v!r}")
    out = np.log(lam)[v_arr.astype(int) - 1]
    return float(out) if out.ndim == 0 else out


def categorical_block_logpmf(V, lambdas):
    """Sum over categorical columns of multinomial log-probabilities, per row."""
    V = np.asarray(V)
    out = np.zeros(V.shape[0])
    for r, lam in enumerate(lambdas):
        out += multinomial_logpmf(V[:, r], lam)
    return out


# ---------------------------------------------------------------------------
# Ising model
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _states(h, domain):
    grid = np.array(list(itertools.product((0, 1), repeat=h)), dtype=float).reshape(2 ** h, h)
    if domain == "pm1":
        grid = 2.0 * grid - 1.0
    grid.setflags(write=False)
    return grid


def enumerate_states(h, domain="01"):
    """All 2**h state vectors of the given domain (read-only array)."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown Ising domain {domain!r}")
    return _states(int(h), domain)


def _energy(D, nu, gamma):
    # 0.5 * d' G d with zero diagonal counts each pair once
    return 0.5 * np.einsum("ij,jk,ik->i", D, gamma, D) + D @ nu


@dataclass(frozen=True, eq=False)
class IsingModel:
    """Pairwise binary model with thresholds ``nu`` and interactions ``gamma``."""

    nu: np.ndarray
    gamma: np.ndarray
    domain: str = "01"
    frozen_vars: tuple = ()
    log_S: float | None = field(default=None, compare=False)

    def __post_init__(self):
        nu = np.array(self.nu, dtype=float).reshape(-1)
        h = nu.shape[0]
        gamma = np.asarray(self.gamma, dtype=float).reshape(h, h)
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown Ising domain {self.domain!r}")
        if not np.allclose(gamma, gamma.T, atol=1e-12):
            raise ValueError("interaction matrix must be symmetric")
        if np.any(np.diag(gamma) != 0):
            raise ValueError("interaction matrix must have a zero diagonal")
        nu.setflags(write=False)
        gamma = gamma.copy()
        gamma.setflags(write=False)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "gamma", gamma)
        if self.log_S is None and h <= H_MAX:
            S = enumerate_states(h, self.domain)
            object.__setattr__(self, "log_S", float(logsumexp(_energy(S, nu, gamma))))

    @property
    def h(self):
        return self.nu.shape[0]

    @classmethod
    def from_pairs(cls, nu, pairs, domain="01"):
        """Build from thresholds and a ``{(l, k): gamma_lk}`` mapping (0-based)."""
        nu = np.asarray(nu, dtype=float)
        gamma = np.zeros((nu.size, nu.size))
        for (l, k), g in pairs.items():
            gamma[l, k] = gamma[k, l] = g
        return cls(nu, gamma, domain)

    @classmethod
    def independent(cls, h, domain="01"):
        return cls(np.zeros(h), np.zeros((h, h)), domain)

    def to_dict(self):
        return {"nu": self.nu.tolist(), "gamma": self.gamma.tolist(), "domain": self.domain,
                "frozen_vars": list(self.frozen_vars)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["nu"], dtype=float), np.array(d["gamma"], dtype=float),
                   d.get("domain", "01"), tuple(d.get("frozen_vars", ())))

    def state_probabilities(self):
        """(states, probabilities) by exact enumeration."""
        S = enumerate_states(self.h, self.domain)
        return S, np.exp(_energy(S, self.nu, self.gamma) - ising_log_normalizer(self))


def _require_exact(m):
    if m.h > H_MAX:
        raise IsingCapacityError(
            f"exact Ising normalizer needs h <= {H_MAX} (got h={m.h}); "
            "use the pseudo-likelihood routines only")


def _check_domain(D, domain):
    D = np.asarray(D, dtype=float)
    allowed = (0.0, 1.0) if domain == "01" else (-1.0, 1.0)
    if D.size and not np.all((D == allowed[0]) | (D == allowed[1])):
        raise ValueError(f"binary states must lie in {{{allowed[0]:g},{allowed[1]:g}}} for domain {domain}")
    return D


def ising_log_normalizer(m):
    """log S: log-sum over all 2**h states of exp(0.5 d'Gd + d'nu)."""
    _require_exact(m)
    return m.log_S


def ising_logpmf(d, m):
    """Exact log-probability of state(s) ``d`` under ``m``."""
    _require_exact(m)
    d = _check_domain(d, m.domain)
    single = d.ndim == 1
    D = np.atleast_2d(d)
    out = _energy(D, m.nu, m.gamma) - m.log_S
    return float(out[0]) if single else out


def _local_fields(D, m_nu, m_gamma):
    # a_il = nu_l + sum_{k != l} gamma_lk d_ik
    return D @ m_gamma + m_nu


def ising_conditional(d, l, m):
    """P(d_l | d_k, k != l) for a single state vector ``d``."""
    d = _check_domain(d, m.domain)
    if not 0 <= l < m.h:
        raise IndexError(f"variable index {l} out of range for h={m.h}")
    a = float(m.nu[l] + m.gamma[l] @ d)
    if m.domain == "01":
        return float(np.exp(d[l] * a - np.logaddexp(0.0, a)))
    return float(np.exp(d[l] * a - np.logaddexp(a, -a)))


def _pl_terms(D, nu, gamma, domain):
    A = _local_fields(D, nu, gamma)
    if domain == "01":
        logp = D * A - np.logaddexp(0.0, A)
        resid = D - expit(A)
    else:
        logp = D * A - np.logaddexp(A, -A)
        resid = D - np.tanh(A)
    return logp, resid


def ising_pseudo_loglik(D_rows, weights, m):
    """Weighted sum over rows and variables of log full-conditional probabilities."""
    D = _check_domain(np.atleast_2d(D_rows), m.domain)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (D.shape[0],))
    logp, _ = _pl_terms(D, m.nu, m.gamma, m.domain)
    return float(w @ logp.sum(axis=1))


def _unpack(theta, h, iu):
    nu = theta[:h]
    gamma = np.zeros((h, h))
    gamma[iu] = theta[h:]
    gamma = gamma + gamma.T
    return nu, gamma


def ising_pseudo_grad(D_rows, weights, m):
    """Gradient of :func:`ising_pseudo_loglik` w.r.t. (nu, upper-triangle gamma)."""
    D = _check_domain(np.atleast_2d(D_rows), m.domain)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (D.shape[0],))
    _, R = _pl_terms(D, m.nu, m.gamma, m.domain)
    g_nu = w @ R
    M = (R * w[:, None]).T @ D
    iu = np.triu_indices(m.h, 1)
    return np.concatenate([g_nu, (M + M.T)[iu]])


def ising_fit_pseudo(D_rows, weights=None, domain="01", init=None, nu_cap=NU_CAP,
                     gtol=1e-6, maxiter=500):
    """Maximum pseudo-likelihood estimate of an Ising model.

    Free parameters are the h thresholds plus the upper triangle of the
    interaction matrix.  A column that is constant among the positively
    weighted rows has its interactions frozen at zero and its threshold set to
    ``+nu_cap`` or ``-nu_cap``; the frozen indices are recorded on the result.
    """
    D = _check_domain(np.atleast_2d(np.asarray(D_rows, dtype=float)), domain)
    n, h = D.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    active = w > 0
    if active.sum() < h + 1:
        raise ValueError(f"need at least {h + 1} weighted rows to fit an Ising model, got {int(active.sum())}")
    Da, wa = D[active], w[active]
    iu = np.triu_indices(h, 1)
    n_par = h + iu[0].size

    frozen = []
    bounds = [(-nu_cap, nu_cap)] * n_par
    theta0 = np.zeros(n_par)
    if init is not None:
        theta0[:h] = init.nu
        theta0[h:] = init.gamma[iu]
    pair_index = {pair: h + t for t, pair in enumerate(zip(*iu))}
    for l in range(h):
        col = Da[:, l]
        if np.all(col == col[0]):
            frozen.append(l)
            hi = col[0] == 1.0
            val = nu_cap if hi else -nu_cap
            bounds[l] = (val, val)
            theta0[l] = val
            for (a, b), t in pair_index.items():
                if l in (a, b):
                    bounds[t] = (0.0, 0.0)
                    theta0[t] = 0.0
    if frozen:
        warnings.warn(f"Ising fit: constant binary column(s) {frozen} frozen", RuntimeWarning, stacklevel=2)
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])

    total = wa.sum()

    def neg(theta):
        nu, gamma = _unpack(theta, h, iu)
        logp, R = _pl_terms(Da, nu, gamma, domain)
        f = -(wa @ logp.sum(axis=1))
        M = (R * wa[:, None]).T @ Da
        g = -np.concatenate([wa @ R, (M + M.T)[iu]])
        return f / total, g / total

    res = optimize.minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"gtol": gtol / total, "maxiter": maxiter, "ftol": 1e-15})
    nu, gamma = _unpack(res.x, h, iu)
    return IsingModel(nu, gamma, domain, tuple(frozen))


def ising_sample(m, n, rng):
    """Draw ``n`` exact samples by enumerating the state probabilities."""
    _require_exact(m)
    S, p = m.state_probabilities()
    idx = rng.choice(S.shape[0], size=int(n), p=p / p.sum())
    return S[idx].copy()


def ising_convert_domain(m, target):
    """Re-express ``m`` in the other state domain via d = (s + 1) / 2."""
    if target not in DOMAINS:
        raise ValueError(f"unknown Ising domain {target!r}")
    if target == m.domain:
        raise ValueError(f"model is already in domain {target}")
    row = m.gamma.sum(axis=1)
    if target == "pm1":
        gamma = m.gamma / 4.0
        nu = m.nu / 2.0 + row / 4.0
    else:
        gamma = 4.0 * m.gamma
        nu = 2.0 * m.nu - 2.0 * row
    return IsingModel(nu, gamma, target, m.frozen_vars)

