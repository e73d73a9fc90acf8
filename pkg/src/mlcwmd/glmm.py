"""Weighted logistic regression, with and without a Gaussian random intercept.

The mixed model is

    logit(pi_ij) = f_ij' beta + b_j,   b_j ~ N(0, sigma_b^2)

and is fitted by maximizing the Laplace approximation of the marginal
likelihood.  The group modes b_j are found by a vectorized Newton solve; the
outer problem over (beta, log sigma_b) uses L-BFGS-B with an exact gradient
(implicit differentiation through the modes).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit
from scipy.stats import norm

BETA_CAP = 15.0
SIGMA_BOUNDS = (1e-4, 100.0)
MODE_TOL = 1e-10


@dataclass
class LogisticFit:
    beta: np.ndarray
    se: np.ndarray
    pvalues: np.ndarray
    loglik: float
    converged: bool
    separated: bool = False
    n_iter: int = 0
    n_used: float = 0.0


@dataclass
class LogisticMixedFit:
    beta: np.ndarray
    se: np.ndarray
    pvalues: np.ndarray
    sigma_b: float
    b: np.ndarray
    b_sd: np.ndarray
    loglik: float
    converged: bool
    separated: bool = False
    n_iter: int = 0
    n_used: float = 0.0

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        arrays = ("beta", "se", "pvalues", "b", "b_sd")
        return cls(**{k: (np.asarray(v, dtype=float) if k in arrays else v) for k, v in d.items()})


def _bernoulli_ll(y, eta):
    return y * eta - np.logaddexp(0.0, eta)


def _wald(beta, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    return np.clip(2.0 * norm.sf(np.abs(z)), 0.0, 1.0)


def _prepare(F, y, weights, need_both=True):
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    y = np.asarray(y, dtype=float)
    w = np.ones(y.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    active = w > 0
    ya = y[active]
    if ya.size == 0:
        raise ValueError("no rows with positive weight")
    if need_both and np.all(ya == ya[0]):
        raise ValueError("weighted rows contain a single response class; logistic fit is undefined")
    return F, y, w, active


def fit_logistic_glm(F, y, weights=None, tol=1e-8, maxiter=100, beta_cap=BETA_CAP):
    """Weighted logistic regression by Newton-Raphson (IRLS).

    Stops when the deviance changes by less than ``tol``.  If the
    coefficients run away (complete or quasi separation) they are clamped to
    ``[-beta_cap, beta_cap]`` and the fit is flagged.
    """
    F, y, w, active = _prepare(F, y, weights)
    Fa, ya, wa = F[active], y[active], w[active]
    m = Fa.shape[1]
    beta = np.zeros(m)
    dev = -2.0 * wa @ _bernoulli_ll(ya, Fa @ beta)
    converged = separated = False
    it = 0
    for it in range(1, maxiter + 1):
        pi = expit(Fa @ beta)
        W = wa * pi * (1.0 - pi)
        info = Fa.T @ (W[:, None] * Fa)
        score = Fa.T @ (wa * (ya - pi))
        step = np.linalg.lstsq(info, score, rcond=None)[0]
        new_dev = np.inf
        for _ in range(30):
            cand = beta + step
            new_dev = -2.0 * wa @ _bernoulli_ll(ya, Fa @ cand)
            if new_dev <= dev + 1e-12:
                break
            step /= 2.0
        beta = cand
        if np.any(np.abs(beta) > beta_cap):
            beta = np.clip(beta, -beta_cap, beta_cap)
            separated = True
            dev = -2.0 * wa @ _bernoulli_ll(ya, Fa @ beta)
            break
        if abs(dev - new_dev) < tol:
            dev = new_dev
            converged = True
            break
        dev = new_dev
    if separated:
        warnings.warn("logistic GLM: separation detected, coefficients clamped", RuntimeWarning, stacklevel=2)
    pi = expit(Fa @ beta)
    info = Fa.T @ ((wa * pi * (1.0 - pi))[:, None] * Fa)
    se = np.sqrt(np.clip(np.diag(np.linalg.pinv(info)), 0.0, None))
    return LogisticFit(beta=beta, se=se, pvalues=_wald(beta, se), loglik=-0.5 * dev,
                       converged=converged and not separated, separated=separated,
                       n_iter=it, n_used=float(wa.sum()))


class _LaplaceObjective:
    """Negative Laplace log-likelihood over theta = (beta, log sigma_b)."""

    def __init__(self, F, g, y, w, J, b0=None):
        self.F, self.g, self.y, self.w, self.J = F, g, y, w, J
        self.G = np.zeros((F.shape[0], J))
        self.G[np.arange(F.shape[0]), g] = 1.0
        self.b = np.zeros(J) if b0 is None else np.array(b0, dtype=float)
        self.n_eval = 0

    def _gsum(self, x):
        return np.bincount(self.g, weights=x, minlength=self.J)

    def modes(self, eta0, s2):
        b = self.b
        for _ in range(100):
            pi = expit(eta0 + b[self.g])
            grad = self._gsum(self.w * (self.y - pi)) - b / s2
            H = self._gsum(self.w * pi * (1.0 - pi)) + 1.0 / s2
            if np.max(np.abs(grad)) <= MODE_TOL:
                break
            b = b + np.clip(grad / H, -5.0, 5.0)
        self.b = b
        return b, pi, H

    def value_and_grad(self, theta):
        self.n_eval += 1
        F, y, w, g = self.F, self.y, self.w, self.g
        beta, s = theta[:-1], theta[-1]
        s2 = np.exp(2.0 * s)
        eta0 = F @ beta
        b, pi, H = self.modes(eta0, s2)
        eta = eta0 + b[g]
        ll = w @ _bernoulli_ll(y, eta)
        value = ll - np.sum(b * b / (2.0 * s2) + s + 0.5 * np.log(H))

        v = w * pi * (1.0 - pi)
        t = v * (1.0 - 2.0 * pi)
        T = self._gsum(t)
        A = self.G.T @ (v[:, None] * F)             # J x m, sum_i w v f
        dbdbeta = -A / H[:, None]
        g_beta = F.T @ (w * (y - pi)) - 0.5 * (F.T @ (t / H[g]) + ((T / H)[:, None] * dbdbeta).sum(axis=0))
        dbds = 2.0 * b / (s2 * H)
        g_s = np.sum(b * b / s2 - 1.0) - 0.5 * np.sum((T * dbds - 2.0 / s2) / H)
        return -value, -np.concatenate([g_beta, [g_s]])

    def glm_value_and_grad(self, beta):
        self.n_eval += 1
        pi = expit(self.F @ beta)
        ll = self.w @ _bernoulli_ll(self.y, self.F @ beta)
        return -ll, -(self.F.T @ (self.w * (self.y - pi)))


def fit_logistic_mixed(F, groups, y, weights=None, n_groups=None, init=None, sigma_fixed=None,
                       beta_cap=BETA_CAP, gtol=1e-6, maxiter=200):
    """Random-intercept logistic regression by Laplace-approximated ML.

    Parameters
    ----------
    F : (N, m) fixed-effects design.
    groups : (N,) integer group codes in ``0..n_groups-1``.
    y : (N,) binary response.
    weights : per-row weights in [0, 1]; rows with weight 0 are ignored.
    init : optional previous :class:`LogisticMixedFit` used as a warm start.
    sigma_fixed : hold sigma_b at this value (0 reduces to a plain GLM).
    """
    F, y, w, active = _prepare(F, y, weights)
    groups = np.asarray(groups, dtype=int)
    J = int(n_groups if n_groups is not None else groups.max() + 1)
    Fa, ga, ya, wa = F[active], groups[active], y[active], w[active]
    m = Fa.shape[1]

    if init is not None:
        beta0 = np.clip(np.asarray(init.beta, dtype=float), -beta_cap, beta_cap)
        sigma0 = float(np.clip(init.sigma_b, *SIGMA_BOUNDS))
        b0 = np.asarray(init.b, dtype=float)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            beta0 = fit_logistic_glm(Fa, ya, wa, beta_cap=beta_cap).beta
        sigma0, b0 = 1.0, None
    obj = _LaplaceObjective(Fa, ga, ya, wa, J, b0)
    beta_bounds = [(-beta_cap, beta_cap)] * m

    if sigma_fixed is not None and sigma_fixed <= 0.0:
        res = optimize.minimize(obj.glm_value_and_grad, beta0, jac=True, method="L-BFGS-B",
                                bounds=beta_bounds,
                                options={"gtol": gtol, "maxiter": maxiter, "ftol": 1e-15})
        beta, sigma = res.x, 0.0
        b = np.zeros(J)
        pi = expit(Fa @ beta)
        H = np.full(J, np.inf)
        loglik = -res.fun
        pg = np.abs(res.jac)
    else:
        if sigma_fixed is not None:
            s_lo = s_hi = float(np.log(sigma_fixed))
        else:
            s_lo, s_hi = np.log(SIGMA_BOUNDS[0]), np.log(SIGMA_BOUNDS[1])
        theta0 = np.concatenate([beta0, [np.clip(np.log(sigma0), s_lo, s_hi)]])
        res = optimize.minimize(obj.value_and_grad, theta0, jac=True, method="L-BFGS-B",
                                bounds=beta_bounds + [(s_lo, s_hi)],
                                options={"gtol": gtol, "maxiter": maxiter, "ftol": 1e-15})
        beta, sigma = res.x[:-1], float(np.exp(res.x[-1]))
        value, grad = obj.value_and_grad(res.x)
        b, pi, H = obj.modes(Fa @ beta, sigma ** 2)
        loglik = -value
        lo = np.array([bd[0] for bd in beta_bounds + [(s_lo, s_hi)]])
        hi = np.array([bd[1] for bd in beta_bounds + [(s_lo, s_hi)]])
        # projected gradient: components pinned at an active bound do not count
        pg = np.abs(np.where(((res.x <= lo) & (grad > 0)) | ((res.x >= hi) & (grad < 0)), 0.0, grad))
        if sigma_fixed is not None:
            pg = pg[:-1]

    separated = bool(np.any(np.abs(beta) >= beta_cap - 1e-8))
    if separated:
        warnings.warn("mixed logistic: separation detected, coefficients clamped", RuntimeWarning, stacklevel=2)
    converged = bool(pg.max() <= max(gtol, 1e-4)) and not separated

    v = wa * pi * (1.0 - pi)
    info = Fa.T @ (v[:, None] * Fa)
    if sigma > 0:
        A = obj.G.T @ (v[:, None] * Fa)
        info = info - A.T @ (A / H[:, None])
    se = np.sqrt(np.clip(np.diag(np.linalg.pinv(info)), 0.0, None))
    b_sd = 1.0 / np.sqrt(H) if sigma > 0 else np.zeros(J)
    return LogisticMixedFit(beta=np.asarray(beta, dtype=float), se=se, pvalues=_wald(beta, se),
                            sigma_b=sigma, b=np.asarray(b, dtype=float), b_sd=b_sd,
                            loglik=float(loglik), converged=converged, separated=separated,
                            n_iter=int(res.nit), n_used=float(wa.sum()))


def laplace_loglik(F, groups, y, beta, sigma_b, weights=None, n_groups=None):
    """Laplace-approximated marginal log-likelihood at fixed parameters."""
    F, y, w, active = _prepare(F, y, weights, need_both=False)
    groups = np.asarray(groups, dtype=int)
    J = int(n_groups if n_groups is not None else groups.max() + 1)
    obj = _LaplaceObjective(F[active], groups[active], y[active], w[active], J)
    value, _ = obj.value_and_grad(np.concatenate([np.asarray(beta, dtype=float), [np.log(sigma_b)]]))
    return -value


def conditional_loglik(fit, F, groups, y):
    """Per-row Bernoulli log-likelihood with the fitted group modes plugged in.

    Group codes outside the fitted range (or negative) get b = 0.
    """
    return _bernoulli_ll(np.asarray(y, dtype=float), linear_predictor(fit, F, groups))


def linear_predictor(fit, F, groups, offset=0.0):
    F = np.asarray(F, dtype=float)
    eta = F @ fit.beta + offset
    b = getattr(fit, "b", None)
    if b is not None and groups is not None:
        groups = np.asarray(groups, dtype=int)
        known = (groups >= 0) & (groups < b.shape[0])
        eta = eta + np.where(known, b[np.clip(groups, 0, b.shape[0] - 1)], 0.0)
    return eta
