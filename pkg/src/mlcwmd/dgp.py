"""Synthetic two-level data from a known mixture of cluster-weighted components."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .data import Dataset, design_matrix
from .dists import IsingModel, ising_sample


class Simulated(NamedTuple):
    dataset: Dataset
    labels: np.ndarray
    intercepts: np.ndarray  # (J, C) group-by-cluster random intercepts


class StratificationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Parameters of a data-generating mixture.

    Per-cluster arrays are stacked along the first axis.  ``formula`` and
    ``intercept`` define the regression design from the generated columns;
    ``fixed_probs`` gives per-cluster Bernoulli rates for binary columns that
    enter the regression only.
    """

    w: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    lambdas: tuple
    ising: tuple
    beta: np.ndarray
    sigma_b: np.ndarray
    J: int
    n_per_group: int
    u_names: tuple
    v_names: tuple
    d_names: tuple
    levels: tuple
    formula: tuple
    intercept: bool = False
    fixed_names: tuple = ()
    fixed_probs: np.ndarray | None = None
    domain: str = "01"
    group_labels: tuple = field(default=())

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if abs(w.sum() - 1) > 1e-10 or np.any(w <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        C = w.size
        for name in ("mu", "Sigma", "beta", "sigma_b"):
            if np.shape(getattr(self, name))[0] != C:
                raise ValueError(f"{name} must have one entry per cluster")
        for c in range(C):
            S = np.asarray(self.Sigma[c])
            if S.size and (not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0):
                raise ValueError(f"Sigma for cluster {c + 1} is not symmetric positive definite")
            for lam in self.lambdas[c]:
                if abs(np.sum(lam) - 1) > 1e-10 or np.min(lam) <= 0:
                    raise ValueError(f"category probabilities of cluster {c + 1} invalid")
        if not self.group_labels:
            object.__setattr__(self, "group_labels", tuple(f"g{j + 1}" for j in range(self.J)))

    @property
    def C(self):
        return len(self.w)

    @property
    def n_obs(self):
        return self.J * self.n_per_group

    def to_dict(self):
        return {
            "w": np.asarray(self.w).tolist(), "mu": np.asarray(self.mu).tolist(),
            "Sigma": np.asarray(self.Sigma).tolist(),
            "lambdas": [[np.asarray(l).tolist() for l in lc] for lc in self.lambdas],
            "ising": [m.to_dict() for m in self.ising],
            "beta": np.asarray(self.beta).tolist(), "sigma_b": np.asarray(self.sigma_b).tolist(),
            "J": self.J, "n_per_group": self.n_per_group,
            "u_names": list(self.u_names), "v_names": list(self.v_names), "d_names": list(self.d_names),
            "levels": [list(l) for l in self.levels], "formula": list(self.formula),
            "intercept": self.intercept, "fixed_names": list(self.fixed_names),
            "fixed_probs": None if self.fixed_probs is None else np.asarray(self.fixed_probs).tolist(),
            "domain": self.domain, "group_labels": list(self.group_labels),
        }

    @classmethod
    def from_dict(cls, d):
        C = len(d["w"])
        p = len(d["u_names"])
        return cls(
            w=np.array(d["w"], dtype=float), mu=np.array(d["mu"], dtype=float).reshape(C, p),
            Sigma=np.array(d["Sigma"], dtype=float).reshape(C, p, p),
            lambdas=tuple(tuple(np.array(l, dtype=float) for l in lc) for lc in d["lambdas"]),
            ising=tuple(IsingModel.from_dict(m) for m in d["ising"]),
            beta=np.array(d["beta"], dtype=float), sigma_b=np.array(d["sigma_b"], dtype=float),
            J=int(d["J"]), n_per_group=int(d["n_per_group"]),
            u_names=tuple(d["u_names"]), v_names=tuple(d["v_names"]), d_names=tuple(d["d_names"]),
            levels=tuple(tuple(l) for l in d["levels"]), formula=tuple(d["formula"]),
            intercept=bool(d.get("intercept", False)), fixed_names=tuple(d.get("fixed_names", ())),
            fixed_probs=None if d.get("fixed_probs") is None else np.array(d["fixed_probs"], dtype=float),
            domain=d.get("domain", "01"), group_labels=tuple(d.get("group_labels", ())),
        )


def builtin_table1():
    """Three-cluster benchmark: 10 groups of 200, two continuous, two categorical, three binary."""
    pairs = [(0.21, -1.10, 0.0), (-0.73, 0.83, 0.0), (-4.15, 2.11, 1.14)]
    nus = [(0.11, 0.38, -0.49), (-0.15, 0.88, -0.18), (0.73, -0.23, 0.01)]
    ising = tuple(IsingModel.from_pairs(nu, {(0, 1): g[0], (0, 2): g[1], (1, 2): g[2]})
                  for nu, g in zip(nus, pairs))
    lam_a1 = [(0.51, 0.49), (0.49, 0.51), (0.47, 0.53)]
    lam_a2 = [(0.75, 0.18, 0.07), (0.07, 0.75, 0.18), (0.30, 0.51, 0.19)]
    return GroundTruth(
        w=np.array([0.2, 0.3, 0.5]),
        mu=np.array([[2.05, 0.13], [5.06, 4.84], [4.22, -4.51]]),
        Sigma=np.array([[[0.7, 0.5], [0.5, 3.0]],
                        [[2.0, -1.0], [-1.0, 3.0]],
                        [[3.0, 1.0], [1.0, 2.0]]]),
        lambdas=tuple((np.array(a), np.array(b)) for a, b in zip(lam_a1, lam_a2)),
        ising=ising,
        beta=np.array([[-0.52, 0.08, 1.31, 0.22, 5.33, 2.75, 2.29, 0.93],
                       [-0.07, 0.79, -0.46, 0.25, -3.89, -0.63, 0.63, -1.51],
                       [-0.42, -0.31, -1.33, -0.60, -4.18, 4.89, 3.34, -0.46]]),
        sigma_b=np.array([2.0, 2.0, 2.0]),
        J=10, n_per_group=200,
        u_names=("x1", "x2"), v_names=("a1", "a2"), d_names=("d1", "d2", "d3"),
        levels=(("1", "2"), ("1", "2", "3")),
        formula=("x1", "x2", "a1", "a2", "d1", "d2", "d3"),
        intercept=False,
    )


def builtin_application_analogue(J=32, n_per_group=50, sigma_b=0.5):
    """Synthetic stand-in for a hospital cohort: age and a comorbidity score,
    three dependent binary traits (sex, two chronic conditions) and two acute
    conditions that enter only the mortality regression."""
    nus = [(0.11, -3.41, -1.37), (1.80, -2.10, -1.90), (0.28, -4.86, -1.40)]
    gammas = [{(0, 1): 0.1, (0, 2): 0.1, (1, 2): 2.5},
              {(0, 1): 0.0, (0, 2): -0.8, (1, 2): 1.5},
              {(0, 1): 0.0, (0, 2): 0.6, (1, 2): 1.5}]
    ising = tuple(IsingModel.from_pairs(nu, g) for nu, g in zip(nus, gammas))
    logit = lambda p: float(np.log(p / (1 - p)))  # noqa: E731
    return GroundTruth(
        w=np.array([0.852, 0.100, 0.048]),
        mu=np.array([[82.52, 9.87], [59.67, 4.59], [74.65, 29.81]]),
        Sigma=np.array([[[51.3, -3.8], [-3.8, 36.9]],
                        [[91.6, -6.3], [-6.3, 19.2]],
                        [[98.6, 14.7], [14.7, 35.9]]]),
        lambdas=((), (), ()),
        ising=ising,
        beta=np.array([[logit(0.356), 0.18, 0.10],
                       [logit(0.193), -0.08, 1.51],
                       [logit(0.433), 0.27, -0.90]]),
        sigma_b=np.full(3, float(sigma_b)),
        J=J, n_per_group=n_per_group,
        u_names=("age", "mcs"), v_names=(), d_names=("sex", "copd", "brh"), levels=(),
        formula=("pna", "rf"), intercept=True,
        fixed_names=("pna", "rf"), fixed_probs=np.array([[0.218, 0.16]] * 3),
        group_labels=tuple(f"H{j + 1}" for j in range(J)),
    )


def _draw_rows(gt, labels, groups, b, rng):
    n = labels.size
    C = gt.C
    p, h, f = len(gt.u_names), len(gt.d_names), len(gt.fixed_names)
    U = np.zeros((n, p))
    V = np.ones((n, len(gt.v_names)), dtype=int)
    D = np.zeros((n, h))
    X = np.zeros((n, f))
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        if p:
            U[idx] = rng.multivariate_normal(gt.mu[c], gt.Sigma[c], size=idx.size)
        for r, lam in enumerate(gt.lambdas[c]):
            V[idx, r] = rng.choice(len(lam), size=idx.size, p=lam) + 1
        if h:
            D[idx] = ising_sample(gt.ising[c], idx.size, rng)
        if f:
            X[idx] = (rng.random((idx.size, f)) < gt.fixed_probs[c]).astype(float)
    ds = Dataset(y=None, groups=groups, group_labels=gt.group_labels, U=U, V=V, D=D, X_fixed=X,
                 u_names=gt.u_names, v_names=gt.v_names, d_names=gt.d_names,
                 fixed_names=gt.fixed_names, levels=gt.levels, ising_domain=gt.domain)
    F, _ = design_matrix(ds, gt.formula, gt.intercept)
    eta = np.einsum("ij,ij->i", F, gt.beta[labels]) + b[groups, labels]
    y = (rng.random(n) < expit(eta)).astype(float)
    return Dataset(y=y, groups=groups, group_labels=gt.group_labels, U=U, V=V, D=D, X_fixed=X,
                   u_names=gt.u_names, v_names=gt.v_names, d_names=gt.d_names,
                   fixed_names=gt.fixed_names, levels=gt.levels, ising_domain=gt.domain)


def generate(gt, rng, max_attempts=100):
    """Training sample: ``n_per_group`` rows in each of ``J`` groups.

    Cluster labels are drawn from ``w`` and re-drawn (up to ``max_attempts``
    times) until every (group, cluster) cell holds at least one row.
    """
    groups = np.repeat(np.arange(gt.J), gt.n_per_group)
    for _ in range(max_attempts):
        labels = rng.choice(gt.C, size=groups.size, p=gt.w)
        counts = np.zeros((gt.J, gt.C), dtype=int)
        np.add.at(counts, (groups, labels), 1)
        if counts.min() > 0:
            break
    else:
        raise StratificationError(f"could not fill every (group, cluster) cell in {max_attempts} draws")
    b = rng.normal(0.0, 1.0, size=(gt.J, gt.C)) * gt.sigma_b
    return Simulated(_draw_rows(gt, labels, groups, b, rng), labels, b)


def generate_test_split(gt, n_test, rng):
    """Hold-out sample from the same groups with freshly drawn random intercepts."""
    groups = rng.integers(0, gt.J, size=n_test)
    labels = rng.choice(gt.C, size=n_test, p=gt.w)
    b = rng.normal(0.0, 1.0, size=(gt.J, gt.C)) * gt.sigma_b
    return Simulated(_draw_rows(gt, labels, groups, b, rng), labels, b)


def simulate_replicate(gt, seed, n_test=200):
    """(train, test) pair drawn from two independent streams of one seed."""
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    train = generate(gt, np.random.default_rng(train_ss))
    test = generate_test_split(gt, n_test, np.random.default_rng(test_ss))
    return train, test
