"""Estimation controls and fitted-parameter containers, with JSON persistence."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dists import DOMAINS, IsingModel
from .glmm import LogisticMixedFit

SCHEMA_VERSION = "1.0"
VARIANTS = ("full", "noD")


class SchemaError(ValueError):
    """Serialized document is incompatible with this version of the library."""


@dataclass(frozen=True)
class FitConfig:
    """Controls for the classification-EM fitter and model selection.

    ``formula`` names the covariates of the regression component; ``None``
    uses every covariate column of the dataset.  ``min_cluster_size`` of
    ``None`` means ``max(5, m + 2)`` with m the number of fixed effects.
    ``y_likelihood`` picks the regression term of the E-step: ``conditional``
    plugs in the group modes, ``marginal`` integrates a row-level intercept
    over its fitted normal distribution.
    """

    c_grid: tuple = (2, 3, 4)
    n_starts: int = 10
    max_iter: int = 100
    tol: float = 1e-5
    seed: int = 0
    init: str = "random"
    ising_domain: str = "01"
    lambda_floor: float = 1e-6
    sigma_ridge: float = 1e-8
    min_cluster_size: int | None = None
    formula: tuple | None = None
    intercept: bool = True
    y_likelihood: str = "conditional"
    max_restarts: int = 20
    monotone_guard: bool = True

    def __post_init__(self):
        object.__setattr__(self, "c_grid", tuple(int(c) for c in self.c_grid))
        if self.formula is not None:
            object.__setattr__(self, "formula", tuple(self.formula))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.c_grid or any(c < 1 for c in self.c_grid):
            raise ValueError("every C in c_grid must be >= 1")
        if self.min_cluster_size is not None and self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValueError("n_starts and max_iter must be >= 1")
        if self.init not in ("random", "kmeans"):
            raise ValueError(f"init must be 'random' or 'kmeans', got {self.init!r}")
        if self.ising_domain not in DOMAINS:
            raise ValueError(f"ising_domain must be one of {DOMAINS}")
        if self.y_likelihood not in ("conditional", "marginal"):
            raise ValueError("y_likelihood must be 'conditional' or 'marginal'")
        if not 0 < self.lambda_floor < 1:
            raise ValueError("lambda_floor must lie in (0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["c_grid"] = list(self.c_grid)
        d["formula"] = None if self.formula is None else list(self.formula)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ClusterParams:
    """Parameters of one mixture component."""

    w: float
    regression: LogisticMixedFit
    mu: np.ndarray
    Sigma: np.ndarray
    lambdas: tuple
    ising: IsingModel

    @property
    def beta(self):
        return self.regression.beta

    @property
    def sigma_b(self):
        return self.regression.sigma_b

    @property
    def b(self):
        return self.regression.b

    @property
    def b_sd(self):
        return self.regression.b_sd

    def check(self, lambda_floor=0.0, tol=1e-8):
        """List of invariant breaches (empty when the parameters are valid)."""
        out = []
        if not 0 < self.w < 1 + tol:
            out.append("w outside (0, 1]")
        if self.Sigma.size:
            if not np.allclose(self.Sigma, self.Sigma.T):
                out.append("Sigma not symmetric")
            elif np.linalg.eigvalsh(self.Sigma).min() <= 0:
                out.append("Sigma not positive definite")
        for r, lam in enumerate(self.lambdas):
            if abs(lam.sum() - 1) > tol or lam.min() < lambda_floor - tol:
                out.append(f"lambda[{r}] not a floored probability vector")
        if self.sigma_b < 0:
            out.append("sigma_b negative")
        return out

    def to_dict(self):
        return {"w": float(self.w), "regression": self.regression.to_dict(),
                "mu": self.mu.tolist(), "Sigma": self.Sigma.tolist(),
                "lambdas": [lam.tolist() for lam in self.lambdas], "ising": self.ising.to_dict()}

    @classmethod
    def from_dict(cls, d):
        p = len(d["mu"])
        return cls(w=float(d["w"]), regression=LogisticMixedFit.from_dict(d["regression"]),
                   mu=np.array(d["mu"], dtype=float),
                   Sigma=np.array(d["Sigma"], dtype=float).reshape(p, p),
                   lambdas=tuple(np.array(lam, dtype=float) for lam in d["lambdas"]),
                   ising=IsingModel.from_dict(d["ising"]))


@dataclass(eq=False)
class ModelFit:
    """Outcome of one classification-EM run (or the winner of a selection)."""

    C: int
    components: tuple
    tau: np.ndarray
    z: np.ndarray
    loglik: float
    objective: float
    bic: float
    n_params: int
    trace: list
    seed: int
    start: int
    converged: bool
    variant: str = "full"
    design_names: tuple = ()
    formula: tuple = ()
    intercept: bool = True
    schema: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    n_obs: int = 0
    guard_triggers: int = 0
    attempts: int = 1
    metrics: dict = field(default_factory=dict)

    @property
    def weights(self):
        return np.array([c.w for c in self.components])

    @property
    def n_iter(self):
        return len(self.trace)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "C": self.C, "variant": self.variant,
            "components": [c.to_dict() for c in self.components],
            "tau": self.tau.tolist(), "z": self.z.tolist(),
            "loglik": self.loglik, "objective": self.objective, "bic": self.bic,
            "n_params": self.n_params, "trace": list(self.trace),
            "seed": self.seed, "start": self.start, "converged": self.converged,
            "design_names": list(self.design_names), "formula": list(self.formula),
            "intercept": self.intercept, "schema": self.schema, "config": self.config,
            "n_obs": self.n_obs, "guard_triggers": self.guard_triggers, "attempts": self.attempts,
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d):
        version = str(d.get("schema_version", ""))
        if version.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
            raise SchemaError(f"unsupported fit schema_version {version!r} (expected {SCHEMA_VERSION})")
        C = int(d["C"])
        tau = np.array(d["tau"], dtype=float).reshape(-1, C)
        return cls(
            C=C, components=tuple(ClusterParams.from_dict(c) for c in d["components"]),
            tau=tau, z=np.array(d["z"], dtype=int), loglik=float(d["loglik"]),
            objective=float(d["objective"]), bic=float(d["bic"]), n_params=int(d["n_params"]),
            trace=[float(t) for t in d["trace"]], seed=int(d["seed"]), start=int(d["start"]),
            converged=bool(d["converged"]), variant=d.get("variant", "full"),
            design_names=tuple(d.get("design_names", ())), formula=tuple(d.get("formula", ())),
            intercept=bool(d.get("intercept", True)), schema=d.get("schema", {}),
            config=d.get("config", {}), n_obs=int(d.get("n_obs", tau.shape[0])),
            guard_triggers=int(d.get("guard_triggers", 0)), attempts=int(d.get("attempts", 1)), metrics=d.get("metrics", {}),
        )

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_json(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dump_json(obj):
    """Pretty JSON with sorted keys (stable bytes for identical content)."""
    return json.dumps(obj, indent=2, sort_keys=True, default=_default, allow_nan=True) + "\n"
