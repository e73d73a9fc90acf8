"""Prediction, scenario analysis, classification metrics and baseline comparisons."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb, expit

from .em import fit_select, log_joint, prepare, responsibilities
from .glmm import fit_logistic_glm, fit_logistic_mixed, linear_predictor
from .model import FitConfig


@dataclass(frozen=True, eq=False)
class Prediction:
    """Mixture risk ``p`` with its per-component decomposition."""

    p: np.ndarray
    posteriors: np.ndarray
    conditional: np.ndarray
    b_mode: str

    def rows(self):
        for i in range(self.p.shape[0]):
            yield {"p": float(self.p[i]), "posteriors": self.posteriors[i].tolist(),
                   "conditional": self.conditional[i].tolist()}


def _offsets(fit, groups, b_mode):
    """Per-row, per-component intercept shift for a random-effect mode."""
    n = groups.shape[0]
    out = np.zeros((n, fit.C))
    for c, cp in enumerate(fit.components):
        if b_mode == "blup":
            known = (groups >= 0) & (groups < cp.b.shape[0])
            out[:, c] = np.where(known, cp.b[np.clip(groups, 0, cp.b.shape[0] - 1)], 0.0)
        elif b_mode == "zero":
            pass
        else:
            out[:, c] = float(b_mode) * cp.sigma_b
    return out


def predict(fit, ds, b_mode="zero"):
    """Mixture probability of a positive response for every row of ``ds``.

    Component weights are posterior probabilities given the covariates only
    (response excluded).  ``b_mode`` is ``"zero"``, ``"blup"`` (fitted group
    modes; unseen groups get 0) or a number k meaning k fitted standard
    deviations of each component's random intercept.
    """
    if isinstance(b_mode, str) and b_mode not in ("zero", "blup"):
        raise ValueError(f"b_mode must be 'zero', 'blup' or a number, got {b_mode!r}")
    prob = prepare(ds, fit.formula, fit.intercept, fit.variant)
    if prob.design_names != tuple(fit.design_names):
        raise ValueError(f"design columns {prob.design_names} differ from the fit's {tuple(fit.design_names)}")
    post = responsibilities(log_joint(prob, fit.components, with_response=False))
    off = _offsets(fit, prob.groups, b_mode)
    cond = np.column_stack([expit(prob.F @ cp.beta + off[:, c]) for c, cp in enumerate(fit.components)])
    p = np.einsum("ij,ij->i", post, cond)
    return Prediction(p=np.clip(p, 0.0, 1.0), posteriors=post, conditional=cond,
                      b_mode=str(b_mode))


@dataclass(frozen=True)
class ScenarioGrid:
    """Risk of one record at random-intercept offsets of -1, 0 and +1 fitted SDs."""

    row: int
    label: str
    offsets: tuple
    p: tuple
    conditional: tuple
    posteriors: tuple


def scenario(fit, ds, offsets=(-1.0, 0.0, 1.0), labels=None):
    """Predictions per record with each component's intercept shifted by k * sigma_b."""
    preds = [predict(fit, ds, k) for k in offsets]
    out = []
    for i in range(ds.n_obs):
        out.append(ScenarioGrid(
            row=i, label=str(labels[i]) if labels is not None else str(i + 1),
            offsets=tuple(float(k) for k in offsets),
            p=tuple(float(pr.p[i]) for pr in preds),
            conditional=tuple(tuple(pr.conditional[i].tolist()) for pr in preds),
            posteriors=tuple(preds[0].posteriors[i].tolist()),
        ))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RocResult:
    auc: float
    cutoff: float
    accuracy: float
    sensitivity: float
    specificity: float


def _check_binary(labels):
    labels = np.asarray(labels, dtype=float)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    if labels.min() == labels.max():
        raise ValueError("ROC analysis needs both classes")
    return labels


def roc_curve_points(scores, labels):
    """(fpr, tpr, thresholds) for the rule ``score >= threshold``, thresholds descending."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_binary(labels)
    thr = np.unique(scores)[::-1]
    pos, neg = labels.sum(), (1 - labels).sum()
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    # cumulative counts at the last index of each distinct score
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(l)[last]
    fp = np.cumsum(1 - l)[last]
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    return fpr, tpr, np.r_[np.inf, thr]


def roc_cutoff(scores, labels):
    """AUC (trapezoid), Youden-optimal cutoff (ties to the lower cutoff) and its accuracy.

    A row is classified positive when ``score >= cutoff``.
    """
    fpr, tpr, thr = roc_curve_points(scores, labels)
    auc = float(np.trapezoid(tpr, fpr))
    J = tpr - fpr
    best = np.flatnonzero(J >= J.max() - 1e-12)
    i = best[np.argmin(thr[best])]
    cutoff = float(thr[i])
    return RocResult(auc=auc, cutoff=cutoff, accuracy=accuracy_at(scores, labels, cutoff),
                     sensitivity=float(tpr[i]), specificity=float(1 - fpr[i]))


def accuracy_at(scores, labels, cutoff):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    return float(np.mean((scores >= cutoff) == (labels == 1)))


def adjusted_rand_index(a, b):
    """Chance-corrected Rand index of two labelings."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label vectors must have equal length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def random_effect_flags(regression, z=1.96):
    """+1 / -1 for groups whose interval b_j +- z * sd lies above / below zero, else 0."""
    lo = regression.b - z * regression.b_sd
    hi = regression.b + z * regression.b_sd
    return np.where(lo > 0, 1, np.where(hi < 0, -1, 0))


def match_components(est_means, true_means):
    """Permutation aligning estimated to true components by mean distance.

    Returns ``perm`` with ``perm[t]`` the estimated component matched to true component t.
    """
    est, true = np.atleast_2d(est_means), np.atleast_2d(true_means)
    cost = ((true[:, None, :] - est[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(true.shape[0], dtype=int)
    perm[rows] = cols
    return perm


def matched_betas(fit, true_means):
    perm = match_components(np.array([cp.mu for cp in fit.components]), true_means)
    return np.array([fit.components[j].beta for j in perm])


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _design(ds, config):
    prob = prepare(ds, config.formula, config.intercept)
    return prob.F, prob.groups


def fit_glm(ds, config):
    F, _ = _design(ds, config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_logistic_glm(F, ds.y)


def fit_glmer(ds, config):
    F, g = _design(ds, config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_logistic_mixed(F, g, ds.y, n_groups=ds.n_groups)


def glmm_scores(fit, ds, config, b_mode="zero"):
    F, g = _design(ds, config)
    if b_mode == "blup":
        return expit(linear_predictor(fit, F, g))
    if b_mode == "zero":
        return expit(F @ fit.beta)
    return expit(F @ fit.beta + float(b_mode) * fit.sigma_b)


def glm_scores(fit, ds, config):
    F, _ = _design(ds, config)
    return expit(F @ fit.beta)


def compare_baselines(train, test, config=None, truth_train=None, truth_test=None, jobs=1):
    """Fit the mixture (with and without the Ising block), GLMER and GLM and score them.

    Training accuracy uses fitted group modes.  Test rows are scored with
    b = 0, at the Youden cutoff of the training rows scored the same way, so
    the cutoff and the scores it is applied to come from one prediction rule.  Returns ``(rows, fits)``: long-format metric rows and the
    fitted objects keyed by method name.
    """
    config = config or FitConfig()
    rows, fits = [], {}

    def add(method, split, metric, value):
        rows.append({"method": method, "split": split, "metric": metric, "value": value})

    def score(method, s_train, s_train_zero, s_test):
        try:
            roc = roc_cutoff(s_train, train.y)
            roc_zero = roc_cutoff(s_train_zero, train.y)
        except ValueError as exc:
            add(method, "train", "error", str(exc))
            return
        add(method, "train", "accuracy", roc.accuracy)
        add(method, "train", "auc", roc.auc)
        add(method, "train", "cutoff", roc.cutoff)
        if s_test is not None and test.y is not None:
            add(method, "test", "cutoff", roc_zero.cutoff)
            add(method, "test", "accuracy", accuracy_at(s_test, test.y, roc_zero.cutoff))

    for method, variant in (("ML-CWMd", "full"), ("ML-CWMd-noD", "noD")):
        sel = fit_select(train, config, variant=variant, jobs=jobs)
        fits[method] = sel
        if sel.best is None:
            add(method, "train", "error", "all cluster counts failed")
            continue
        best = sel.best
        add(method, "train", "C", best.C)
        add(method, "train", "bic", best.bic)
        if truth_train is not None:
            add(method, "train", "ari", adjusted_rand_index(truth_train, best.z))
        s_test = None
        if test is not None:
            pred_test = predict(best, test, "zero")
            s_test = pred_test.p
            if truth_test is not None:
                add(method, "test", "ari", adjusted_rand_index(truth_test, pred_test.posteriors.argmax(axis=1)))
        score(method, predict(best, train, "blup").p, predict(best, train, "zero").p, s_test)

    glmer = fit_glmer(train, config)
    fits["GLMER"] = glmer
    score("GLMER", glmm_scores(glmer, train, config, "blup"), glmm_scores(glmer, train, config, "zero"),
          None if test is None else glmm_scores(glmer, test, config, "zero"))
    glm = fit_glm(train, config)
    fits["GLM"] = glm
    s_glm = glm_scores(glm, train, config)
    score("GLM", s_glm, s_glm, None if test is None else glm_scores(glm, test, config))
    return rows, fits
