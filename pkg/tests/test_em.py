import json

import numpy as np
import pytest
from scipy import optimize
from scipy.special import logsumexp

from mlcwmd.dgp import GroundTruth, generate
from mlcwmd.dists import IsingModel
from mlcwmd.em import (RestartRequired, classification_loglik, count_parameters, e_step, fit_select, fit_single,
                       fit_variant_noD, hard_assign, log_joint, m_step, n_params_for, prepare, responsibilities,
                       update_categorical, update_gaussian, update_weights)
from mlcwmd.glmm import LogisticMixedFit, fit_logistic_mixed
from mlcwmd.inference import adjusted_rand_index
from mlcwmd.model import ClusterParams, FitConfig, ModelFit, SchemaError

from conftest import make_dataset


def t1_config(**kw):
    base = dict(formula=("x1", "x2", "a1", "a2", "d1", "d2", "d3"), intercept=False)
    base.update(kw)
    return FitConfig(**base)


def scalar_params(w, mus, sds, betas):
    """Components with one continuous covariate, an intercept-only regression and nothing else."""
    out = []
    for wc, mu, sd, b in zip(w, mus, sds, betas):
        reg = LogisticMixedFit(beta=np.array([b]), se=np.zeros(1), pvalues=np.ones(1), sigma_b=0.0,
                               b=np.zeros(1), b_sd=np.zeros(1), loglik=0.0, converged=True)
        out.append(ClusterParams(w=wc, regression=reg, mu=np.array([mu]), Sigma=np.array([[sd ** 2]]),
                                 lambdas=(), ising=IsingModel.independent(0)))
    return out


# --- parameter counting --------------------------------------------------------

def test_parameter_count_table1_geometry():
    assert count_parameters(3, 8, 2, (2, 3), 3)["total"] == 71
    assert count_parameters(3, 8, 2, (2, 3), 3, variant="noD")["total"] == 62
    parts = count_parameters(3, 8, 2, (2, 3), 3)
    assert (parts["regression"], parts["continuous"], parts["categorical"], parts["dichotomous"],
            parts["weights"]) == (27, 15, 9, 18, 2)


def test_parameter_count_from_problem(table1_sample):
    ds = table1_sample.dataset
    cfg = t1_config()
    assert n_params_for(prepare(ds, cfg.formula, False), 3) == 71
    assert n_params_for(prepare(ds, cfg.formula, False, "noD"), 3) == 62


# --- E-step -------------------------------------------------------------------------

def test_scalar_e_step_by_hand():
    ds = make_dataset(y=[1, 0], groups=[0, 0], U=[[0.5], [2.0]])
    prob = prepare(ds, formula=(), intercept=True)
    params = scalar_params([0.3, 0.7], [0.0, 2.0], [1.0, 0.5], [0.2, -1.0])

    def dens(u, y, w, mu, sd, b):
        phi = np.exp(-0.5 * ((u - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
        p = 1 / (1 + np.exp(-b))
        return w * phi * (p if y == 1 else 1 - p)

    for i, (u, y) in enumerate([(0.5, 1), (2.0, 0)]):
        a = dens(u, y, 0.3, 0.0, 1.0, 0.2)
        b = dens(u, y, 0.7, 2.0, 0.5, -1.0)
        np.testing.assert_allclose(e_step(prob, params)[i], [a / (a + b), b / (a + b)], rtol=1e-12)


def test_responsibilities_stable_and_normalized():
    logd = np.array([[-1000.0, -1001.0], [5.0, 5.0], [-np.inf, 0.0]])
    tau = responsibilities(logd)
    np.testing.assert_allclose(tau.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tau[0], [1 / (1 + np.exp(-1)), 1 / (1 + np.e)])
    assert tau[2].tolist() == [0.0, 1.0]
    with pytest.raises(FloatingPointError, match="row 2"):
        responsibilities(np.array([[0.0, 0.0], [-np.inf, -np.inf]]))


def test_hard_assign_ties_go_low():
    assert hard_assign(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


# --- closed-form updates vs a generic optimizer ---------------------------------

def test_gaussian_update_maximizes_likelihood():
    rng = np.random.default_rng(0)
    U = rng.normal(size=(30, 2)) @ np.array([[1.0, 0.3], [0.0, 0.8]]) + [1.0, -2.0]
    mu, S = update_gaussian(U)
    np.testing.assert_allclose(mu, U.mean(axis=0))
    np.testing.assert_allclose(S, np.cov(U.T, bias=True), atol=1e-12)


def test_categorical_update_is_frequency_and_floored():
    v = np.array([1, 1, 2, 1, 2, 1])
    np.testing.assert_allclose(update_categorical(v, 3, floor=1e-6), [4 / 6 * (1 - 1e-6), 2 / 6 * (1 - 1e-6), 1e-6])
    lam = update_categorical(np.array([1, 2, 2]), 2)
    np.testing.assert_allclose(lam, [1 / 3, 2 / 3])


def test_weight_update():
    np.testing.assert_allclose(update_weights(np.array([0, 1, 1, 2, 2, 2]), 4), [1 / 6, 2 / 6, 3 / 6, 0])


def test_m_step_undersized_cluster_restarts(table1_sample):
    prob = prepare(table1_sample.dataset, t1_config().formula, False)
    z = np.zeros(prob.n, dtype=int)
    z[:3] = 1
    with pytest.raises(RestartRequired, match="below minimum"):
        m_step(prob, z, 2, t1_config())


# --- objective ------------------------------------------------------------------------

def test_classification_objective_properties(table1_sample):
    ds = table1_sample.dataset
    cfg = t1_config()
    prob = prepare(ds, cfg.formula, False)
    z = table1_sample.labels
    params, _ = m_step(prob, z, 3, cfg)
    whole = classification_loglik(prob, params, z)
    # additivity over rows
    logd = log_joint(prob, params)
    picked = logd[np.arange(prob.n), z]
    assert picked[:700].sum() + picked[700:].sum() == pytest.approx(whole, abs=1e-8)
    # moving any lambda entry off its frequency estimate lowers the objective
    lam = params[1].lambdas[1]
    for delta in (0.02, -0.02):
        bumped = lam + delta * np.array([1.0, -1.0, 0.0])
        p2 = list(params)
        p2[1] = ClusterParams(w=params[1].w, regression=params[1].regression, mu=params[1].mu,
                              Sigma=params[1].Sigma, lambdas=(params[1].lambdas[0], bumped), ising=params[1].ising)
        assert classification_loglik(prob, p2, z) < whole


def test_relabeling_leaves_observed_loglik_unchanged(table1_sample):
    cfg = t1_config()
    prob = prepare(table1_sample.dataset, cfg.formula, False)
    params, _ = m_step(prob, table1_sample.labels, 3, cfg)
    a = logsumexp(log_joint(prob, params), axis=1).sum()
    b = logsumexp(log_joint(prob, [params[i] for i in (2, 0, 1)]), axis=1).sum()
    assert a == pytest.approx(b, abs=1e-9)


# --- fitting ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def table1_fits(table1_sample):
    cfg = t1_config(n_starts=5, c_grid=(3,), seed=2)
    return [fit_single(table1_sample.dataset, 3, cfg, start=s) for s in range(5)]


def test_best_of_five_random_starts_recovers_partition(table1_fits, table1_sample):
    best = max(table1_fits, key=lambda f: f.loglik)
    assert adjusted_rand_index(table1_sample.labels, best.z) >= 0.85


def test_traces_non_decreasing(table1_fits):
    for fit in table1_fits:
        assert np.all(np.diff(fit.trace) >= -1e-6), fit.trace


def test_fit_invariants(table1_fits):
    for fit in table1_fits:
        np.testing.assert_allclose(fit.tau.sum(axis=1), 1.0, atol=1e-10)
        w = fit.weights
        assert np.all(np.diff(w) <= 0)  # canonical order: descending weight
        assert w.sum() == pytest.approx(1.0)
        for cp in fit.components:
            assert cp.check(lambda_floor=1e-6) == []
        assert fit.n_params == 71
        assert fit.bic == pytest.approx(-2 * fit.loglik + 71 * np.log(2000))
        assert fit.loglik >= fit.objective - 1e-6  # mixture density dominates its largest term


def test_fit_is_deterministic(table1_sample):
    cfg = t1_config(seed=9)
    a = fit_single(table1_sample.dataset, 3, cfg, start=1)
    b = fit_single(table1_sample.dataset, 3, cfg, start=1)
    assert a.loglik == b.loglik and a.trace == b.trace and np.array_equal(a.z, b.z)


def test_single_cluster_matches_direct_glmm():
    rng = np.random.default_rng(3)
    n, J = 400, 8
    g = np.repeat(np.arange(J), n // J)
    u = rng.normal(size=n)
    y = (rng.random(n) < 1 / (1 + np.exp(-(0.3 + 0.8 * u + rng.normal(0, 0.7, J)[g])))).astype(float)
    ds = make_dataset(y=y, groups=g, U=u[:, None])
    fit = fit_single(ds, 1, FitConfig(c_grid=(1,)))
    direct = fit_logistic_mixed(prepare(ds).F, g, y, n_groups=J)
    np.testing.assert_allclose(fit.components[0].beta, direct.beta, atol=1e-8)
    # the objective is the sum of the block log densities over all rows
    cp = fit.components[0]
    from mlcwmd.em import block_logdens
    blocks = block_logdens(cp, prepare(ds))
    assert fit.objective == pytest.approx(sum(v.sum() for v in blocks.values()), abs=1e-8)
    assert fit.loglik == pytest.approx(fit.objective, abs=1e-8)


def test_kmeans_init_runs(table1_sample):
    fit = fit_single(table1_sample.dataset, 3, t1_config(init="kmeans"))
    assert adjusted_rand_index(table1_sample.labels, fit.z) > 0.85


def test_select_reports_table_and_failures(table1_sample):
    cfg = t1_config(c_grid=(2, 3, 400), n_starts=1, max_restarts=2, init="kmeans")
    sel = fit_select(table1_sample.dataset, cfg)
    table = {r["C"]: r for r in sel.table}
    assert table[400]["status"] == "failed" and table[400]["n_failed"] == 1
    assert sel.selected_C == 3 and table[3]["bic"] < table[2]["bic"]
    assert len(sel.runs) == 3


def test_null_data_prefers_one_cluster():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n, J = 300, 6
        g = np.repeat(np.arange(J), n // J)
        u = rng.normal(size=(n, 2))
        y = (rng.random(n) < 1 / (1 + np.exp(-(0.2 + 0.5 * u[:, 0])))).astype(float)
        ds = make_dataset(y=y, groups=g, U=u)
        sel = fit_select(ds, FitConfig(c_grid=(1, 2, 3), n_starts=2, seed=seed))
        bics = [r["bic"] for r in sel.table]
        wins += bool(bics[0] < bics[1] < bics[2] or (np.isnan(bics[2]) and bics[0] < bics[1]))
    assert wins >= 6


def test_no_interaction_truth_variants_agree(table1):
    d = table1.to_dict()
    d["ising"] = [IsingModel(m.nu, np.zeros((3, 3))).to_dict() for m in table1.ising]
    sim = generate(GroundTruth.from_dict(d), np.random.default_rng(4))
    cfg = t1_config(init="kmeans")
    full = fit_single(sim.dataset, 3, cfg)
    nod = fit_variant_noD(sim.dataset, 3, cfg)
    assert nod.n_params == 62 and nod.variant == "noD"
    assert abs(full.loglik - nod.loglik) <= 2 * (71 - 62)


def test_model_fit_json_round_trip(tmp_path, table1_fits):
    fit = table1_fits[0]
    path = fit.save(tmp_path / "fit.json")
    back = ModelFit.load(path)
    assert back.loglik == fit.loglik and back.C == 3
    np.testing.assert_array_equal(back.z, fit.z)
    np.testing.assert_array_equal(back.components[1].Sigma, fit.components[1].Sigma)
    assert path.read_text() == back.save(tmp_path / "again.json").read_text()
    doc = json.loads(path.read_text())
    doc["schema_version"] = "2.0"
    with pytest.raises(SchemaError):
        ModelFit.from_dict(doc)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(tol=0)
    with pytest.raises(ValueError):
        FitConfig(init="spectral")
    with pytest.raises(ValueError, match="unknown"):
        FitConfig.from_dict({"bogus": 1})
    cfg = FitConfig(c_grid=[2, 3], formula=["a"])
    assert FitConfig.from_dict(cfg.to_dict()) == cfg


def test_generic_optimizer_agrees_with_weight_update():
    z = np.array([0, 0, 1, 2, 2, 2, 2])
    counts = np.bincount(z, minlength=3)

    def neg(t):
        return -(counts @ (t - logsumexp(t)))

    t = optimize.minimize(neg, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
    np.testing.assert_allclose(np.exp(t - logsumexp(t)), update_weights(z, 3), atol=1e-6)
