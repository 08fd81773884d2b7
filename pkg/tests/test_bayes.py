import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cglubnf import bayes
from cglubnf import diffcore as dc
from cglubnf.config import RunConfig
from cglubnf.dataio import table_from_frame
from cglubnf.model import Batch, prepare, query_batch
from cglubnf.synthetic import synthetic_table


def small_config(**optim):
    o = {"epochs": 3, "batch_size": 64, "lr": 5e-3}
    o.update(optim)
    return RunConfig.from_dict({"seed": 10, "particles": 2, "model": {"cglu_layers": 1, "hidden_dim": 8},
                                "optim": o})


@pytest.fixture(scope="module")
def prep():
    table, _ = synthetic_table(steps=48, side=2, seed=3)
    return prepare(table, small_config())


# --- densities --------------------------------------------------------------

def test_nll_examples():
    assert bayes.nll(0.0, 0.0, 1.0) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert bayes.nll(0.0, 0.0, 1.0) == pytest.approx(0.918939, abs=1e-6)
    assert bayes.nll(1.0, 0.0, 1.0) == pytest.approx(1.418939, abs=1e-6)
    assert bayes.nll(3.0, 3.0, 2.0) - bayes.nll(3.0, 3.0, 1.0) == pytest.approx(math.log(2), abs=1e-12)


def test_nll_domain():
    with pytest.raises(ValueError):
        bayes.nll(0.0, 0.0, 0.0)


def test_total_nll_skips_absent():
    y = np.array([1.0, np.nan, 2.0])
    assert bayes.total_nll(y, 0.0, 1.0) == pytest.approx(bayes.nll(1.0, 0, 1) + bayes.nll(2.0, 0, 1))


def test_nll_matches_scipy():
    rng = np.random.default_rng(0)
    y, mu, s = rng.normal(size=20), rng.normal(size=20), rng.uniform(0.1, 3, size=20)
    np.testing.assert_allclose(bayes.nll(y, mu, s), -stats.norm.logpdf(y, mu, s), rtol=1e-12)


def test_log_prior_examples():
    assert bayes.logistic_logpdf(0.0) == pytest.approx(math.log(0.25), abs=1e-12)
    assert float(bayes.logistic_logpdf(0.0)) == pytest.approx(-1.386294, abs=1e-6)
    v = bayes.logistic_logpdf(50.0)
    assert np.isfinite(v) and v == pytest.approx(-50.0, abs=1e-12)
    assert np.isfinite(bayes.logistic_logpdf(-800.0))


@given(st.floats(-700, 700))
def test_log_prior_symmetric_and_matches_scipy(x):
    assert bayes.logistic_logpdf(x) == bayes.logistic_logpdf(-x)
    assert bayes.logistic_logpdf(x) == pytest.approx(stats.logistic.logpdf(x), rel=1e-12, abs=1e-12)


def test_tape_prior_matches_value():
    ps = dc.ParamSet({"a": np.array([[0.5, -3.0]]), "b": np.array([[20.0]])})
    assert bayes.log_prior(ps.leaves()).item() == pytest.approx(bayes.log_prior_value(ps), rel=1e-14)


# --- objective --------------------------------------------------------------

def test_full_batch_objective_is_nll_minus_prior(prep):
    net, batch = prep.network, prep.batch
    params = net.init_params(4)
    params["log_sigma"][:] = 0.3
    leaves = params.leaves()
    loss = bayes.map_objective(net, leaves, batch, len(batch)).item()
    mu, _ = net.forward(leaves, batch)
    nll = bayes.total_nll(batch.labels, mu.data[:, 0], math.exp(0.3))
    assert loss == pytest.approx(nll - bayes.log_prior_value(params), rel=1e-12)


def test_minibatch_rescaling(prep):
    net, batch = prep.network, prep.batch
    params = net.init_params(4)
    sub = batch.take(np.arange(10))
    leaves = params.leaves()
    loss = bayes.map_objective(net, leaves, sub, 1000).item()
    mu, _ = net.forward(leaves, sub)
    nll = bayes.total_nll(sub.labels, mu.data[:, 0], 1.0)
    assert loss == pytest.approx(100 * nll - bayes.log_prior_value(params), rel=1e-12)


def test_prior_only_for_empty_batch(prep):
    params = prep.network.init_params(0)
    empty = prep.batch.take(np.array([], dtype=int))
    loss = bayes.map_objective(prep.network, params.leaves(), empty, 5).item()
    assert loss == pytest.approx(-bayes.log_prior_value(params), rel=1e-14)


def _decomposed_gradient_error(net, params, batch, eta, eps=1e-4):
    """Reverse-mode gradient of the full objective vs. an oracle built from
    finite differences of the data term plus the closed-form prior gradient.

    The data term has a small magnitude, so its central differences are not
    swamped by round-off the way differences of the summed prior are.
    """
    leaves = params.leaves()
    dc.backward(bayes.map_objective(net, leaves, batch, eta))
    scale = eta / len(batch)

    def data(q):
        mu, _ = net.forward(q, batch)
        return dc.mul(scale, bayes.nll_tensor(batch.labels, mu, q["log_sigma"]))

    base = {k: v.copy() for k, v in params.params.items()}
    worst = 0.0
    for name, arr in base.items():
        a = leaves[name].grad
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = data({k: dc.Tensor(v) for k, v in base.items()}).item()
            arr[idx] = orig - eps
            lo = data({k: dc.Tensor(v) for k, v in base.items()}).item()
            arr[idx] = orig
            # d/dx of -log pdf_logistic(x) is tanh(x / 2)
            oracle = (hi - lo) / (2 * eps) + math.tanh(orig / 2)
            worst = max(worst, abs(a[idx] - oracle) / max(abs(a[idx]), abs(oracle), 1e-8))
    return worst


def test_objective_gradients(prep):
    net = prep.network
    batch = prep.batch.take(np.arange(0, 40, 5))
    params = net.init_params(8)
    params["log_sigma"][:] = -0.2
    assert _decomposed_gradient_error(net, params, batch, 100) < 1e-5


# --- training ---------------------------------------------------------------

def test_zero_epochs_returns_initialization(prep):
    cfg = small_config(epochs=0)
    p = bayes.train_particle(prep.network, prep.batch, cfg.optim, 5)
    init = prep.network.init_params(5)
    assert p.params.flat().tobytes() == init.flat().tobytes()
    assert p.curve == []


def test_different_seeds_differ(prep):
    cfg = small_config(epochs=1)
    a = bayes.train_particle(prep.network, prep.batch, cfg.optim, 1)
    b = bayes.train_particle(prep.network, prep.batch, cfg.optim, 2)
    assert np.linalg.norm(a.params.flat() - b.params.flat()) > 0


def test_empty_training_set(prep):
    with pytest.raises(ValueError):
        bayes.train_particle(prep.network, prep.batch.take(np.array([], dtype=int)), small_config().optim, 0)


def test_linear_smoke_loss_decreases():
    steps = 96
    t = np.arange(steps)
    rows = []
    for sid, (lat, lon) in {"A": (0.0, 0.0), "B": (1.0, 1.0)}.items():
        for k in t:
            rows.append([str(np.datetime64("2024-01-01T00:00:00") + np.timedelta64(int(k), "h")), sid, lat, lon,
                         2.0 * k + 1.0])
    table, _ = table_from_frame(pd.DataFrame(rows, columns=["timestamp", "station_id", "lat", "lon", "target"]))
    cfg = RunConfig.from_dict({"seed": 0, "particles": 1, "model": {"cglu_layers": 1, "hidden_dim": 16},
                               "optim": {"epochs": 150, "batch_size": 1024, "lr": 5e-3}})
    prep = prepare(table, cfg)
    p = bayes.train_particle(prep.network, prep.batch, cfg.optim, 0)
    losses = [c[1] for c in p.curve]
    tail = losses[50:]
    assert all(b < a for a, b in zip(tail, tail[1:]))
    assert losses[-1] < losses[0]


def test_divergence_reports_epoch_and_curve(prep):
    cfg = small_config(epochs=4, lr=1e12, max_grad_norm=1e30)
    with pytest.raises(bayes.DivergenceError) as info:
        bayes.train_particle(prep.network, prep.batch, cfg.optim, 3)
    assert info.value.epoch is not None
    assert info.value.seeds == (3,)
    assert 3 in info.value.curves


def test_ensemble_divergence_lists_seeds(prep):
    cfg = small_config(epochs=3, lr=1e12, max_grad_norm=1e30)
    with pytest.raises(bayes.DivergenceError) as info:
        bayes.train_ensemble(prep.network, prep.batch, cfg)
    assert set(info.value.seeds) == {10, 11}


def test_ensemble_seeds_and_determinism(prep):
    cfg = small_config(epochs=2)
    a = bayes.train_ensemble(prep.network, prep.batch, cfg)
    b = bayes.train_ensemble(prep.network, prep.batch, cfg)
    assert [p.seed for p in a] == [10, 11]
    for x, y in zip(a, b):
        assert x.params.flat().tobytes() == y.params.flat().tobytes()


def test_parallel_equals_serial(prep):
    cfg = small_config(epochs=2)
    serial = bayes.train_ensemble(prep.network, prep.batch, cfg, jobs=1)
    parallel = bayes.train_ensemble(prep.network, prep.batch, cfg, jobs=2)
    for x, y in zip(serial, parallel):
        assert x.params.flat().tobytes() == y.params.flat().tobytes()
        assert x.curve == y.curve


# --- mixture ----------------------------------------------------------------

def test_mixture_mean_and_variance_examples():
    m = bayes.PredictiveMixture(np.array([[0.0, 2.0]]), np.array([[1.0, 1.0]]))
    assert m.mean()[0] == 1.0
    assert bayes.predictive_variance(m)[0] == 2.0
    single = bayes.PredictiveMixture(np.array([[3.0]]), np.array([[0.7]]))
    assert bayes.predictive_variance(single)[0] == pytest.approx(0.49, abs=1e-15)


def test_mixture_rejects_bad_sigma():
    with pytest.raises(ValueError):
        bayes.PredictiveMixture(np.array([[0.0]]), np.array([[0.0]]))


def test_quantile_examples():
    m = bayes.PredictiveMixture(np.array([[0.0]]), np.array([[1.0]]))
    assert bayes.mixture_quantile(m, 0.975)[0] == pytest.approx(1.959964, abs=1e-6)
    sym = bayes.PredictiveMixture(np.array([[-1.0, 5.0]]), np.array([[0.5, 0.5]]))
    assert bayes.mixture_quantile(sym, 0.5)[0] == pytest.approx(2.0, abs=1e-6)


def test_quantile_bad_level():
    m = bayes.PredictiveMixture(np.array([[0.0]]), np.array([[1.0]]))
    with pytest.raises(ValueError):
        bayes.mixture_quantile(m, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_mixture_properties(M, seed):
    rng = np.random.default_rng(seed)
    mu = rng.normal(scale=5, size=(3, M))
    sd = rng.uniform(0.05, 3, size=(3, M))
    m = bayes.PredictiveMixture(mu, sd)
    var = bayes.predictive_variance(m)
    assert np.all(var >= (sd ** 2).mean(axis=1) - 1e-12)
    # second-moment identity, written out independently
    want = (sd ** 2 + mu ** 2).mean(axis=1) - mu.mean(axis=1) ** 2
    np.testing.assert_allclose(var, want, rtol=1e-9, atol=1e-9)
    qs = [0.01, 0.1, 0.5, 0.9, 0.99]
    vals = np.array([bayes.mixture_quantile(m, q) for q in qs])
    assert np.all(np.diff(vals, axis=0) > 0)
    med = vals[2]
    assert np.all(med >= mu.min(axis=1) - 1e-9) and np.all(med <= mu.max(axis=1) + 1e-9)
    for q, v in zip(qs, vals):
        cdf = stats.norm.cdf((v[:, None] - mu) / sd).mean(axis=1)
        np.testing.assert_allclose(cdf, q, atol=1e-9)


def test_interval_widens_with_level():
    rng = np.random.default_rng(0)
    m = bayes.PredictiveMixture(rng.normal(size=(10, 3)), rng.uniform(0.1, 1, size=(10, 3)))
    lo95, hi95 = m.interval(0.95)
    lo99, hi99 = m.interval(0.99)
    assert np.all(lo99 <= lo95) and np.all(hi99 >= hi95)
    assert np.all(hi95 > lo95)


# --- prediction and bundles -------------------------------------------------

@pytest.fixture(scope="module")
def ensemble():
    table, _ = synthetic_table(steps=48, side=2, seed=3)
    return bayes.fit_ensemble(table, small_config(epochs=2))


def test_singleton_prediction_equals_particle(prep):
    table, _ = synthetic_table(steps=48, side=2, seed=3)
    cfg = RunConfig.from_dict({**small_config(epochs=2).to_dict(), "particles": 1})
    ens = bayes.fit_ensemble(table, cfg)
    batch = prep.batch.take(np.arange(12))
    mix = bayes.predict(ens, batch)
    mu = bayes.particle_means(ens.network, ens.particles[0], batch)
    np.testing.assert_allclose(mix.mean(), ens.stats.denormalize_target(mu), rtol=1e-15)
    np.testing.assert_allclose(mix.stds[:, 0], ens.particles[0].sigma * ens.stats.target_std)


def test_point_mean_is_component_average(ensemble):
    table, _ = synthetic_table(steps=48, side=2, seed=3)
    batch = ensemble.network.encode(__import__("cglubnf.dataio", fromlist=["x"]).assemble_samples(table, ensemble.stats))
    mix = bayes.predict(ensemble, batch)
    assert mix.components == 2
    np.testing.assert_allclose(mix.mean(), mix.means.mean(axis=1), rtol=1e-15)


def test_bundle_roundtrip(ensemble, tmp_path):
    path = tmp_path / "ens.json"
    digest = bayes.save_ensemble(ensemble, path)
    again = bayes.load_ensemble(path)
    assert bayes.save_ensemble(again, tmp_path / "again.json") == digest
    times = np.array(["2024-01-02T05:00:00", "2024-01-03T00:00:00"], dtype="datetime64[s]")
    b1 = query_batch(ensemble.network, ensemble.stats, times, [0, 3], np.zeros((2, 0)))
    b2 = query_batch(again.network, again.stats, times, [0, 3], np.zeros((2, 0)))
    m1, m2 = bayes.predict(ensemble, b1), bayes.predict(again, b2)
    np.testing.assert_allclose(m1.means, m2.means, rtol=0, atol=1e-12)
    np.testing.assert_allclose(m1.stds, m2.stds, rtol=0, atol=1e-12)


def test_bundle_version_checked(ensemble):
    d = bayes.ensemble_to_dict(ensemble)
    d["version"] = 99
    with pytest.raises(ValueError):
        bayes.ensemble_from_dict(d)


def test_query_before_origin(ensemble):
    from cglubnf.dataio import NegativeIndexError

    with pytest.raises(NegativeIndexError):
        query_batch(ensemble.network, ensemble.stats, np.array(["2023-12-31T23:00:00"], dtype="datetime64[s]"),
                    [0], np.zeros((1, 0)))


def test_train_pooling_freezes_gate_inputs():
    table, _ = synthetic_table(steps=48, side=2, seed=3)
    d = small_config(epochs=1).to_dict()
    d["encoder"] = {"pooling": "train"}
    ens = bayes.fit_ensemble(table, RunConfig.from_dict(d))
    assert all(p.pooled is not None for p in ens.particles)
    batch = ens.network.encode(__import__("cglubnf.dataio", fromlist=["x"]).assemble_samples(table, ens.stats))
    full = bayes.predict(ens, batch).means
    part = bayes.predict(ens, batch.take(np.arange(5))).means
    # frozen pooling makes a row's prediction independent of its batch-mates
    np.testing.assert_allclose(part, full[:5], rtol=1e-13, atol=1e-13)
