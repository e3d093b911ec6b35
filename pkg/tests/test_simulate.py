import json
import math

import numpy as np
import pytest

from effreg.simulate import (
    PerturbedSkewT, ScenarioError, SimScenario, SkewT, bundled_scenario, law_moments,
    load_scenario, replication_rng, run_study, sample_gumbel, sample_mixture,
    sample_perturbed_skew_t, sample_skew_t, worker_count,
)
from scipy import special

from conftest import MIX_MU


def test_replication_streams_are_independent_of_order():
    a = replication_rng(1, 5).random(3)
    replication_rng(1, 4).random(3)
    np.testing.assert_array_equal(a, replication_rng(1, 5).random(3))
    assert not np.array_equal(a, replication_rng(1, 6).random(3))
    assert not np.array_equal(a, replication_rng(1, 5, stream=1).random(3))


def test_gumbel_sampler_moments():
    e = sample_gumbel(1.5, 10**6, replication_rng(0, 0))
    assert e.var() == pytest.approx(3.7011, abs=0.02)
    assert e.mean() == pytest.approx(0.0, abs=0.01)


def test_mixture_sampler():
    e, lab = sample_mixture(MIX_MU, 10**6, replication_rng(0, 1), return_labels=True)
    assert e.var() == pytest.approx(6.4120, abs=0.03)
    assert np.mean(lab) == pytest.approx(0.6, abs=0.003)


def test_skew_t_sampler_matches_its_analytic_moments():
    xi, omega, alpha, nu = -2.46, 3.0, 2.5, 10.0
    delta = alpha / math.sqrt(1 + alpha**2)
    b = math.sqrt(nu / math.pi) * special.gamma((nu - 1) / 2) / special.gamma(nu / 2)
    mean = xi + omega * b * delta
    var = omega**2 * (nu / (nu - 2) - (b * delta) ** 2)
    e = sample_skew_t(xi, omega, alpha, nu, 10**6, replication_rng(0, 2))
    assert mean == pytest.approx(-0.051479568396723074, abs=1e-12)
    assert e.mean() == pytest.approx(mean, abs=0.02)
    assert e.var() == pytest.approx(var, rel=0.01)
    mom = law_moments({"law": "skewt", "xi": xi, "omega": omega, "alpha": alpha, "nu": nu})
    assert mom["mean"] == pytest.approx(mean, rel=1e-10)
    assert mom["variance"] == pytest.approx(var, rel=1e-10)
    assert SkewT(xi, omega, alpha, nu).delta == pytest.approx(delta)


def test_perturbed_skew_t_sampler():
    dist = PerturbedSkewT(0.7, SkewT(-2.46, 3.0, 2.5, 10.0), 2.5, 3.0, 7.5)
    e = sample_perturbed_skew_t(dist, 10**6, replication_rng(0, 3))
    mom = law_moments({"law": "perturbed_skewt"})
    assert e.mean() == pytest.approx(mom["mean"], abs=0.03)
    assert e.var() == pytest.approx(mom["variance"], rel=0.01)


def test_scenario_roundtrip_and_validation(tmp_path):
    sc = bundled_scenario("gumbel_n200")
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sc.to_dict()))
    assert load_scenario(p) == sc
    bad = sc.to_dict() | {"n": 0}
    with pytest.raises(ScenarioError) as ei:
        SimScenario.from_dict(bad)
    assert ei.value.field == "n"
    with pytest.raises(ScenarioError):
        SimScenario.from_dict(sc.to_dict() | {"bogus": 1})
    with pytest.raises(ScenarioError):
        SimScenario.from_dict(sc.to_dict() | {"modes": ["laplace"]})
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_draw_is_reproducible():
    sc = bundled_scenario("mixture_n200")
    a, b = sc.draw(3), sc.draw(3)
    np.testing.assert_array_equal(a.y, b.y)


def test_small_study_report():
    sc = bundled_scenario("gumbel_n200")
    from dataclasses import replace
    rep = run_study(replace(sc, reps=4), modes=("true", "normal"))
    assert len(rep.rows) == 6
    for r in rep.rows:
        assert 0 <= r["cvg95"] <= 1 and r["se1"] > 0 and r["se2"] > 0
    header = rep.to_csv().splitlines()[0].split(",")
    assert header == list(rep.COLUMNS)
    assert json.loads(rep.to_json())["rows"][0]["scenario"] == "gumbel_n200"


def test_single_replication_flags_insufficient():
    from dataclasses import replace
    rep = run_study(replace(bundled_scenario("gumbel_n200"), reps=1), modes=("normal",))
    assert rep.metadata["insufficient_replications"]
    assert math.isnan(rep.rows[0]["se1"])


def test_worker_count_cap(monkeypatch):
    monkeypatch.setenv("EFFREG_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.delenv("EFFREG_THREADS")
    assert worker_count(3) == 3
