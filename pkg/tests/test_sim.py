import math

import numpy as np
import pytest

from galqr import sim
from galqr.errors import InvalidParams, InvalidState
from galqr.mcmc import SamplerConfig
from galqr.sim import (
    TABLE_COLUMNS,
    ScenarioResult,
    ScenarioSpec,
    cgal_rows,
    contamination_rows,
    generate_dataset,
    noise_sample,
    parse_table,
    performance_table,
    replicate_dataset,
    run_scenario,
    summarize_tables,
)


def test_truth_values():
    s = ScenarioSpec()
    assert s.beta == (11.5, 5.5, 3.5, 0.05)
    assert (s.sigma, s.tau0, s.gamma) == (0.2, 10.0, -0.3)
    assert (s.n_subjects, s.n_times) == (15, 9)
    sigma_b = np.array(s.Sigma)
    np.testing.assert_allclose(sigma_b, [[0.95**2, 0.05 * 0.95**2], [0.05 * 0.95**2, 0.95**2]])
    truth = s.truth("cGAL")
    assert list(truth) == ["beta1", "beta2", "sigma", "gamma", "alpha", "omega11", "omega12", "omega22"]
    omega = np.linalg.inv(sigma_b)
    assert truth["omega12"] == pytest.approx(omega[0, 1])
    assert "alpha" not in s.truth("GAL") and "gamma" not in s.truth("AL")


def test_model_spec_for_simulation():
    spec = ScenarioSpec(p0=0.85).model_spec("cGAL")
    assert spec.p0 == 0.85
    assert spec.beta_names() == ["beta1", "beta2"]
    assert spec.link.pinned == {2: 3.5, 3: 0.05, 4: 0.0}
    assert (spec.priors.a_alpha, spec.priors.b_alpha) == (1.0, 1.0)


@pytest.mark.parametrize("kw", [dict(replicates=0), dict(sigma=math.nan), dict(families=("normal",)),
                                dict(alpha_true=1.0)])
def test_invalid_scenarios(kw):
    with pytest.raises(InvalidParams):
        ScenarioSpec(**kw)


def test_dataset_shape_and_grid():
    data = generate_dataset(ScenarioSpec(), np.random.default_rng(0))
    assert data.n_subjects == 15 and data.n_obs == 135
    np.testing.assert_array_equal(data.t[:9], np.arange(9.0))
    assert np.all(np.bincount(data.subj) == 9)


def test_noiseless_curve_matches_link():
    s = ScenarioSpec(sigma=1e-9, alpha_true=0.0)
    data = generate_dataset(s, np.random.default_rng(1))
    # subject effects only shift phase 1; late times are dominated by the fixed phase 2
    t = data.t
    phase2 = (3.5 - 0.05 * t) / math.log(10)
    assert np.all(data.y >= phase2 - 1e-6)


@pytest.mark.parametrize("p0,alpha", sim.SCENARIO_GRID)
def test_noise_quantile_is_zero(p0, alpha):
    s = ScenarioSpec(p0=p0, alpha_true=alpha)
    n = 1_000_000
    e = noise_sample(s, np.random.default_rng(2), n)
    assert abs(np.mean(e <= 0) - p0) < 3 * math.sqrt(p0 * (1 - p0) / n)


def test_replicate_determinism():
    s = ScenarioSpec()
    a = replicate_dataset(s, 7, 3)
    b = replicate_dataset(s, 7, 3)
    assert a.y.tobytes() == b.y.tobytes()
    assert not np.array_equal(a.y, replicate_dataset(s, 7, 4).y)
    assert not np.array_equal(a.y, replicate_dataset(s, 8, 3).y)
    assert not np.array_equal(a.y, replicate_dataset(ScenarioSpec(p0=0.85), 7, 3).y)


# --- tables ------------------------------------------------------------------------------

def sample_rows():
    return [
        {"p0": 0.5, "alpha": 0.05, "Model": "GAL", "Parameter": "beta2", "True": 5.5, "Bias": 0.1 / 3,
         "RMSE": 3.441, "CP": 0.94, "HPD Len.": 14.892},
        {"p0": 0.5, "alpha": 0.05, "Model": "cGAL", "Parameter": "beta2", "True": 5.5, "Bias": -1e-17,
         "RMSE": 2.068, "CP": 0.96, "HPD Len.": 7.811},
        {"p0": 0.85, "alpha": 0.001, "Model": "AL", "Parameter": "sigma", "True": 0.2, "Bias": math.nan,
         "RMSE": math.nan, "CP": math.nan, "HPD Len.": math.nan},
    ]


def test_table_header_roster():
    assert TABLE_COLUMNS == ("p0", "alpha", "Model", "Parameter", "True", "Bias", "RMSE", "CP", "HPD Len.")
    assert summarize_tables(sample_rows()).splitlines()[0] == ",".join(TABLE_COLUMNS)


def test_empty_table_is_header_only():
    assert summarize_tables([]) == ",".join(TABLE_COLUMNS) + "\n"
    assert parse_table(summarize_tables([])) == []


def test_table_round_trip():
    rows = sample_rows()
    back = parse_table(summarize_tables(rows))
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        for c in TABLE_COLUMNS:
            if isinstance(a[c], float) and math.isnan(a[c]):
                assert math.isnan(b[c])
            else:
                assert a[c] == b[c]


def test_markdown_and_layouts():
    md = summarize_tables(sample_rows(), "markdown")
    assert md.splitlines()[0] == "| " + " | ".join(TABLE_COLUMNS) + " |"
    assert "| 2.068 |" in md
    assert [r["Model"] for r in contamination_rows(sample_rows())] == ["GAL", "cGAL"]
    assert [r["Model"] for r in cgal_rows(sample_rows())] == ["cGAL"]
    with pytest.raises(InvalidParams):
        summarize_tables(sample_rows(), "xml")


def test_parse_rejects_wrong_header():
    with pytest.raises(InvalidParams):
        parse_table("a,b\n1,2\n")


def fake_fit(rep, family, est):
    return {"rep": rep, "family": family, "ok": True, "refit": False, "flagged": False, "error": None,
            "estimates": est}


def test_performance_metrics_by_hand():
    s = ScenarioSpec(families=("GAL",))
    truth = s.truth("GAL")
    fits = []
    for rep, shift in enumerate((0.5, -0.1, 0.2)):
        est = {k: (v + shift, v - 1, v + 0.3) for k, v in truth.items()}
        fits.append(fake_fit(rep, "GAL", est))
    fits.append({"rep": 3, "family": "GAL", "ok": False, "refit": False, "flagged": False, "error": "boom"})
    rows = performance_table(ScenarioResult(s, fits))
    b1 = next(r for r in rows if r["Parameter"] == "beta1")
    assert b1["Bias"] == pytest.approx(0.2)
    assert b1["RMSE"] == pytest.approx(math.sqrt((0.25 + 0.01 + 0.04) / 3))
    assert b1["CP"] == 1.0
    assert b1["HPD Len."] == pytest.approx(1.3)
    status = ScenarioResult(s, fits).status()[0]
    assert (status["succeeded"], status["failed"]) == (3, 1)
    assert all(0 <= r["CP"] <= 1 for r in rows)


def test_failed_fits_recorded_not_dropped(monkeypatch):
    calls = {"n": 0}

    def broken(spec, data, cfg):
        calls["n"] += 1
        raise InvalidState("sampler exploded")

    monkeypatch.setattr(sim, "run_sampler", broken)
    s = ScenarioSpec(replicates=2, families=("GAL",))
    res = run_scenario(s, SamplerConfig(n_chains=2, n_adapt=10, n_burnin=0, n_iter=10, thin=1))
    assert calls["n"] == 2
    assert res.status()[0]["failed"] == 2
    assert all("sampler exploded" in f["error"] for f in res.fits)
    assert all(math.isnan(r["Bias"]) for r in performance_table(res))


def test_convergence_gate_refits_then_flags(monkeypatch):
    real = sim.run_sampler
    lengths = []

    def spy(spec, data, cfg):
        lengths.append(cfg.n_iter)
        return real(spec, data, cfg)

    class Bad:
        def max_rhat(self):
            return 1.5

    monkeypatch.setattr(sim, "run_sampler", spy)
    monkeypatch.setattr(sim, "convergence", lambda draws: Bad())
    s = ScenarioSpec(replicates=1, families=("AL",))
    res = run_scenario(s, SamplerConfig(n_chains=2, n_adapt=20, n_burnin=0, n_iter=20, thin=1))
    fit = res.fits[0]
    assert lengths == [20, 40]
    assert fit["ok"] and fit["refit"] and fit["flagged"]
    assert res.status()[0]["flagged"] == 1


def test_run_scenario_independent_of_workers():
    s = ScenarioSpec(replicates=2, families=("AL", "GAL"))
    cfg = SamplerConfig(n_chains=2, n_adapt=50, n_burnin=20, n_iter=60, thin=2)
    a = run_scenario(s, cfg, master_seed=5, n_jobs=1)
    b = run_scenario(s, cfg, master_seed=5, n_jobs=2)
    assert summarize_tables(performance_table(a)) == summarize_tables(performance_table(b))


@pytest.mark.slow
def test_zero_noise_run_recovers_beta1():
    s = ScenarioSpec(sigma=1e-6, alpha_true=0.0, replicates=3, families=("GAL",))
    res = run_scenario(s, SamplerConfig(n_chains=2, n_adapt=1000, n_burnin=500, n_iter=2000, thin=2), master_seed=3)
    assert res.status()[0]["succeeded"] == 3
    b1 = next(r for r in performance_table(res) if r["Parameter"] == "beta1")
    # beta1 is a population mean over 15 subjects: its error is driven by the random effects only
    assert abs(b1["Bias"]) < 3 * 0.95 / math.sqrt(15 * 3)
    assert b1["CP"] == 1.0


# --- desk-scale study properties (shared fixture, also used by the acceptance suite) -----------

def rows_for(result, family, parameter):
    return next(r for r in performance_table(result) if r["Model"] == family and r["Parameter"] == parameter)


@pytest.mark.slow
def test_low_contamination_beta1_bias_small(desk_simulation):
    res = desk_simulation[(0.5, 0.001)]
    for fam in ("GAL", "cGAL"):
        assert abs(rows_for(res, fam, "beta1")["Bias"]) < 0.1


@pytest.mark.slow
def test_low_contamination_families_agree(desk_simulation):
    """With almost no contamination the GAL and cGAL fits are statistically indistinguishable."""
    res = desk_simulation[(0.5, 0.001)]
    ok = {fam: {f["rep"]: f for f in res.fits if f["family"] == fam and f["ok"]} for fam in ("GAL", "cGAL")}
    reps = sorted(set(ok["GAL"]) & set(ok["cGAL"]))
    for name in ("beta1", "beta2"):
        truth = res.scenario.truth("GAL")[name]
        d = np.array([ok["GAL"][r]["estimates"][name][0] - ok["cGAL"][r]["estimates"][name][0] for r in reps])
        # paired difference of bias: within 3 Monte Carlo standard errors of zero
        assert abs(d.mean()) < 3 * d.std(ddof=1) / math.sqrt(len(d)) + 1e-12, name
        err_g = np.array([ok["GAL"][r]["estimates"][name][0] - truth for r in reps])
        err_c = np.array([ok["cGAL"][r]["estimates"][name][0] - truth for r in reps])
        dse = (err_g**2 - err_c**2)
        assert abs(dse.mean()) < 3 * dse.std(ddof=1) / math.sqrt(len(dse)) + 1e-12, name


@pytest.mark.slow
def test_desk_study_statuses(desk_simulation):
    for res in desk_simulation.values():
        for st in res.status():
            assert st["replicates"] == 50
            assert st["failed"] == 0
            assert st["succeeded"] == 50
        for r in performance_table(res):
            assert 0 <= r["CP"] <= 1
