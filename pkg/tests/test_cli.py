import csv
import json
import os
import random
from pathlib import Path

import numpy as np
import pytest

from galqr import cli, config as cfgmod
from galqr.cli import SCHEMAS, VERBS, ingest_csv, main
from galqr.errors import ConfigError, DataError

# --- ingestion --------------------------------------------------------------------------------


def write(path, text):
    path.write_text(text)
    return path


def test_ingest_two_rows(tmp_path):
    d = ingest_csv(write(tmp_path / "a.csv", "id,time,y\nA,0,5.1\nA,2,4.0\n"))
    assert d.n_subjects == 1 and d.n_obs == 2
    assert d.ids == ["A"]
    np.testing.assert_array_equal(d.y, [5.1, 4.0])


def test_ingest_shuffled_rows_canonicalised(tmp_path):
    rows = [f"{i},{t},{i * 10 + t}.5,{200 + t}" for i in (1, 2, 10) for t in (0, 3, 7)]
    ordered = ingest_csv(write(tmp_path / "o.csv", "id,time,y,cd4\n" + "\n".join(rows) + "\n"))
    random.Random(0).shuffle(rows)
    shuffled = ingest_csv(write(tmp_path / "s.csv", "id,time,y,cd4\n" + "\n".join(rows) + "\n"))
    assert shuffled.ids == ordered.ids == ["1", "2", "10"]  # numeric ids in numeric order
    for a in ("subj", "t", "y"):
        np.testing.assert_array_equal(getattr(shuffled, a), getattr(ordered, a))
    np.testing.assert_array_equal(shuffled.covariates["cd4"], ordered.covariates["cd4"])
    assert shuffled.n_obs == 9


def test_ingest_cd4_scale(tmp_path):
    p = write(tmp_path / "c.csv", "id,time,y,cd4\nA,0,5,250\nA,1,4,310\n")
    np.testing.assert_allclose(ingest_csv(p, 100.0).covariates["cd4"], [2.5, 3.1])
    np.testing.assert_allclose(ingest_csv(p).covariates["cd4"], [250, 310])


@pytest.mark.parametrize("text,fragment", [
    ("id,time\nA,0\n", "missing required column 'y'"),
    ("id,time,y\nA,0,1\nA,1,abc\n", ":3: non-numeric value 'abc'"),
    ("", "empty file"),
    ("id,time,y\n", "no data rows"),
    ("id,time,y\nA,0\n", ":2: expected 3 cells"),
    ("id,time,y\nA,-1,2\n", "non-negative"),
])
def test_ingest_errors(tmp_path, text, fragment):
    with pytest.raises(DataError, match=fragment.replace("(", r"\(").replace("'", "'")):
        ingest_csv(write(tmp_path / "bad.csv", text))


def test_ingest_missing_file(tmp_path):
    with pytest.raises(DataError):
        ingest_csv(tmp_path / "nope.csv")


# --- config -----------------------------------------------------------------------------------

def test_config_precedence(tmp_path):
    p = write(tmp_path / "c.toml", "seed = 5\n[sampler]\nn_iter = 300\nthin = 3\n[model]\np0 = 0.25\n")
    file_cfg = cfgmod.load_file(p)
    cfg = cfgmod.resolve(file_cfg, [cfgmod.parse_assignment("sampler.n_iter=600"), {"seed": 9}])
    assert cfg["seed"] == 9
    assert cfg["sampler"]["n_iter"] == 600 and cfg["sampler"]["thin"] == 3
    assert cfg["model"]["p0"] == 0.25
    assert cfg["model"]["likelihood"] == "cGAL"


@pytest.mark.parametrize("over", [{"bogus": 1}, {"sampler": {"n_iters": 3}}, {"model": {"likelihood": "t"}},
                                  {"sampler": {"n_chains": 0}}, {"model": {"priors": {"nope": 1}}},
                                  {"model": 3}])
def test_config_rejects_bad_values(over):
    with pytest.raises(ConfigError):
        cfgmod.resolve(over)


def test_parse_assignment_types():
    assert cfgmod.parse_assignment("a.b=3") == {"a": {"b": 3}}
    assert cfgmod.parse_assignment("x=[1, 2]") == {"x": [1, 2]}
    assert cfgmod.parse_assignment("model.likelihood=GAL") == {"model": {"likelihood": "GAL"}}
    with pytest.raises(ConfigError):
        cfgmod.parse_assignment("novalue")


def test_config_hash_is_order_independent():
    assert cfgmod.config_hash({"a": 1, "b": [1, 2]}) == cfgmod.config_hash({"b": [1, 2], "a": 1})
    assert cfgmod.config_hash({"a": 1}) != cfgmod.config_hash({"a": 2})


# --- CLI surface ------------------------------------------------------------------------------

def test_help_lists_all_verbs(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for verb in VERBS:
        assert verb in out


def test_no_verb_prints_help(capsys):
    assert main([]) == 0
    assert "usage" in capsys.readouterr().out


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]


def test_missing_input_gives_error_json(tmp_path, capsys):
    code = main(["fit", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    assert code == 2
    err = error_of(capsys)
    assert err["type"] == "config-error" and "not found" in err["message"]
    assert not (tmp_path / "o").exists()


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = write(tmp_path / "c.toml", "[sampler]\nwarmup = 3\n")
    assert main(["pdf-table", "-c", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config key 'sampler.warmup'" in error_of(capsys)["message"]


def test_bad_flag_is_json_error(capsys):
    assert main(["fit", "--no-such-flag"]) == 2
    assert error_of(capsys)["type"] == "config-error"


def test_bad_data_is_json_error(tmp_path, capsys):
    data = write(tmp_path / "d.csv", "id,time,y\nA,0,x\n")
    assert main(["fit", "--input", str(data), "--out", str(tmp_path / "o")]) == 2
    err = error_of(capsys)
    assert err["type"] == "data-error" and ":2:" in err["message"]


def test_failure_leaves_no_partial_outputs(tmp_path, monkeypatch, capsys):
    def half_done(cfg, out, ctx):
        (out / "pdf_table.csv").write_text("y\n1\n")
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.COMMANDS, "pdf-table", half_done)
    assert main(["pdf-table", "--out", str(tmp_path / "o")]) == 1
    assert error_of(capsys)["type"] == "internal-error"
    assert list(tmp_path.iterdir()) == []


def test_invalid_output_schema_fails(tmp_path, monkeypatch, capsys):
    def wrong_header(cfg, out, ctx):
        (out / "pdf_table.csv").write_text("a,b\n1,2\n")

    monkeypatch.setitem(cli.COMMANDS, "pdf-table", wrong_header)
    assert main(["pdf-table", "--out", str(tmp_path / "o")]) == 2
    assert "does not match schema" in error_of(capsys)["message"]
    assert list(tmp_path.iterdir()) == []


def test_existing_output_needs_force(tmp_path, capsys):
    out = tmp_path / "o"
    small = ["--set", "pdf_table.n_points=11"]
    assert main(["pdf-table", "--out", str(out)] + small) == 0
    assert main(["pdf-table", "--out", str(out)] + small) == 2
    assert "--force" in error_of(capsys)["message"]
    assert main(["pdf-table", "--out", str(out), "--force"] + small) == 0


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["pdf-table", "--set", "pdf_table.n_points=11"]) == 0
    made = list((tmp_path / "root").iterdir())
    assert len(made) == 1 and made[0].name.startswith("pdf-table-")


# --- pdf / kurtosis tables --------------------------------------------------------------------

def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pdf_table_tail_dominance(tmp_path):
    out = tmp_path / "pdf"
    assert main(["pdf-table", "--out", str(out)]) == 0
    rows = read_csv(out / "pdf_table.csv")
    assert list(rows[0]) == SCHEMAS["pdf_table.csv"][1]
    y = np.array([float(r["y"]) for r in rows])
    diff = np.array([float(r["cgal_pdf"]) - float(r["gal_pdf"]) for r in rows])
    assert diff[0] > 0 and diff[-1] > 0  # contaminated density dominates in both tails
    assert diff[np.argmin(np.abs(y))] < 0  # and gives up mass near the centre
    sign_changes = np.flatnonzero(np.diff(np.sign(diff)) != 0)
    assert len(sign_changes) == 2  # one crossover per side
    for col in ("al_cdf", "gal_cdf", "cgal_cdf"):
        c = np.array([float(r[col]) for r in rows])
        assert np.all(np.diff(c) >= -1e-12) and 0 <= c[0] and c[-1] <= 1


def test_kurtosis_table(tmp_path):
    out = tmp_path / "k"
    assert main(["kurtosis-table", "--out", str(out), "--set", "kurtosis_table.n_draws=20000",
                 "--set", "kurtosis_table.gammas=[-0.5, 0.5]"]) == 0
    rows = read_csv(out / "kurtosis_table.csv")
    assert [(r["gamma"], r["family"]) for r in rows] == [("-0.5", "GAL"), ("-0.5", "cGAL"), ("0.5", "GAL"),
                                                         ("0.5", "cGAL")]
    by = {(r["gamma"], r["family"]): float(r["kurtosis"]) for r in rows}
    assert by[("0.5", "cGAL")] > by[("0.5", "GAL")]


# --- fit / predict / diagnose / simulate pipeline -------------------------------------------------

def test_every_verb_writes_validated_outputs_and_manifest(cli_runs):
    expected = {
        "fit": {"draws.csv", "random_effects.csv", "summary.csv", "convergence.json", "inclusion.csv"},
        "predict": {"trajectory.csv"},
        "diagnose": {"influence.csv", "residuals.csv", "loo.csv", "diagnostics.json"},
        "simulate": {"performance.csv", "contamination.csv", "cgal_performance.csv", "performance.md",
                     "replicates.csv"},
        "pdf-table": {"pdf_table.csv"},
        "kurtosis-table": {"kurtosis_table.csv"},
    }
    for verb, out in cli_runs.items():
        names = {p.name for p in out.iterdir()}
        assert names == expected[verb] | {"manifest.json"}, verb
        man = json.loads((out / "manifest.json").read_text())
        for key in ("schema_version", "config_hash", "seed", "versions", "wall_time_s", "outputs", "backend"):
            assert key in man, (verb, key)
        assert set(man["outputs"]) == expected[verb]
        for name, meta in man["outputs"].items():
            assert meta["sha256"] == cli.sha256_file(out / name)
            cli.validate_output(out / name)


def test_fit_converges_for_all_betas(cli_runs):
    conv = json.loads((cli_runs["fit"] / "convergence.json").read_text())
    assert conv["schema_version"] == "1.0"
    betas = {k: v for k, v in conv["rhat"].items() if k.startswith("beta")}
    assert set(betas) == {"beta1", "beta2"}
    assert all(v < 1.05 for v in betas.values()), betas
    summary = read_csv(cli_runs["fit"] / "summary.csv")
    assert [r["parameter"] for r in summary] == ["beta1", "beta2", "sigma", "gamma", "alpha", "omega11",
                                                 "omega12", "omega22"]


def test_fit_manifest_records_input_digest(cli_runs):
    man = json.loads((cli_runs["fit"] / "manifest.json").read_text())
    data = Path(man["inputs"]["data"]["path"])
    assert man["inputs"]["data"]["sha256"] == cli.sha256_file(data)
    assert man["config"]["input"] == str(data)


def test_predict_trajectory_rows(cli_runs):
    rows = read_csv(cli_runs["predict"] / "trajectory.csv")
    assert [float(r["time"]) for r in rows] == [0, 2, 7, 10, 14, 21, 28, 56, 84, 168, 336]
    assert all(float(r["cd4"]) == 2.25 for r in rows)


def test_diagnose_outputs(cli_runs):
    rows = read_csv(cli_runs["diagnose"] / "influence.csv")
    assert len(rows) == 135
    assert all(float(r["kl"]) <= 10.0 for r in rows)
    diag = json.loads((cli_runs["diagnose"] / "diagnostics.json").read_text())
    assert diag["residual_tests"]["n_sims"] == 250


def test_predict_requires_fit(tmp_path, capsys):
    assert main(["predict", "--out", str(tmp_path / "p")]) == 2
    assert "--fit" in error_of(capsys)["message"]


def payload(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


@pytest.mark.parametrize("verb", ["fit", "predict", "diagnose", "simulate", "pdf-table", "kurtosis-table"])
def test_rerun_from_manifest_is_byte_identical(cli_runs, tmp_path, verb):
    src = cli_runs[verb]
    dst = tmp_path / "again"
    assert main(["rerun", str(src / "manifest.json"), "--out", str(dst), "--check"]) == 0
    assert payload(dst) == payload(src)
    a = json.loads((src / "manifest.json").read_text())
    b = json.loads((dst / "manifest.json").read_text())
    assert a["config_hash"] == b["config_hash"] and a["outputs"] == b["outputs"]


def test_rerun_check_detects_tampering(cli_runs, tmp_path, capsys):
    man = json.loads((cli_runs["pdf-table"] / "manifest.json").read_text())
    man["outputs"]["pdf_table.csv"]["sha256"] = "0" * 64
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps(man))
    assert main(["rerun", str(bad), "--out", str(tmp_path / "x"), "--check"]) == 2
    assert "differ" in error_of(capsys)["message"]


def test_cli_module_entry_point(tmp_path):
    import subprocess
    import sys

    env = {**os.environ, "GALQR_OUTPUT_ROOT": str(tmp_path)}
    r = subprocess.run([sys.executable, "-m", "galqr", "pdf-table", "--set", "pdf_table.n_points=5"],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    assert Path(r.stdout.strip()).parent == tmp_path
