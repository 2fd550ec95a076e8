import json

import pytest

from kgsynth.cli import main

FAST = ["--epochs", "1", "--batch", "100", "--n-critic", "1", "--hidden", "16", "--lr", "1e-3"]


@pytest.fixture()
def fixture_files(tmp_path):
    out = tmp_path / "net.csv"
    assert main(["fixture", "--out", str(out), "--rows", "300", "--seed", "0"]) == 0
    return tmp_path, out, tmp_path / "net.schema.json", tmp_path / "net.rules.json"


def test_accountant_reference_value(capsys):
    assert main(["accountant", "--q", "0.01", "--sigma", "1", "--steps", "1000", "--delta", "1e-5"]) == 0
    out = capsys.readouterr().out
    assert "epsilon: 2.538347545458931" in out and "order: 8.0" in out


def test_accountant_zero_steps(capsys):
    assert main(["accountant", "--q", "0.01", "--sigma", "1", "--steps", "0"]) == 0
    assert "epsilon: 0 (no steps)" in capsys.readouterr().out


def test_accountant_rejects_bad_input():
    assert main(["accountant", "--q", "2", "--sigma", "1", "--steps", "1"]) == 2


def test_seed_is_mandatory(fixture_files):
    d, data, schema, rules = fixture_files
    assert main(["fit", "--data", str(data), "--schema", str(schema), "--rules", str(rules),
                 "--model", str(d / "m.json")]) == 2


def test_fit_sample_eval(fixture_files, capsys):
    d, data, schema, rules = fixture_files
    model, syn, rep = d / "m.json", d / "syn.csv", d / "rep.json"
    assert main(["fit", "--data", str(data), "--schema", str(schema), "--rules", str(rules), "--model", str(model),
                 "--seed", "1", *FAST]) == 0
    assert "fingerprint:" in capsys.readouterr().out
    assert main(["sample", "--model", str(model), "--out", str(syn), "--rows", "200", "--seed", "2"]) == 0
    assert main(["eval", "--data", str(data), "--synthetic", str(syn), "--schema", str(schema), "--report", str(rep),
                 "--metrics", "pmse,chi2,ks", "--seed", "3"]) == 0
    report = json.loads(rep.read_text())
    assert report["version"] == 1 and 0 <= report["chi2_avg_p"] <= 1
    assert main(["attack", "--mode", "aia", "--data", str(data), "--synthetic", str(syn), "--schema", str(schema),
                 "--report", str(d / "aia.json"), "--seed", "0"]) == 0
    assert json.loads((d / "aia.json").read_text())["sensitive"] == "src_zone"


def test_eval_needs_target_for_regression(fixture_files):
    d, data, schema, rules = fixture_files
    assert main(["eval", "--data", str(data), "--synthetic", str(data), "--schema", str(schema),
                 "--report", str(d / "r.json"), "--metrics", "regression", "--seed", "0"]) == 2


def test_missing_data_file(fixture_files):
    d, data, schema, rules = fixture_files
    assert main(["fit", "--data", str(d / "nope.csv"), "--schema", str(schema), "--rules", str(rules),
                 "--model", str(d / "m.json"), "--seed", "0"]) == 2


def test_malformed_csv_is_a_data_error(fixture_files):
    d, data, schema, rules = fixture_files
    bad = d / "bad.csv"
    bad.write_text("protocol,dst_port,src_zone,bytes\nDNS,53,home,notanumber\n")
    assert main(["fit", "--data", str(bad), "--schema", str(schema), "--rules", str(rules),
                 "--model", str(d / "m.json"), "--seed", "0", *FAST]) == 3


def test_budget_exhaustion_exit_code(fixture_files, capsys):
    d, data, schema, rules = fixture_files
    code = main(["fit", "--data", str(data), "--schema", str(schema), "--rules", str(rules),
                 "--model", str(d / "m.json"), "--seed", "0", "--dp", "--sigma", "0.8", "--epsilon-ceiling", "1.0",
                 *FAST])
    assert code == 4
    assert "budget_exhausted" in capsys.readouterr().out


def test_tampered_model_exit_code(fixture_files):
    d, data, schema, rules = fixture_files
    model = d / "m.json"
    assert main(["fit", "--data", str(data), "--schema", str(schema), "--rules", str(rules), "--model", str(model),
                 "--seed", "1", *FAST]) == 0
    model.write_text(model.read_text().replace('"epochs": 1', '"epochs": 2'))
    assert main(["sample", "--model", str(model), "--out", str(d / "s.csv"), "--seed", "0"]) == 5
