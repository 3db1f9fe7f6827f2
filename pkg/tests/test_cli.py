import json

import numpy as np
import pandas as pd
import pytest

from sacematch.cli import main, parse_range
from sacematch.data import nsw_paths

CSV, ROLES = (str(p) for p in nsw_paths())


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_em_writes_model_and_manifest(tmp_path, capsys):
    out = tmp_path / "m.json"
    code, stdout, _ = run(capsys, "em", "--data", CSV, "--roles", ROLES, "--out", str(out))
    assert code == 0
    model = json.loads(out.read_text())
    assert model["variant"] == "monotonicity"
    assert model["reference"] == "pro"
    assert model["coefficients"]["as"]["intercept"] == pytest.approx(3.855, abs=0.05)
    assert model["coefficients"]["ns"]["intercept"] == pytest.approx(1.585, abs=0.05)
    manifest = json.loads((tmp_path / "m.json.manifest.json").read_text())
    assert manifest["command"] == "em" and "version" in manifest
    assert "strata" in stdout


def test_em_cpsr_flag(tmp_path, capsys):
    out = tmp_path / "m.json"
    code, _, _ = run(capsys, "em", "--xi", "0.2", "--out", str(out))
    assert code == 0
    model = json.loads(out.read_text())
    assert model["variant"] == "cpsr" and model["xi"] == 0.2


def test_missing_roles_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code, _, err = run(capsys, "em", "--data", CSV, "--roles", str(missing), "--out", str(tmp_path / "m.json"))
    assert code != 0
    payload = json.loads(err.strip().splitlines()[-1])
    assert str(missing) in payload["message"]


def test_estimate_matched(tmp_path, capsys):
    out = tmp_path / "est.csv"
    code, _, _ = run(capsys, "estimate", "--data", CSV, "--roles", ROLES, "--distance", "mahalanobis-caliper",
                     "--caliper-sd", "0.3", "--replace", "--estimators", "crude,wls,wls-i,bc", "--out", str(out))
    assert code == 0
    f = pd.read_csv(out).set_index("name")
    targets = {"crude": 435, "wls": 451, "wls-i": 380, "bc": 343}
    for name, value in targets.items():
        assert f.loc[name, "estimate"] == pytest.approx(value, abs=150)


def test_estimate_comparators(tmp_path, capsys):
    out = tmp_path / "est.json"
    code, _, _ = run(capsys, "estimate", "--estimators", "naive,composite", "--out", str(out))
    assert code == 0
    rows = {r["name"]: r for r in json.loads(out.read_text())}
    assert rows["naive"]["estimate"] == pytest.approx(409, abs=1)
    assert rows["composite"]["estimate"] == pytest.approx(886, abs=1)


def test_unknown_estimator_lists_valid(tmp_path, capsys):
    code, _, err = run(capsys, "estimate", "--estimators", "crude,magic", "--out", str(tmp_path / "e.csv"))
    assert code != 0
    msg = json.loads(err.strip().splitlines()[-1])["message"]
    assert "magic" in msg and "wls-i" in msg and "bc" in msg


def test_seed_required_for_stochastic(tmp_path, capsys):
    code, _, err = run(capsys, "estimate", "--estimators", "weighting", "--out", str(tmp_path / "e.csv"))
    assert code != 0 and "--seed" in err


def test_sensitivity_ppi(tmp_path, capsys):
    out = tmp_path / "ppi.csv"
    code, _, _ = run(capsys, "sensitivity", "ppi", "--alpha1", "0.5:2:0.1", "--out", str(out))
    assert code == 0
    f = pd.read_csv(out)
    assert len(f) == 16
    base = json.loads((tmp_path / "ppi.csv.manifest.json").read_text())["base_estimate"]
    assert f.loc[np.isclose(f.alpha1, 1.0), "estimate"].iloc[0] == pytest.approx(base, rel=1e-9)


def test_sensitivity_mono_rejects_xi(tmp_path, capsys):
    code, _, err = run(capsys, "sensitivity", "mono", "--xi", "0.9", "--out", str(tmp_path / "m.csv"))
    assert code != 0
    assert "[0.0000, 0.4791]" in err


def test_match_and_balance(tmp_path, capsys):
    m, b = tmp_path / "m.csv", tmp_path / "b.csv"
    assert run(capsys, "match", "--out", str(m))[0] == 0
    f = pd.read_csv(m)
    assert len(f) == 296 and list(f.columns) == ["target_id", "donor_id", "distance", "K"]
    assert run(capsys, "balance", "--out", str(b))[0] == 0
    bal = pd.read_csv(b)
    assert set(bal["sample"]) == {"full", "survivors", "matched"}


def test_rerun_is_byte_identical(tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / f"e{i}.csv"
        run(capsys, "estimate", "--estimators", "crude,weighting", "--tests", "aligned-rank", "--seed", "3",
            "--n-boot", "50", "--n-perm", "500", "--out", str(out))
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_simulate_small(tmp_path, capsys):
    out = tmp_path / "sim.csv"
    code, _, _ = run(capsys, "simulate", "--scenario", "A", "--k", "5", "--pi-pro", "high", "--interactions",
                     "--reps", "2", "--n", "500", "--seed", "7", "--out", str(out))
    assert code == 0
    f = pd.read_csv(out)
    assert {"estimator", "mean", "emp_sd", "est_se", "mse", "cp95"} <= set(f.columns)
    assert f["scenario"].iloc[0] == "A-high-k5-int"


def test_simulate_requires_seed(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--reps", "1"])


@pytest.mark.parametrize(
    "text, expected",
    [("0.5:1:0.25", [0.5, 0.75, 1.0]), ("0.1,0.3", [0.1, 0.3]), ("2", [2.0]), ("0:0.48:0.1", [0, 0.1, 0.2, 0.3, 0.4])],
)
def test_parse_range(text, expected):
    assert parse_range(text) == pytest.approx(expected)
