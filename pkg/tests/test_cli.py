import json
import math
import warnings

import numpy as np
import pandas as pd
import pytest

from conflict_risk import cli
from conflict_risk.mixed_logit import EstimationResult, HaltonConfig, ModelSpec, RandomTerm
from conflict_risk.oracle import OracleConfig, oracle_ttc
from conflict_risk.reporting import NonNested, compare
from conflict_risk.synth import SimulationTruth, simulate_choices
from conflict_risk.trajectory import OBS_COLUMNS, derive_kinematics, load_trajectories


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture
def crossing(tmp_path):
    tracks, zones = tmp_path / "tracks.csv", tmp_path / "zones.json"
    assert run("synth", "crossing", "--output", tracks, "--zones", zones) == 0
    cfg = write_json(tmp_path / "run.json", {
        "trajectories": ["tracks.csv"], "zones": "zones.json",
        "output_dir": "out",
    })
    return tmp_path, cfg


# ---------------------------------------------------------------------------
# detect / dataset


def test_detect_crossing_scene_matches_oracle(crossing):
    root, cfg = crossing
    assert run("detect", "--config", cfg) == 0
    table = pd.read_csv(root / "out" / "conflicts.csv")
    assert (table["outcome"] == "Severe").sum() >= 1
    tracks = {t.vehicle_id: derive_kinematics(t, 30) for t in load_trajectories(root / "tracks.csv")}
    for row in table.itertuples():
        a, b = tracks[str(row.leader_id)], tracks[str(row.follower_id)]
        ref = oracle_ttc(a.state(a.index(row.frame)), b.state(b.index(row.frame)), OracleConfig(horizon=10))
        assert abs(row.ttc - ref) <= 0.002
        expected = "Severe" if ref < 1.5 else "Slight" if ref < 3.0 else "None"
        assert row.outcome == expected
    assert (root / "out" / "conflicts_summary.json").exists()


def test_detect_without_interactions(tmp_path):
    scene = write_json(tmp_path / "scene.json", {"n_frames": 60, "vehicles": [
        {"vehicle_id": "1", "x": 0, "y": 0, "heading": 0, "speed": 10},
        {"vehicle_id": "2", "x": 0, "y": 30, "heading": 0, "speed": 10},
    ]})
    assert run("synth", "scene", "--spec", scene, "--output", tmp_path / "t.csv") == 0
    box = [[-100, -100], [100, -100], [100, 100], [-100, 100]]
    write_json(tmp_path / "zones.json", {"study_area": box, "zones": [{"name": "Zone 3", "polygon": box}]})
    cfg = write_json(tmp_path / "run.json", {"trajectories": "t.csv", "zones": "zones.json"})
    assert run("detect", "--config", cfg) == 0
    table = pd.read_csv(tmp_path / "out" / "conflicts.csv")
    assert table.empty and list(table.columns) == cli.CONFLICT_COLUMNS


def test_missing_zone_file_is_config_error(crossing, capsys):
    root, cfg = crossing
    (root / "zones.json").unlink()
    assert run("detect", "--config", cfg) == cli.EXIT_CONFIG
    assert "zones.json" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [
    {"trajectories": "tracks.csv", "zones": "zones.json", "thresholds": {"slight": 1.0, "severe": 2.0}},
    {"trajectories": "tracks.csv", "zones": "zones.json", "draws": 0},
    {"trajectories": "tracks.csv", "zones": "zones.json", "sampling": {"zone_names": ["Zone 3"]}},
])
def test_invalid_config_values(crossing, doc):
    root, _ = crossing
    cfg = write_json(root / "bad.json", doc)
    assert run("detect", "--config", cfg) == cli.EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert run("detect", "--config", tmp_path / "nope.json") == cli.EXIT_CONFIG


def test_overrides_change_output(crossing):
    root, cfg = crossing
    assert run("detect", "--config", cfg, "--stride", "1", "--thresholds", "5,0.5") == 0
    table = pd.read_csv(root / "out" / "conflicts.csv")
    # one row per frame from the first full second of speed history up to contact
    assert table["frame"].is_unique and len(table) > 60
    assert (np.diff(table["frame"]) == 1).all()
    finite = table[table["ttc"] < 5]
    assert ((finite["ttc"] < 0.5) == (finite["outcome"] == "Severe")).all()


def test_reruns_are_byte_identical(crossing):
    root, cfg = crossing
    outputs = {}
    for k in range(2):
        assert run("dataset", "--config", cfg) == 0
        assert run("detect", "--config", cfg) == 0
        outputs[k] = {p.name: p.read_bytes() for p in sorted((root / "out").iterdir())}
    assert outputs[0] == outputs[1]
    assert {"observations.csv", "conflicts.csv", "dataset_summary.json"} <= set(outputs[0])


# ---------------------------------------------------------------------------
# estimate


def observation_file(path, frame):
    """Pad a simulated choice frame with the bookkeeping columns the reader expects."""
    frame = frame.copy()
    for c in OBS_COLUMNS:
        if c not in frame:
            frame[c] = 0
    frame["family"] = "rear_end"
    frame.to_csv(path, index=False)
    return path


def mnl_setup(tmp_path, n=600, draws=None):
    spec = ModelSpec(fixed={"Slight": ["const", "x1"], "Severe": ["const", "x1"]})
    truth = SimulationTruth(spec, {"Slight:x1": 0.6, "Severe:x1": 1.0, "Severe:const": -0.3}, np.zeros((0, 0)),
                            n, 1, {"x1": ("normal", 0, 1)}, seed=5)
    observation_file(tmp_path / "obs.csv", simulate_choices(truth).dataset.frame)
    write_json(tmp_path / "mnl.json", {**spec.to_dict(), "family": "rear_end"})
    doc = {"observations": "obs.csv", "models": {"mnl": "mnl.json"}, "output_dir": "out"}
    if draws:
        doc["draws"] = draws
    return write_json(tmp_path / "run.json", doc)


def test_estimate_mnl_reports_null_loglik(tmp_path):
    cfg = mnl_setup(tmp_path)
    assert run("estimate", "--config", cfg) == 0
    res = json.loads((tmp_path / "out" / "result_mnl.json").read_text())
    assert res["loglik0"] == pytest.approx(-600 * math.log(3), abs=1e-9)
    assert res["converged"]
    report = (tmp_path / "out" / "report_mnl.txt").read_text()
    assert f"{-600 * math.log(3):.2f}" in report
    assert "LL(0)" in report and "Degrees of freedom" in report


def test_estimate_correlated_report_layout(tmp_path):
    spec = ModelSpec(fixed={"Slight": ["const"], "Severe": ["const"]},
                     random=[RandomTerm("Severe", "x1", heterogeneity=("z",)), RandomTerm("Severe", "x2")],
                     halton=HaltonConfig(draws=50)).correlate(["Severe:x1", "Severe:x2"])
    truth = SimulationTruth(spec, {"Severe:x1": 0.5, "Severe:x2": -0.5, "Severe:x1|z": 0.5},
                            [[0.8, 0], [-0.5, 0.5]], 60, 8,
                            {"x1": ("normal", 0, 1), "x2": ("normal", 0, 1), "z": ("bernoulli", 0.5)},
                            group_level=("z",), seed=2)
    observation_file(tmp_path / "obs.csv", simulate_choices(truth).dataset.frame)
    write_json(tmp_path / "cor.json", spec.to_dict())
    cfg = write_json(tmp_path / "run.json", {"observations": "obs.csv", "models": {"cor": "cor.json"}})
    assert run("estimate", "--config", cfg) in (cli.EXIT_OK, cli.EXIT_CONVERGENCE)
    report = (tmp_path / "out" / "report_cor.txt").read_text()
    for head in ("Cholesky matrix of random parameters", "Correlation coefficients of random parameters",
                 "Standard deviation", "Heterogeneity in the means of the random parameter", "LL(beta)"):
        assert head in report
    res = EstimationResult.load(tmp_path / "out" / "result_cor.json")
    assert res.cholesky.shape == (2, 2) and res.cholesky[0, 1] == 0


def test_estimate_zero_rows_is_data_error(tmp_path):
    cfg = mnl_setup(tmp_path)
    pd.DataFrame(columns=list(OBS_COLUMNS)).to_csv(tmp_path / "obs.csv", index=False)
    assert run("estimate", "--config", cfg) == cli.EXIT_DATA


def test_estimate_nonconvergence_exit_code(tmp_path, monkeypatch, caplog):
    from conflict_risk.mixed_logit import estimate as est

    cfg = mnl_setup(tmp_path)
    original = est.EstimationOptions
    monkeypatch.setattr(cli, "maximize",
                        lambda data, spec: est.maximize(data, spec, options=original(maxiter=1)))
    assert run("estimate", "--config", cfg) == cli.EXIT_CONVERGENCE
    assert "did not converge" in caplog.text and "last log-likelihood evaluations" in caplog.text
    assert (tmp_path / "out" / "result_mnl.json").exists()


def test_estimate_rerun_identical(tmp_path):
    cfg = mnl_setup(tmp_path)
    blobs = []
    for _ in range(2):
        assert run("estimate", "--config", cfg, "--seed", "3") == 0
        blobs.append((tmp_path / "out" / "result_mnl.json").read_bytes())
    assert blobs[0] == blobs[1]


# ---------------------------------------------------------------------------
# compare


def stored(tmp_path, name, ll, df, n, aic):
    path = tmp_path / f"{name}.json"
    EstimationResult.summary_only(ll, df, n, reported_aic=aic).save(path)
    return path


@pytest.mark.parametrize("case", [
    dict(n=3535, a=(-1590.06, 26, 3232.1), b=(-1577.45, 27, 3210.9), x2=25.22, bad="Correlated"),
    dict(n=1417, a=(-1162.69, 21, 2367.0), b=(-1157.31, 22, 2359.0), x2=10.76, bad=None),
])
def test_compare_reference_metrics(tmp_path, capsys, case):
    a = stored(tmp_path, "a", *case["a"][:2], case["n"], case["a"][2])
    b = stored(tmp_path, "b", *case["b"][:2], case["n"], case["b"][2])
    assert run("compare", a, b, "--names", "Uncorrelated", "Correlated", "--output-dir", tmp_path / "cmp") == 0
    text = capsys.readouterr().out
    doc = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    assert doc["lr_statistic"] == pytest.approx(case["x2"], abs=0.01)
    assert doc["significant"] and f"{case['x2']:.2f}*" in text
    for side in ("restricted", "full"):
        s = doc[side]
        assert s["aic"] == pytest.approx(2 * s["df"] - 2 * s["loglik"])
    if case["bad"]:
        assert not doc["full"]["aic_consistent"] and doc["restricted"]["aic_consistent"]
        assert f"WARNING: {case['bad']} quoted AIC 3210.9" in text
        assert doc["full"]["aic"] == pytest.approx(3208.9, abs=1e-9)
    else:
        assert doc["full"]["aic_consistent"] and doc["restricted"]["aic_consistent"]
        assert "WARNING" not in text


def test_compare_identical_results(tmp_path):
    a = EstimationResult.summary_only(-1000.0, 10, 2000)
    cmp = compare(a, a)
    assert cmp["lr_statistic"] == 0.0 and not cmp["significant"]


def test_compare_worse_full_model_warns():
    a = EstimationResult.summary_only(-1000.0, 10, 2000)
    b = EstimationResult.summary_only(-1001.0, 11, 2000)
    with pytest.warns(UserWarning):
        cmp = compare(a, b)
    assert cmp["lr_statistic"] < 0


def test_compare_non_nested_warns():
    with pytest.warns(NonNested):
        compare(EstimationResult.summary_only(-1000.0, 10, 2000), EstimationResult.summary_only(-990.0, 9, 2000))


def test_compare_missing_file(tmp_path):
    assert run("compare", tmp_path / "a.json", tmp_path / "b.json") == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# plot


def test_plot_payment_groups_and_histogram(crossing):
    root, cfg = crossing
    assert run("dataset", "--config", cfg, "--stride", "1") == 0
    assert run("plot", "--config", cfg) == 0
    lines = pd.read_csv(root / "out" / "plot_trajectories_payment.csv")
    assert lines.groupby("payment").ngroups == 2
    obs = pd.read_csv(root / "out" / "observations.csv")
    total = 0
    for fam, sub in obs.groupby("family"):
        hist = pd.read_csv(root / "out" / f"plot_ttc_histogram_{fam}.csv")
        assert hist["count"].sum() == np.isfinite(sub["ttc"]).sum()
        total += hist["count"].sum()
    assert total == len(obs)


def test_plot_empty_input_is_error(tmp_path):
    (tmp_path / "t.csv").write_text("")
    cfg = write_json(tmp_path / "run.json", {"trajectories": "t.csv"})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert run("plot", "--config", cfg) == cli.EXIT_DATA


def test_histogram_conserves_counts():
    ttc = np.array([0.0, 0.1, 0.25, 1.49, 2.99, np.inf])
    hist = cli.ttc_histogram(ttc)
    assert hist["count"].sum() == 5
    assert hist["lower"].iloc[0] == 0.0


# ---------------------------------------------------------------------------
# synth


def test_synth_choices_seed_override(tmp_path):
    spec = ModelSpec(fixed={"Severe": ["const", "x"]})
    truth = write_json(tmp_path / "truth.json", {
        "spec": spec.to_dict(), "coefficients": {"Severe:x": 1.0}, "n_groups": 50, "obs_per_group": 2,
        "covariates": {"x": ["normal", 0, 1]}, "seed": 1,
    })
    for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
        assert run("synth", "choices", "--spec", truth, "--output", tmp_path / f"{name}.csv", "--seed", seed) == 0
    a, b, c = ((tmp_path / f"{k}.csv").read_bytes() for k in "abc")
    assert a == b and a != c


def test_synth_requires_spec(tmp_path):
    assert run("synth", "scene", "--output", tmp_path / "x.csv") == cli.EXIT_CONFIG
