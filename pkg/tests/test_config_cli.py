import json

import pytest

from depthforge import cli
from depthforge.config import ConfigError, config_from_dict, parse_config, write_resolved

TINY = {
    "seed": 3,
    "synth_per_class": 10,
    "gan": {"latent_dim": 16, "image_size": 32, "batch": 8, "epochs": 2, "base_channels": 2},
    "ga": {"pop_size": 4, "generations": 2},
    "dataio": {"n_per_class": 20},
    "classify": {"rf_trees": 3, "gbt_rounds": 3},
    "metrics": {"embedding_k": 4, "is_splits": 2, "is_gbt_rounds": 3},
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_empty_config_gives_defaults_and_lists_missing_keys():
    run, missing = config_from_dict({})
    assert run.ga.pop_size == 20 and run.ga.generations == 100
    assert run.kd.tau == 0.994 and run.gan.lr_g == 8e-5
    assert "seed" in missing and "gan" in missing
    _, missing = config_from_dict({"seed": 1, "gan": {"epochs": 5}})
    assert "gan.lr_g" in missing and "gan.epochs" not in missing


def test_invalid_values_name_the_key():
    with pytest.raises(ConfigError, match="gan.lr_g"):
        config_from_dict({"gan": {"lr_g": -1}})
    with pytest.raises(ConfigError, match="ga.pop_size"):
        config_from_dict({"ga": {"pop_size": "many"}})
    with pytest.raises(ConfigError, match="unknown key kd.temperature"):
        config_from_dict({"kd": {"temperature": 2}})
    with pytest.raises(ConfigError, match="unknown key metrics.ssim.window_size"):
        config_from_dict({"metrics": {"ssim": {"window_size": 7}}})
    assert config_from_dict({"kd": {"tau": 0.999}})[0].kd.tau == 0.999


def test_seeds_follow_the_top_level_seed():
    run, _ = config_from_dict({"seed": 11, "classes": ["a", "b"]})
    assert run.gan.seed == run.ga.seed == 11
    assert run.gan.n_classes == 2
    with pytest.raises(ConfigError, match="unknown key gan.seed"):
        config_from_dict({"gan": {"seed": 1}})


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "seed": 1,\n  "gan": {oops}\n}')
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(path)


def test_resolved_config_round_trips(tmp_path):
    run, _ = config_from_dict(TINY)
    path = write_resolved(run, tmp_path)
    again, missing = parse_config(path)
    assert missing == []
    assert again.to_dict() == run.to_dict()


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["bogus"]) == 2
    bad = write_config(tmp_path / "bad.json", {"gan": {"lr_g": -1}})
    assert cli.main(["fixture", "--config", str(bad)]) == 2
    assert "gan.lr_g" in capsys.readouterr().err
    assert cli.main(["train", "--method", "gan", "--use-ga", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["train", "--method", "kde", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["evolve", "--out", str(tmp_path / "empty")]) == 1
    assert "no checkpoint" in capsys.readouterr().err


def test_gradcheck_command(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "FAIL" not in out
    assert (tmp_path / "config_resolved.json").exists()


def test_fixture_command_writes_manifest(tmp_path):
    cfg = write_config(tmp_path / "c.json", {**TINY, "dataio": {"n_per_class": 3}})
    assert cli.main(["fixture", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o/fixture/manifest.csv").read_text().splitlines()
    assert len(lines) == 1 + 9


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root / "tiny.json", TINY)
    code = cli.main(["pipeline", "--config", str(cfg), "--out", str(root / "a")])
    return root, code


def test_pipeline_output_shape(pipeline_run):
    root, code = pipeline_run
    assert code == 0
    out = root / "a"
    for name in ("checkpoint/arch.json", "losses.csv", "features.csv", "features_synth.csv",
                 "report.json", "metrics.json", "runs.csv", "config_resolved.json",
                 "lda_kde_neutral.csv", "models/real_rf.json"):
        assert (out / name).exists(), name
    for c in ("neutral", "happy", "fear"):
        assert len(list((out / "synth").glob(f"{c}_*.png"))) == 10
        assert len((out / f"ga_history_{c}.csv").read_text().splitlines()) == 3
    report = json.loads((out / "report.json").read_text())
    assert set(report["results"]) == {f"{s}/{m}" for s in ("real", "synthetic", "combined")
                                      for m in ("rf", "dt", "gbt")}
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["method"] == "proposed" and metrics["embedding_k"] == 4


def test_resolved_config_reproduces_csv_outputs(pipeline_run):
    root, _ = pipeline_run
    resolved = root / "a/config_resolved.json"
    assert cli.main(["pipeline", "--config", str(resolved), "--out", str(root / "b")]) == 0
    names = ["losses.csv", "runs.csv", "features.csv"] + [f"ga_history_{c}.csv" for c in ("neutral", "happy", "fear")]
    for name in names:
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_classify_repeats_and_test_on(pipeline_run):
    root, _ = pipeline_run
    out = root / "a"
    assert cli.main(["classify", "--config", str(out / "config_resolved.json"), "--repeats", "4",
                     "--test-on", "synthetic"]) == 0
    rows = (out / "runs.csv").read_text().splitlines()
    assert rows[0] == ",".join(cli.RUN_COLUMNS)
    body = [r.split(",") for r in rows[1:]]
    assert len(body) == 4 * 3 * 3
    real_rf = [r for r in body if r[1] == "real" and r[2] == "rf"]
    assert [r[0] for r in real_rf] == ["0", "1", "2", "3"]
    assert {r[3] for r in body if r[1] == "synthetic"} == {"synthetic"}
    assert {r[3] for r in body if r[1] == "real"} == {"real"}
    report = json.loads((out / "report.json").read_text())
    assert report["repeats"] == 4 and report["test_on"] == "synthetic"


def test_baseline_methods_and_comparison(pipeline_run):
    root, _ = pipeline_run
    resolved = root / "a/config_resolved.json"
    for method in ("kde", "gmm"):
        assert cli.main(["pipeline", "--config", str(resolved), "--method", method,
                         "--out", str(root / method)]) == 0
        assert not (root / method / "checkpoint").exists()
        assert len(list((root / method / f"baseline_{method}").glob("*.png"))) == 30
    assert cli.main(["evaluate", "--out", str(root / "cmp"), str(root / "a"), str(root / "kde"),
                     str(root / "gmm")]) == 0
    lines = (root / "cmp/comparison_metrics.csv").read_text().splitlines()
    assert lines[0].startswith("run,method,fid")
    assert [line.split(",")[1] for line in lines[1:]] == ["proposed", "kde", "gmm"]
    assert len((root / "cmp/comparison_classify.csv").read_text().splitlines()) == 1 + 3 * 9
