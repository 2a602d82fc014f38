import json

import pytest

from boxmil.cli import main
from boxmil.evalkit import read_report


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"n_train": 2, "n_val": 2, "height": 24, "width": 24,
                                "size_range": [4.0, 7.0]}))
    assert main(["gen-data", "--spec", str(spec), "--seed", "3", "--out", str(root / "data")]) == 0
    return root


def test_gen_data_writes_manifest_and_echo(dataset):
    data = dataset / "data"
    assert (data / "manifest.json").exists()
    echo = json.loads((data / "config_echo.json").read_text())
    assert echo["command"] == "gen-data" and echo["spec"]["seed"] == 3
    assert len(list((data / "samples").iterdir())) == 4


def test_train_then_eval_pipeline(dataset, capsys):
    run = dataset / "run"
    rc = main(["train", "--data", str(dataset / "data"), "--iterations", "20", "--seed", "1",
               "--bag-mode", "baseline", "--out", str(run)])
    assert rc == 0
    for name in ("checkpoint.json", "runlog.csv", "config_echo.json", "final.json", "loss_curve.png"):
        assert (run / name).exists(), name
    assert json.loads((run / "config_echo.json").read_text())["experiment"]["bag_mode"] == "baseline"

    rc = main(["eval", "--run", str(run), "--data", str(dataset / "data"), "--figures", "1"])
    assert rc == 0
    rows = read_report(run / "report.csv")
    assert rows[0]["n_samples"] == 2 and 0.0 <= rows[0]["mean_dice"] <= 1.0
    assert (run / "dice.png").exists() and (run / "pred_val_0000.png").exists()
    assert "mean Dice" in capsys.readouterr().out


def test_compare_writes_table_and_figure(dataset):
    cfg = dataset / "compare.json"
    cfg.write_text(json.dumps({
        "base": {"optim": {"iterations": 10, "lr": 0.01}},
        "methods": [{"name": "baseline", "bag_mode": "baseline", "angles": None},
                    {"name": "gen", "loss": {"bag_reduce": "alpha-softmax", "alpha": 6.0}}],
    }))
    out = dataset / "cmp"
    assert main(["compare", "--data", str(dataset / "data"), "--config", str(cfg), "--out", str(out)]) == 0
    assert [r["method"] for r in read_report(out / "report.csv")] == ["baseline", "gen"]
    assert (out / "dice.png").exists() and (out / "per_sample_gen.csv").exists()


def test_dump_bags_writes_one_overlay_per_angle_and_sample(dataset):
    out = dataset / "bags"
    rc = main(["dump-bags", "--data", str(dataset / "data"), "--angles=-40:40:20", "--out", str(out)])
    assert rc == 0
    assert len(list(out.glob("*.pgm"))) == 5 * 4
    assert (out / "train_0000_theta-40.pgm").exists()
    assert (out / "config_echo.json").exists()


def test_selftest_passes(tmp_path, capsys):
    assert main(["selftest", "--instances", "2", "--vectors", "500", "--out", str(tmp_path)]) == 0
    assert "checks passed" in capsys.readouterr().out
    assert (tmp_path / "selftest.txt").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--data", "x"],
    ["gen-data", "--out", "o", "--bogus-flag"],
    ["selftest", "--threads", "0"],
    ["compare", "--data", "d", "--out", "o"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1


def test_bad_config_json_is_a_usage_error(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text("{oops")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "byte" in capsys.readouterr().err


def test_bad_angles_are_a_usage_error(dataset, tmp_path):
    assert main(["dump-bags", "--data", str(dataset / "data"), "--angles", "1:2",
                 "--out", str(tmp_path)]) == 1


def test_missing_dataset_is_a_runtime_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2
    assert "manifest" in capsys.readouterr().err
