import csv

import pytest

from clsched import cli
from clsched.experiment import FailureBudgetExceeded
from clsched.surrogate import load_model

FAST = ["--set", "dataset.duration=4", "--set", "dataset.n_robots=3"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    samples, model = root / "s.csv", root / "models" / "m.json"
    assert cli.main(["gen-data", "--out", str(samples), "--count", "400", *FAST]) == 0
    assert cli.main(["train", "--data", str(samples), "--out", str(model), "--epochs", "3",
                     "--set", "model.train.hidden_units=6"]) == 0
    return samples, model


def test_gen_data_and_train(trained, capsys):
    samples, model = trained
    assert len(rows(samples)) == 401
    m = load_model(model)
    assert m.layer_sizes == [16, 6, 6, 6, 6, 1]
    hist = rows(model.with_suffix(".losses.csv"))
    assert hist[0] == ["epoch", "train_mse", "dev_mse"] and len(hist) == 4


def test_simulate_writes_outputs(trained, tmp_path, capsys):
    _, model = trained
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--policy", "dnn", "--model", str(model), "--seed", "2",
                     "--out", str(out), *FAST]) == 0
    for name in ("rmse.csv", "scatter_prediction.csv", "scatter_traceratio.csv", "comms.csv"):
        assert (out / name).exists()
    assert rows(out / "comms.csv")[1][0] == "dnn"
    assert len(rows(out / "rmse.csv")) == 1 + 41
    assert "average RMSE" in capsys.readouterr().out


def test_simulate_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("dataset:\n  duration: 2\n  n_robots: 3\nscheduler:\n  policy: greedy\n  q: 1\n")
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out),
                     "--set", "dataset.duration=3"]) == 0
    assert len(rows(out / "rmse.csv")) == 1 + 31
    assert rows(out / "comms.csv")[1][0] == "greedy"


def test_compare_requires_seed(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["compare", "--policies", "full,random"])
    assert exc.value.code == 1


def test_compare_runs(tmp_path, capsys):
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--seed", "3", "--n-seeds", "2", "--policies", "full,greedy,random",
                     "--out", str(out), *FAST]) == 0
    table = rows(out / "compare.csv")
    assert len(table) == 1 + 3 * 2
    assert {r[0] for r in table[1:]} == {"full", "greedy", "random"}
    assert "beats random" in capsys.readouterr().out


def test_ingest_round_trip(tmp_path, capsys):
    d = tmp_path / "utias"
    assert cli.main(["ingest", "--write", str(d), *FAST]) == 0
    first = capsys.readouterr().out
    assert cli.main(["ingest", "--data", str(d)]) == 0
    again = capsys.readouterr().out
    assert first.splitlines()[:3] == again.splitlines()[:3]


def test_predict_scatter_from_samples(trained, tmp_path, capsys):
    samples, model = trained
    out = tmp_path / "ps"
    assert cli.main(["predict-scatter", "--data", str(samples), "--model", str(model),
                     "--out", str(out)]) == 0
    assert len(rows(out / "scatter_prediction.csv")) == 401
    assert "Pearson" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["simulate", "--set", "scheduler.policy=bogus"],
    ["simulate", "--set", "noise.sigma_range=abc"],
    ["simulate", "--set", "nosuch.key=1"],
    ["simulate", "--set", "missing-equals"],
    ["simulate", "--config", "/nonexistent/c.yaml"],
    ["simulate", "--policy", "dnn"],
    ["compare", "--seed", "0", "--policies", "full,best"],
])
def test_config_errors_exit_1(argv, capsys):
    assert cli.main(argv) == 1
    assert "config error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    assert cli.main(["ingest", "--data", str(tmp_path / "nope")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,sample,file\n")
    assert cli.main(["train", "--data", str(bad), "--out", str(tmp_path / "m.json")]) == 2
    corrupt = tmp_path / "m.json"
    corrupt.write_text("{broken")
    assert cli.main(["simulate", "--policy", "dnn", "--model", str(corrupt), *FAST]) == 2


def test_numerical_failure_exit_3(monkeypatch, capsys):
    def boom(*a, **k):
        raise FailureBudgetExceeded("101 numerical failures exceed the budget")

    monkeypatch.setattr(cli, "run_simulation", boom)
    assert cli.main(["simulate", "--policy", "random", *FAST]) == 3
    assert "numerical failure" in capsys.readouterr().err
