import csv
import subprocess
import sys

import pytest

from rtnag import cohort as C
from rtnag.cli import main

SMALL = ["--set", "epochs=1", "--set", "folds=2", "--set", "model.q=3",
         "--set", "model.ode_hidden=8"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "cohort.jsonl"
    assert main(["generate", "--out", str(path), "--seed", "2", "--n-subjects", "12"]) == 0
    return path


def test_generate_flags(tmp_path):
    out = tmp_path / "v.jsonl"
    code = main(["generate", "--out", str(out), "--seed", "1", "--n-subjects", "10",
                 "--volume-extent", "8", "--drop-prob", "0.2", "--rho-range", "0.4,1.0"])
    assert code == 0
    co = C.read_dataset(out)
    assert co.payload_kind == "volume" and co.meta["rho_range"] == [0.4, 1.0]
    assert co.meta["drop_prob"] == 0.2


def test_generate_shifted_and_extra_missing(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["generate", "--out", str(a), "--seed", "1", "--n-subjects", "30", "--shifted"])
    main(["generate", "--out", str(b), "--seed", "1", "--n-subjects", "30", "--shifted",
          "--extra-missing", "0.5"])
    assert C.read_dataset(a).meta["shifted"] is True
    assert C.read_dataset(b).n_visits() < C.read_dataset(a).n_visits()


def test_generate_invalid_config(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "x"), "--seed", "0",
                 "--n-subjects", "3"]) == 2
    assert "n_subjects" in capsys.readouterr().err


def test_train_then_evaluate(tmp_path, data, capsys):
    model, curve = tmp_path / "m.bin", tmp_path / "loss.csv"
    assert main(["train", "--seed", "0", "--data", str(data), "--out", str(model),
                 "--loss-csv", str(curve), "--set", "epochs=2", "--set", "model.q=3"]) == 0
    assert curve.read_text().splitlines()[0] == "epoch,loss"
    metrics = tmp_path / "eval.csv"
    assert main(["evaluate", "--model", str(model), "--data", str(data),
                 "--out", str(metrics)]) == 0
    rows = list(csv.DictReader(metrics.open()))
    assert len(rows) == 1 and 0 <= float(rows[0]["mauc"]) <= 1


def test_shifted_evaluation_without_retraining(tmp_path, data):
    model, shifted = tmp_path / "m.bin", tmp_path / "s.jsonl"
    main(["train", "--seed", "0", "--data", str(data), "--out", str(model),
          "--set", "epochs=1", "--set", "model.q=3"])
    main(["generate", "--out", str(shifted), "--seed", "9", "--n-subjects", "12", "--shifted"])
    assert main(["evaluate", "--model", str(model), "--data", str(shifted)]) == 0


def test_seed_is_mandatory(data, capsys):
    with pytest.raises(SystemExit) as info:
        main(["cv", "--data", str(data), "--out", "x"])
    assert info.value.code == 2
    assert "--seed" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, data, capsys):
    code = main(["cv", "--seed", "0", "--data", str(data), "--out", str(tmp_path),
                 "--set", "model.bogus=1"])
    assert code == 2


def test_missing_dataset(tmp_path):
    assert main(["cv", "--seed", "0", "--data", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path)]) == 4


def test_malformed_dataset(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    assert main(["cv", "--seed", "0", "--data", str(bad), "--out", str(tmp_path)]) == 4


def test_divergence_exit_code(tmp_path, data):
    code = main(["train", "--seed", "0", "--data", str(data), "--out", str(tmp_path / "m"),
                 "--set", "lr=1e300", "--set", "epochs=3", "--set", "model.q=3"])
    assert code == 3


def test_config_file_and_cv_report(tmp_path, data):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# small run\nepochs = 1\nfolds = 2\nmodel.q = 3\nmodel.ode_hidden = 8\n")
    out = tmp_path / "report"
    assert main(["cv", "--config", str(cfg), "--seed", "0", "--data", str(data),
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [r["fold"] for r in rows] == ["0", "1"]
    assert (out / "loss_cv_full_fold0.csv").exists() and (out / "summary.txt").exists()


def test_ablate_and_sweeps(tmp_path, data):
    assert main(["ablate", "--seed", "0", "--data", str(data), "--out", str(tmp_path / "a"),
                 "--cases", "full", "no-argru", *SMALL]) == 0
    assert main(["sweep-missing", "--seed", "0", "--data", str(data),
                 "--out", str(tmp_path / "m"), "--rates", "0", "0.3", *SMALL]) == 0
    assert main(["sweep-horizon", "--seed", "0", "--data", str(data),
                 "--out", str(tmp_path / "h"), "--years", "3", "5", *SMALL]) == 0
    cases = {r["case"] for r in csv.DictReader((tmp_path / "m" / "metrics.csv").open())}
    assert cases == {"rate=0", "rate=0.3"}
    assert (tmp_path / "m" / "loss_missing_rate0.3_fold1.csv").exists()


def test_gradcheck_subcommand():
    proc = subprocess.run([sys.executable, "-m", "rtnag.cli", "gradcheck", "--trials", "2"],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = proc.stdout.splitlines()
    assert all(line.startswith("PASS") for line in lines) and any("end-to-end" in line for line in lines)
