import csv
import json
import subprocess
import sys

import pytest

from opera.cli import main

SMALL = """num_classes = 3
per_class = 12
dim = 6
backbone = 8,8
proj_hidden = 8
pred_hidden = 8
embed_dim = 4
head_hidden = 8
batch_size = 12
epochs = 3
probe_epochs = 10
ordering_samples = 100
"""


def _cfg(tmp_path, name="run", extra=""):
    path = tmp_path / f"{name}.cfg"
    path.write_text(SMALL + extra)
    return path


def _json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def test_verify_passes(capsys):
    assert main(["verify", "--trials", "20"]) == 0
    reports = _json_lines(capsys.readouterr().out)
    names = [r["check"] for r in reports]
    assert names == [
        "softmax_gradient_identity",
        "infonce_gradient_identity",
        "proposition1",
        "corollary1",
        "corollary2",
        "opera_end_to_end_gradient",
    ]
    assert all(r["passed"] for r in reports)


def test_verify_zero_trials_is_usage_error(capsys):
    assert main(["verify", "--trials", "0"]) == 2
    assert "trials" in capsys.readouterr().err


def test_verify_perturbed_gradient_fails(capsys):
    assert main(["verify", "--trials", "5", "--perturb-gradient", "1e-3"]) == 1
    failed = [r["check"] for r in _json_lines(capsys.readouterr().out) if not r["passed"]]
    assert "softmax_gradient_identity" in failed and "opera_end_to_end_gradient" in failed


def test_train_writes_artifacts(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["train", str(cfg), "--out", str(out)]) == 0
    for name in ("metrics.jsonl", "timing.jsonl", "final.ckpt", "config.resolved", "train.csv", "test.csv"):
        assert (out / name).exists()
    records = _json_lines((out / "metrics.jsonl").read_text())
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert set(records[0]) == {"epoch", "loss_total", "loss_self", "loss_full", "lr", "conflict_grad_max"}
    assert "epochs = 3" in (out / "config.resolved").read_text()


def test_train_is_deterministic(tmp_path):
    cfg = _cfg(tmp_path)
    main(["train", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", str(cfg), "--out", str(tmp_path / "b")])
    for name in ("metrics.jsonl", "final.ckpt", "config.resolved"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_output_directory_precedence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = _cfg(tmp_path, extra=f"out = {tmp_path / 'from_cfg'}\n")
    assert main(["train", str(cfg)]) == 0
    assert (tmp_path / "from_cfg" / "metrics.jsonl").exists()
    monkeypatch.setenv("OPERA_OUT", str(tmp_path / "from_env"))
    assert main(["train", str(cfg)]) == 0
    assert (tmp_path / "from_env" / "metrics.jsonl").exists()
    monkeypatch.delenv("OPERA_OUT")
    plain = _cfg(tmp_path, name="plain")
    assert main(["train", str(plain)]) == 0
    assert (tmp_path / "runs" / "plain" / "metrics.jsonl").exists()


def test_train_unknown_key(tmp_path, capsys):
    cfg = _cfg(tmp_path, extra="foo=1\n")
    assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "foo" in capsys.readouterr().err


def test_train_divergence_exit_code(tmp_path, capsys):
    cfg = _cfg(tmp_path, extra="lr = 1e200\nschedule = constant\n")
    assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "diverged" in capsys.readouterr().err


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main(["train", str(_cfg(tmp_path)), "--out", str(out)]) == 0
    return out


@pytest.mark.parametrize("protocol", ["probe", "knn", "ordering"])
def test_eval_protocols(trained, protocol, capsys):
    capsys.readouterr()
    args = ["eval", str(trained / "final.ckpt"), "--data", str(trained / "train.csv"), "--test", str(trained / "test.csv")]
    assert main(args + ["--protocol", protocol, "--samples", "200"]) == 0
    (result,) = _json_lines(capsys.readouterr().out)
    assert result["protocol"] == protocol
    if protocol == "ordering":
        for key in ("mean_same_instance", "mean_same_class", "mean_cross_class"):
            assert -1.0 <= result[key] <= 1.0
    else:
        assert 0.0 <= result["accuracy"] <= 1.0


def test_eval_from_config(trained, tmp_path, capsys):
    capsys.readouterr()
    assert main(["eval", str(trained / "final.ckpt"), "--config", str(tmp_path / "run.cfg"), "--protocol", "knn"]) == 0
    assert "accuracy" in _json_lines(capsys.readouterr().out)[0]


def test_eval_truncated_checkpoint(trained, tmp_path, capsys):
    text = (trained / "final.ckpt").read_text()
    bad = tmp_path / "bad.ckpt"
    bad.write_text(text[: len(text) // 3])
    assert main(["eval", str(bad), "--data", str(trained / "train.csv")]) == 2
    assert "line" in capsys.readouterr().err


def test_eval_shape_mismatch(trained, tmp_path, capsys):
    data = tmp_path / "wide.csv"
    data.write_text("f0,f1,instance_id,class_id\n0,1,0,0\n1,0,1,1\n0.5,0.5,2,2\n")
    assert main(["eval", str(trained / "final.ckpt"), "--data", str(data)]) == 2
    assert "width" in capsys.readouterr().err


def test_eval_needs_dataset(trained):
    assert main(["eval", str(trained / "final.ckpt")]) == 2


def test_compare_rows(tmp_path, capsys):
    a = _cfg(tmp_path, "opera_small", "mode = opera\n")
    b = _cfg(tmp_path, "naive_small", "mode = naive\n")
    out = tmp_path / "cmp"
    assert main(["compare", str(a), str(b), "--out", str(out)]) == 0
    with open(out / "compare.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == ["opera", "naive"]
    for r in rows:
        assert 0.0 <= float(r["probe_accuracy"]) <= 1.0
    assert capsys.readouterr().out.splitlines()[0].startswith("config,mode,arrangement")


def test_compare_flushes_partial_rows(tmp_path):
    good = _cfg(tmp_path, "good")
    bad = _cfg(tmp_path, "bad", "lr = 1e200\nschedule = constant\n")
    out = tmp_path / "cmp"
    assert main(["compare", str(good), str(bad), "--out", str(out)]) == 3
    with open(out / "compare.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["config"].endswith("good.cfg")


def test_compare_needs_two_configs(tmp_path, capsys):
    assert main(["compare", str(_cfg(tmp_path))]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["eval", "x.ckpt", "--protocol", "nope"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "opera", "verify", "--trials", "0"], capture_output=True, text=True)
    assert proc.returncode == 2
