import json
import logging
import os
from pathlib import Path

import numpy as np
import pytest

from attnp.cli import UsageError, main, read_config_file, resolve_config


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--task", "1", "--sizes", "60,20,20", "--seed", "3",
                 "--out", str(out)]) == 0
    return out


def _tiny_cfg(tmp_path, data_dir, **extra):
    lines = [f"data = {data_dir / 'task1'}", "epochs = 2", "hidden_dim = 8", "embed_dim = 6",
             "batch_size = 16  # small"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_gen_data_counts_and_reproducibility(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--task", "1", "--sizes", "1000,200,200", "--out", str(a)]) == 0
    assert "1400 instances" in capsys.readouterr().out
    assert main(["gen-data", "--task", "1", "--sizes", "1000,200,200", "--out", str(b)]) == 0
    lines = 0
    for split in ("train", "valid", "test"):
        fa = a / f"task1.{split}.jsonl"
        assert fa.read_bytes() == (b / f"task1.{split}.jsonl").read_bytes()
        lines += len(fa.read_text().splitlines())
    assert lines == 1400
    assert json.loads((a / "task1.meta.json").read_text())["task"] == 1


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_gen_data_unwritable(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        assert main(["gen-data", "--sizes", "5,2,2", "--out", str(ro / "x")]) != 0
    finally:
        ro.chmod(0o700)


def test_gen_data_path_is_a_file(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--sizes", "5,2,2", "--out", str(blocker / "sub")]) != 0
    assert "cannot create" in capsys.readouterr().err


def test_gen_data_bad_sizes(tmp_path):
    assert main(["gen-data", "--sizes", "5,2", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--sizes", "a,b,c", "--out", str(tmp_path)]) == 2


def test_train_writes_outputs_and_is_reproducible(tmp_path, data_dir, capsys):
    cfg = _tiny_cfg(tmp_path, data_dir)
    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        code = main(["train", "--config", str(cfg), "--method", "attention_iat",
                     "--epsilon", "5", "--out", str(out)])
        assert code == 0
        runs.append(out)
    out = runs[0]
    assert {p.name for p in out.iterdir()} >= {"config.echo", "checkpoint", "metrics.jsonl",
                                                 "report.json", "heatmaps"}
    echo = (out / "config.echo").read_text()
    assert "method = attention_iat" in echo and "epsilon = 5.0" in echo
    assert "vocab_min_count = 1" in echo
    rows = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == list(range(1, len(rows) + 1))
    assert (out / "metrics.jsonl").read_bytes() == (runs[1] / "metrics.jsonl").read_bytes()
    report = json.loads((out / "report.json").read_text())
    assert report["metric_name"] == "accuracy" and report["split"] == "test"
    assert "test accuracy" in capsys.readouterr().out


def test_flags_override_file(tmp_path, data_dir):
    cfg = _tiny_cfg(tmp_path, data_dir, method="word_at")
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--method", "vanilla", "--epochs", "1",
                 "--out", str(out)]) == 0
    echo = (out / "config.echo").read_text()
    assert "method = vanilla" in echo and "epochs = 1" in echo


def test_vanilla_warns_about_epsilon(tmp_path, data_dir, caplog):
    cfg = _tiny_cfg(tmp_path, data_dir, epochs=1)
    with caplog.at_level(logging.WARNING, logger="attnp"):
        assert main(["train", "--config", str(cfg), "--method", "vanilla", "--epsilon", "5",
                     "--out", str(tmp_path / "v")]) == 0
    assert "ignores epsilon" in caplog.text


def test_train_missing_data(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")])
    assert code != 0
    assert "missing dataset" in capsys.readouterr().err


def test_unknown_config_keys_are_listed(tmp_path, data_dir, capsys):
    cfg = _tiny_cfg(tmp_path, data_dir, hiden_dim=3, colour="blue")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    err = capsys.readouterr().err
    assert "hiden_dim" in err and "colour" in err


def test_config_parsing():
    with pytest.raises(UsageError, match="epsilon"):
        resolve_config({"data": "x", "epsilon": "-1"}, {})
    with pytest.raises(UsageError, match="hidden_dim"):
        resolve_config({"data": "x", "hidden_dim": "7"}, {})
    with pytest.raises(UsageError, match="data"):
        resolve_config({}, {})
    cfg = resolve_config({"data": "x", "epsilon": "2"}, {"epsilon": "3"})
    assert cfg["epsilon"] == 3.0 and cfg["method"] == "vanilla"


def test_config_file_syntax(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlearning-rate = 0.01\n\nbad line\n")
    with pytest.raises(UsageError, match=":4"):
        read_config_file(str(path))
    with pytest.raises(UsageError):
        read_config_file(str(tmp_path / "missing.cfg"))


def test_evaluate_and_render(tmp_path, data_dir, capsys):
    cfg = _tiny_cfg(tmp_path, data_dir, epochs=1)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--method", "attention_at", "--out",
                 str(run)]) == 0
    capsys.readouterr()
    ckpt = str(run / "checkpoint")
    assert main(["evaluate", "--checkpoint", ckpt, "--data", str(data_dir / "task1"),
                 "--split", "valid", "--out", str(tmp_path / "ev")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_instances"] == 20

    html = tmp_path / "h" / "3.html"
    assert main(["render-attention", "--checkpoint", ckpt, "--data",
                 str(data_dir / "task1.test.jsonl"), "--index", "3", "--out", str(html)]) == 0
    table = capsys.readouterr().out.splitlines()[1:]
    attn = np.array([float(line.split()[1]) for line in table])
    assert abs(attn.sum() - 1.0) < 1e-5
    assert html.read_text().startswith("<!DOCTYPE html>")

    missing = tmp_path / "h" / "99.html"
    assert main(["render-attention", "--checkpoint", ckpt, "--data", str(data_dir / "task1"),
                 "--index", "99", "--out", str(missing)]) == 2
    assert "out of range" in capsys.readouterr().err
    assert not missing.exists()

    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope"), "--data",
                 str(data_dir / "task1")]) == 1


def test_sweep(tmp_path, data_dir, capsys):
    cfg = _tiny_cfg(tmp_path, data_dir, epochs=1, method="attention_at")
    assert main(["sweep-epsilon", "--config", str(cfg), "--trials", "0",
                 "--out", str(tmp_path / "s0")]) == 2
    out = tmp_path / "s"
    assert main(["sweep-epsilon", "--config", str(cfg), "--trials", "2", "--range", "5:5",
                 "--out", str(out)]) == 0
    rows = [json.loads(x) for x in (out / "sweep.jsonl").read_text().splitlines()]
    assert [r["epsilon"] for r in rows] == [5.0, 5.0]
    assert set(rows[0]) == {"epsilon", "valid_metric", "seed"}
    assert main(["sweep-epsilon", "--config", str(cfg), "--trials", "1", "--range", "9:2",
                 "--out", str(out)]) == 2
    assert main(["sweep-epsilon", "--config", str(cfg), "--trials", "1", "--method", "vanilla",
                 "--out", str(out)]) == 2


def test_console_script_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "attnp.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
