import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from adda_forge import cli
from adda_forge import losses
from adda_forge.checkpoint import load_checkpoint

TINY = """\
[data]
per_class = 30
[model]
hidden = 8
disc_hidden = 8
[adapt]
step1_iters = 60
step1_batch = 16
step2_iters = 12
step2_batch = 16
val_every = 4
[sweep]
z_values = 0.7, 0.85, 1.0
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_metrics_summary_and_checkpoints(config, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(config), "--out-dir", str(out)]) == 0
    metrics = rows(out / "metrics.csv")
    assert list(metrics[0]) == cli.METRICS_HEADER
    assert [int(r["iteration"]) for r in metrics] == list(range(1, 13))
    assert metrics[3]["val_accuracy"] != "" and metrics[0]["val_accuracy"] == ""
    summary = cli.read_summary(out / "summary.txt")
    for key in ("final_accuracy", "source_only_accuracy", "val_accuracy", "seed"):
        assert key in summary
    assert not any("wall" in k for k in summary)
    for name in ("source", "target", "discriminator"):
        load_checkpoint(out / "checkpoints" / f"{name}.ckpt")


def test_run_is_deterministic_per_seed(config, tmp_path):
    for name in ("a", "b"):
        cli.main(["run", "--config", str(config), "--out-dir", str(tmp_path / name), "--seed", "3"])
    a, _ = load_checkpoint(tmp_path / "a" / "checkpoints" / "target.ckpt")
    b, _ = load_checkpoint(tmp_path / "b" / "checkpoints" / "target.ckpt")
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    assert cli.read_summary(tmp_path / "a" / "summary.txt")["seed"] == "3"


def test_run_from_source_checkpoint_skips_pretraining(config, tmp_path):
    assert cli.main(["pretrain", "--config", str(config), "--out-dir", str(tmp_path / "p")]) == 0
    ckpt = tmp_path / "p" / "checkpoints" / "source.ckpt"
    assert cli.main(["run", "--config", str(config), "--out-dir", str(tmp_path / "r"),
                     "--checkpoint", str(ckpt)]) == 0
    first, _ = load_checkpoint(ckpt)
    saved, _ = load_checkpoint(tmp_path / "r" / "checkpoints" / "source.ckpt")
    assert all(np.array_equal(x, y) for x, y in zip(first.params(), saved.params()))


def test_infer_and_bag(config, tmp_path):
    cli.main(["run", "--config", str(config), "--out-dir", str(tmp_path / "r")])
    target = str(tmp_path / "r" / "checkpoints" / "target.ckpt")
    assert cli.main(["infer", "--config", str(config), "--out-dir", str(tmp_path / "i"),
                     "--checkpoint", target]) == 0
    assert cli.main(["bag", "--config", str(config), "--out-dir", str(tmp_path / "b"),
                     "--checkpoint", target, "--checkpoint", target]) == 0
    single = [r["prediction"] for r in rows(tmp_path / "i" / "predictions.csv")]
    bagged = [r["prediction"] for r in rows(tmp_path / "b" / "predictions.csv")]
    assert single == bagged


def test_bag_needs_two_checkpoints(config, tmp_path, capsys):
    assert cli.main(["bag", "--config", str(config), "--out-dir", str(tmp_path)]) == 2
    assert "two --checkpoint" in capsys.readouterr().err


def test_missing_dataset_exits_2_naming_key(tmp_path, capsys):
    path = tmp_path / "digits.ini"
    path.write_text("[data]\nkind = idx\nsource_images = s\nsource_labels = l\n")
    assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 2
    assert "target_images" in capsys.readouterr().err


def test_bad_config_exits_2_with_line(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[adapt]\nz = 0.7\nlearning_rate = 1\n")
    assert cli.main(["run", "--config", str(path)]) == 2
    assert "bad.ini:3:" in capsys.readouterr().err


def test_empty_ablation_writes_header_only(config, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(config), "--out-dir", str(out)]) == 0
    assert (out / "ablation.csv").read_text().strip() == ",".join(cli.ABLATION_HEADER)


def test_ablation_marks_invalid_pairings(config, tmp_path, capsys):
    config.write_text(TINY + "[ablate]\ndisc_variants = REC, ADDA\nenc_variants = MMD_PQ\n"
                             "target_reg = false, true\nseeds = 0, 1\n")
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(config), "--out-dir", str(out)]) == 0
    table = rows(out / "ablation.csv")
    assert len(table) == 4
    for r in table:
        assert r["seeds"] == "0;1"
        invalid = r["disc_variant"] == "ADDA"
        assert math.isnan(float(r["mean_acc"])) == invalid
        if not invalid:
            assert 0.0 <= float(r["mean_acc"]) <= 1.0 and float(r["std_acc"]) >= 0.0
    assert "ADDA x MMD_PQ" in capsys.readouterr().err
    assert "source_only_mean_acc" in cli.read_summary(out / "summary.txt")


def test_ablation_workers_match_serial(config, tmp_path, monkeypatch):
    config.write_text(TINY + "[ablate]\ndisc_variants = REC, JOINT\nenc_variants = MMD_PQ\nseeds = 0\n")
    monkeypatch.setenv("ADDA_FORGE_THREADS", "2")
    cli.main(["ablate", "--config", str(config), "--out-dir", str(tmp_path / "par"), "--workers", "4"])
    cli.main(["ablate", "--config", str(config), "--out-dir", str(tmp_path / "ser")])
    assert rows(tmp_path / "par" / "ablation.csv") == rows(tmp_path / "ser" / "ablation.csv")


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("ADDA_FORGE_THREADS", "3")
    assert cli._worker_cap(8) == 3
    monkeypatch.delenv("ADDA_FORGE_THREADS")
    assert cli._worker_cap(8) == 8
    assert cli._worker_cap(0) == 1


def test_sweep_writes_one_row_per_z(config, tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep-z", "--config", str(config), "--out-dir", str(out)]) == 0
    table = rows(out / "sweep_z.csv")
    assert [float(r["z"]) for r in table] == [0.7, 0.85, 1.0]
    assert all(0.0 <= float(r["val_accuracy"]) <= 1.0 for r in table)
    assert cli.main(["sweep-z", "--config", str(config), "--out-dir", str(out), "--z", "0.5,1"]) == 0
    assert len(rows(out / "sweep_z.csv")) == 2


def test_csv_log_rejects_foreign_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(cli.ConfigError):
        cli.CsvLog(path, ["x", "y"])
    log = cli.CsvLog(path, ["a", "b"])
    log.append({"a": 3, "b": None})
    assert path.read_text() == "a,b\n1,2\n3,\n"


def test_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "grad enc-loss MMD_PQ" in out


def test_verify_names_a_broken_loss(monkeypatch, capsys):
    real = losses.tgt_pseudo

    def broken(h_d, q):
        value, grads = real(h_d, q)
        return value, {k: 1.5 * g for k, g in grads.items()}

    monkeypatch.setattr(losses, "tgt_pseudo", broken)
    assert cli.main(["verify"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  grad enc-loss PSEUDO" in out
    assert "FAIL  grad enc-loss MAX" not in out


def test_repeated_run_gives_identical_summary(config, tmp_path):
    for name in ("a", "b"):
        cli.main(["run", "--config", str(config), "--out-dir", str(tmp_path / name)])
    assert (tmp_path / "a" / "summary.txt").read_text() == (tmp_path / "b" / "summary.txt").read_text()


def test_sweep_at_one_equals_uncorrupted_run(config, tmp_path):
    cli.main(["sweep-z", "--config", str(config), "--out-dir", str(tmp_path / "sw"), "--z", "1.0"])
    plain = tmp_path / "plain.ini"
    plain.write_text(TINY.replace("[adapt]\n", "[adapt]\ncorrupt = false\n"))
    cli.main(["run", "--config", str(plain), "--out-dir", str(tmp_path / "run")])
    swept = rows(tmp_path / "sw" / "sweep_z.csv")
    assert len(swept) == 1
    assert float(swept[0]["val_accuracy"]) == float(cli.read_summary(tmp_path / "run" / "summary.txt")["val_accuracy"])


def test_minimal_demo_config_runs_quickly(tmp_path):
    config = Path(__file__).resolve().parents[1] / "demos" / "configs" / "minimal.ini"
    t0 = time.perf_counter()
    assert cli.main(["run", "--config", str(config), "--out-dir", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 120
    assert "final_accuracy" in cli.read_summary(tmp_path / "summary.txt")
