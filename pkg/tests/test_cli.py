import json
import subprocess
import sys

import pytest
import yaml

from dpkws.cli import main

SMALL = ["--positives", "12", "--negatives", "12", "--eval-positives", "6", "--eval-negatives", "10",
         "--n-noise-clips", "3"]
TINY_NET = ["--hidden", "8", "--n-layers", "2", "--batch-utterances", "16"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("c") / "corpus"
    assert main(["gen", "--out", str(out), "--seed", "7", *SMALL]) == 0
    return out


def _manifest(path):
    return [json.loads(x) for x in (path / "manifest.jsonl").read_text().splitlines()]


def test_gen_is_reproducible(tmp_path, corpus):
    assert main(["gen", "--out", str(tmp_path / "b"), "--seed", "7", *SMALL]) == 0
    assert (tmp_path / "b/manifest.jsonl").read_bytes() == (corpus / "manifest.jsonl").read_bytes()


def test_gen_counts_and_clean_only(tmp_path):
    out = tmp_path / "clean"
    assert main(["gen", "--out", str(out), "--clean-only", "--positives", "10", "--negatives", "7",
                 "--eval-positives", "0", "--eval-negatives", "0"]) == 0
    rows = _manifest(out)
    assert len(rows) == 17
    assert sum(r["is_positive"] for r in rows) == 10
    assert all(r["provenance"]["kind"] == "clean" for r in rows)
    assert yaml.safe_load((out / "config.yaml").read_text())["clean_only"] is True


def test_gen_multicondition_rows(corpus):
    rows = _manifest(corpus)
    assert len(rows) == 2 * (12 + 12 + 6 + 10)
    assert sum(r["provenance"]["kind"] == "noisy" for r in rows) == len(rows) // 2


def test_train_baseline_no_sigmas(tmp_path, corpus):
    run = tmp_path / "base"
    assert main(["train", "--corpus", str(corpus), "--run-dir", str(run), "--mode", "baseline",
                 "--max-epochs", "1", *TINY_NET]) == 0
    assert (run / "model.bin").exists() and (run / "model.bin.json").exists()
    assert not (run / "sigmas").exists()
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 1


@pytest.mark.parametrize("mode,data,want", [
    ("joint", "clean", dict(class_lr=0.001, class_init=1.0, instance_lr=0.1, instance_init=0.01,
                            weight_decay=0.01)),
    ("class", "noisy", dict(class_lr=0.001, class_init=1.0, weight_decay=0.01)),
    ("instance", "noisy", dict(instance_lr=0.01, instance_init=1.0, weight_decay=0.1)),
])
def test_train_table1_defaults(tmp_path, corpus, mode, data, want):
    run = tmp_path / mode
    assert main(["train", "--corpus", str(corpus), "--run-dir", str(run), "--mode", mode,
                 "--data", data, "--max-epochs", "1", *TINY_NET]) == 0
    resolved = yaml.safe_load((run / "config.yaml").read_text())
    hyper = json.loads((run / "model.bin.json").read_text())["hyperparameters"]["train_config"]
    for k, v in want.items():
        assert resolved[k] == v
        assert hyper[k] == v
    assert sorted(p.name for p in (run / "sigmas").iterdir()) == ["epoch_000.csv", "epoch_001.csv"]


def test_flag_overrides_table1(tmp_path, corpus):
    run = tmp_path / "ov"
    assert main(["train", "--corpus", str(corpus), "--run-dir", str(run), "--mode", "class",
                 "--class-lr", "0.5", "--max-epochs", "1", *TINY_NET]) == 0
    assert yaml.safe_load((run / "config.yaml").read_text())["class_lr"] == 0.5


def test_rerun_from_resolved_config_is_bit_identical(tmp_path, corpus):
    a = tmp_path / "a"
    assert main(["train", "--corpus", str(corpus), "--run-dir", str(a), "--mode", "joint",
                 "--max-epochs", "2", *TINY_NET]) == 0
    cfg = yaml.safe_load((a / "config.yaml").read_text())
    cfg["run_dir"] = str(tmp_path / "b")
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(tmp_path / "cfg.yaml")]) == 0
    b = tmp_path / "b"
    assert (a / "model.bin").read_bytes() == (b / "model.bin").read_bytes()
    assert (a / "train_log.jsonl").read_bytes() == (b / "train_log.jsonl").read_bytes()
    assert (a / "sigmas/epoch_002.csv").read_bytes() == (b / "sigmas/epoch_002.csv").read_bytes()


def test_eval_and_report(tmp_path, corpus):
    run = tmp_path / "r"
    assert main(["train", "--corpus", str(corpus), "--run-dir", str(run), "--mode", "joint",
                 "--max-epochs", "2", *TINY_NET]) == 0
    assert main(["eval", "--corpus", str(corpus), "--run-dir", str(run)]) == 0
    m10 = json.loads((run / "metrics.json").read_text())
    assert m10["fa_per_hour"] == 10.0
    assert (run / "det.csv").read_text().startswith("fa_per_hour,frr,threshold")
    assert main(["eval", "--corpus", str(corpus), "--run-dir", str(run), "--fa-per-hour", "1"]) == 0
    m1 = json.loads((run / "metrics.json").read_text())
    assert m1["frr"] >= m10["frr"]
    assert m1["threshold"] >= m10["threshold"]
    assert main(["report", "--corpus", str(corpus), "--run-dir", str(run), "--svg"]) == 0
    header = (run / "report.csv").read_text().splitlines()[0]
    assert "instance_noisy_mean" in header and "band3_hi" in header
    assert (run / "report.svg").exists()


def test_eval_on_training_positives_of_converged_toy_run(tmp_path):
    c = tmp_path / "c"
    assert main(["gen", "--out", str(c), "--clean-only", "--positives", "40", "--negatives", "40",
                 "--eval-positives", "0", "--eval-negatives", "0", "--near-miss-fraction", "0",
                 "--cv-fraction", "0.1"]) == 0
    run = tmp_path / "r"
    assert main(["train", "--corpus", str(c), "--run-dir", str(run), "--max-epochs", "15",
                 "--hidden", "32", "--n-layers", "2", "--batch-utterances", "8"]) == 0
    assert main(["eval", "--corpus", str(c), "--run-dir", str(run), "--split", "train"]) == 0
    assert json.loads((run / "metrics.json").read_text())["frr"] <= 0.05


def test_exit_codes(tmp_path, corpus):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mode: joint\nlearning_rate: 3\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["gen", "--out", str(tmp_path / "x"), "--positives", "0", "--negatives", "0"]) == 2
    assert main(["train", "--corpus", str(tmp_path / "nowhere"), "--run-dir", str(tmp_path / "r")]) == 3
    assert main(["eval", "--corpus", str(corpus), "--run-dir", str(tmp_path / "empty")]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mode", "bogus"])
    assert exc.value.code == 2


def test_joint_init_sum_rejected(tmp_path, corpus):
    assert main(["train", "--corpus", str(corpus), "--run-dir", str(tmp_path / "r"),
                 "--mode", "joint", "--instance-init", "0.5", "--max-epochs", "1"]) == 2


def test_lock_file_blocks_second_writer(tmp_path, corpus):
    run = tmp_path / "locked"
    run.mkdir()
    (run / ".lock").write_text("123")
    assert main(["train", "--corpus", str(corpus), "--run-dir", str(run), "--max-epochs", "1",
                 *TINY_NET]) == 3
    assert not (run / "model.bin").exists()


def test_run_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DPKWS_RUN_ROOT", str(tmp_path))
    assert main(["gen", "--out", "rel", "--clean-only", "--positives", "3", "--negatives", "3",
                 "--eval-positives", "0", "--eval-negatives", "0"]) == 0
    assert (tmp_path / "rel/manifest.jsonl").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dpkws", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "gen" in out.stdout and "report" in out.stdout
