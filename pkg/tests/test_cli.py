import csv
import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from attnpool.cli import main
from attnpool.data import load_dataset
from attnpool.model import ModelConfig
from attnpool.training import TrainConfig, init_state, load_checkpoint, oracle_params, save_checkpoint

TINY = {"num_classes": 2, "grid": [2, 2], "dim": 4, "frames": 8, "key_frames": 2, "videos_per_class": 6, "seed": 3}
TRAIN_FLAGS = ["--set", "model.dim=4", "--set", "model.num_classes=2", "--set", "model.hidden=8",
               "--set", "train.batch_size=4", "--frames", "4"]


def _spec_file(tmp_path, **over):
    p = tmp_path / "spec.yaml"
    p.write_text(yaml.safe_dump({**TINY, **over}))
    return p


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump(TINY))
    assert main(["synth", "--config", str(spec), "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--heads", "2", "--reg", "1"] + TRAIN_FLAGS) == 0
    return out


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_synth_outputs_and_determinism(tmp_path, data_dir):
    assert (data_dir / "train.json").is_file() and (data_dir / "val.json").is_file()
    assert len(list((data_dir / "train").glob("*.feat"))) == 12
    assert (data_dir / "config_source.yaml").read_text() == yaml.safe_dump(TINY)
    assert main(["synth", "--config", str(_spec_file(tmp_path)), "--out", str(tmp_path / "again")]) == 0
    assert _tree_equal(data_dir, tmp_path / "again")


def test_synth_bad_spec_exits_2(tmp_path, capsys):
    assert main(["synth", "--config", str(_spec_file(tmp_path, key_frames=9)), "--out", str(tmp_path / "x")]) == 2
    assert "key_frames" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path / "y"), "--set", "colour=blue"]) == 2


def test_train_outputs(trained):
    rows = list(csv.DictReader(open(trained / "log.csv")))
    assert len(rows) == 30
    assert list(rows[0]) == ["epoch", "lr_head", "lr_backbone", "train_loss", "train_acc",
                             "val_acc_tp", "val_acc_avg", "val_acc_max", "val_acc_indep"]
    echo = json.loads((trained / "config.json").read_text())
    assert echo["model"]["heads"] == 2 and echo["train"]["reg"] == 1.0
    assert (trained / "checkpoint.apck").is_file()
    assert (trained / "log.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    state, model, cfg = load_checkpoint(trained / "checkpoint.apck")
    assert state.epoch == 30 and model.heads == 2 and cfg.reg == 1.0


def test_train_resume_matches_uninterrupted(tmp_path, data_dir, trained):
    out = tmp_path / "resumed"
    args = ["train", "--data", str(data_dir), "--out", str(out), "--heads", "2", "--reg", "1"] + TRAIN_FLAGS
    assert main(args + ["--stop-after", "7"]) == 0
    assert load_checkpoint(out / "checkpoint.apck")[0].epoch == 7
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--resume"]) == 0
    assert (out / "checkpoint.apck").read_bytes() == (trained / "checkpoint.apck").read_bytes()
    assert (out / "log.csv").read_bytes() == (trained / "log.csv").read_bytes()


def test_train_usage_errors(tmp_path, data_dir):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "a"), "--resume"]) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "b")]) == 2  # dim mismatch
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "c")] + TRAIN_FLAGS) == 2


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_train_divergence_exits_3(tmp_path, data_dir):
    out = tmp_path / "boom"
    rc = main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "3",
               "--set", "train.lr_head=1e300", "--set", "train.momentum=0"] + TRAIN_FLAGS)
    assert rc == 3
    diag = json.loads((out / "diagnostics.json").read_text())
    assert {"epoch", "batch", "param_norms"} <= set(diag)


def test_config_file_and_overrides(tmp_path, data_dir):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("model:\n  dim: 4\n  num_classes: 2\n  hidden: 8\ntrain:\n  lr_head: 5e-2\n  epochs: 1\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out),
                 "--set", "train.weight_decay=1e-4", "--frames", "4"]) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["train"]["lr_head"] == 0.05 and echo["train"]["weight_decay"] == 1e-4
    assert echo["train"]["frames"] == 4
    assert (out / "config_source.yaml").read_bytes() == cfg.read_bytes()


def _oracle_checkpoint(tmp_path, data_dir):
    ds = load_dataset(data_dir / "val.json")
    model = ModelConfig(num_classes=2, dim=4, hidden=8, heads=2)
    cfg = TrainConfig()
    state = init_state(model, cfg)
    state.params = oracle_params(ds, model)
    path = tmp_path / "oracle.apck"
    save_checkpoint(path, state, model, cfg)
    return path


def test_eval_oracle_on_noiseless_set(tmp_path, capsys):
    assert main(["synth", "--config", str(_spec_file(tmp_path, noise=0.0)), "--out", str(tmp_path / "clean")]) == 0
    ckpt = _oracle_checkpoint(tmp_path, tmp_path / "clean")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "clean"), "--pooling", "all"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"tp": 1.0, "avg": 1.0, "max": 1.0, "indep": 1.0}


def test_eval_reports(tmp_path, data_dir, trained):
    ckpt = str(trained / "checkpoint.apck")
    for name in ("a", "b"):
        assert main(["eval", "--checkpoint", ckpt, "--data", str(data_dir), "--pooling", "all",
                     "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["eval_avg.json", "eval_indep.json", "eval_max.json", "eval_tp.json"]
    assert _tree_equal(tmp_path / "a", tmp_path / "b")
    rep = json.loads((tmp_path / "a" / "eval_tp.json").read_text())
    conf = np.array(rep["confusion"])
    assert conf.sum() == 12 and rep["accuracy"] == np.trace(conf) / 12


def test_eval_unknown_pooling_exits_2(trained, data_dir):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", str(trained / "checkpoint.apck"), "--data", str(data_dir), "--pooling", "median"])
    assert exc.value.code == 2


def test_eval_bad_checkpoint_exits_2(tmp_path, data_dir):
    bad = tmp_path / "bad.apck"
    bad.write_bytes(b"nope")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(data_dir)]) == 2


def test_inspect_outputs(tmp_path, data_dir, trained):
    out = tmp_path / "insp"
    assert main(["inspect", "--checkpoint", str(trained / "checkpoint.apck"), "--data", str(data_dir),
                 "--video", "val_00003", "--out", str(out)]) == 0
    F, N = 8, 2
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == F * N
    raw = (out / "0_1.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n") and len(raw) == len(b"P5\n2 2\n255\n") + 4
    probs = list(csv.reader(open(out / "probs.csv")))
    assert probs[0] == ["frame", "class0", "class1"] and len(probs) == F + 1
    for row in probs[1:]:
        assert abs(sum(float(v) for v in row[1:]) - 1) <= 1e-9
    imp = list(csv.DictReader(open(out / "importance.csv")))
    assert abs(sum(float(r["probability"]) for r in imp) - 1) <= 1e-9
    assert max(float(r["display_pct"]) for r in imp) == 100.0
    att = list(csv.reader(open(out / "attention.csv")))
    assert len(att) == F * N + 1
    assert (out / "inspect.png").is_file()


def test_inspect_unknown_video(tmp_path, data_dir, trained):
    assert main(["inspect", "--checkpoint", str(trained / "checkpoint.apck"), "--data", str(data_dir),
                 "--video", "nope", "--out", str(tmp_path)]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--size", "tiny"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["passed"]
    groups = doc["reports"]["reg=1"]["max_rel_error"]
    assert {"attention.W_s1", "attention.W_s2", "classifier.W_sm"} <= set(groups)
    assert all(v <= 1e-4 for v in groups.values())


def test_gradcheck_corrupted(capsys):
    assert main(["gradcheck", "--corrupt"]) == 1
    assert "FAIL" in capsys.readouterr().err


def test_thread_cap_does_not_change_results(tmp_path, data_dir):
    outs = []
    for threads in ("1", "4"):
        out = tmp_path / f"t{threads}"
        cmd = [sys.executable, "-m", "attnpool.cli", "train", "--data", str(data_dir), "--out", str(out),
               "--epochs", "2"] + TRAIN_FLAGS
        env = {"ATTNPOOL_THREADS": threads, "PATH": "/usr/bin:/bin"}
        subprocess.run(cmd, check=True, env=env, capture_output=True)
        outs.append(out)
    a, b = outs
    assert (a / "checkpoint.apck").read_bytes() == (b / "checkpoint.apck").read_bytes()
    assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()


def test_console_script_usage_error():
    proc = subprocess.run([sys.executable, "-m", "attnpool.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == 2
