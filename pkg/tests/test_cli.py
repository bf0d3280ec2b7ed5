import csv
import shutil
import subprocess
import sys

import numpy as np
import pytest

from sfimos import nncore as nn
from sfimos.cli import join_predictions, load_fold_models, main, parse_config_text, UsageError
from sfimos.data import load_manifest, write_manifest
from sfimos.metrics import evaluate_all
from sfimos.models import denormalize_score, predict_listener_score
from sfimos.signal import Waveform, read_wav, write_wav

TINY = """
# small enough for unit tests
channels = 8
n_rff = 16
naf_hidden = 32
kd_batch = 4
kd_epochs = 2
kd_max_steps = 3
kd_utterances = 8
crop_s = 0.25
epochs = 2
final_batch = 20
lr = 1e-3
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "data"), "--seed", "4", "--duration", "0.25"]) == 0
    records = load_manifest(root / "data" / "manifest.csv")
    keep_sys = sorted({r.system_id for r in records})[::3][:6]
    by_sys = {}
    small = []
    for r in records:
        if r.system_id in keep_sys:
            utts = by_sys.setdefault(r.system_id, [])
            if r.wav_path not in utts and len(utts) < 3:
                utts.append(r.wav_path)
            if r.wav_path in utts:
                small.append(r)
    write_manifest(root / "data" / "small.csv", small)
    (root / "tiny.txt").write_text(TINY)
    assert main(["distill", "--data", str(root / "data" / "small.csv"), "--config", str(root / "tiny.txt"),
                 "--out", str(root / "kd")]) == 0
    assert main(["train-mos", "--data", str(root / "data" / "small.csv"), "--init", str(root / "kd" / "distill.ckpt"),
                 "--folds", "3", "--out", str(root / "mos")]) == 0
    return root


def test_gen_synthetic_layout(workspace):
    data = workspace / "data"
    assert len(list((data / "wav").glob("*.wav"))) == 400
    with open(data / "manifest.csv") as fh:
        assert sum(1 for _ in fh) == 4001
    assert (data / "hidden_quality.csv").is_file()


def test_gen_synthetic_refuses_non_empty(workspace, capsys):
    code, _, err = run(capsys, "gen-synthetic", "--out", workspace / "data", "--seed", 4)
    assert code == 2 and "--force" in err


def test_gen_synthetic_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-synthetic", "--out", tmp_path / name, "--seed", 9, "--duration", 0.05)[0] == 0
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    assert run(capsys, "gen-synthetic", "--out", tmp_path / "a", "--seed", 9, "--duration", 0.05, "--force")[0] == 0


def test_config_parsing():
    assert parse_config_text("lr = 0.5\nfreeze_encoder = true # comment\n") == {"lr": 0.5, "freeze_encoder": True}
    with pytest.raises(UsageError, match="unknown config key"):
        parse_config_text("learning_rate = 1")
    with pytest.raises(UsageError):
        parse_config_text("epochs = many")
    with pytest.raises(UsageError):
        parse_config_text("just words")


@pytest.mark.parametrize("bad", ["bogus = 1", "epochs = -3", "trunk = 3-2"])
def test_distill_rejects_bad_config(workspace, tmp_path, capsys, bad):
    cfg = tmp_path / "bad.txt"
    cfg.write_text(TINY + bad + "\n")
    code, _, _ = run(capsys, "distill", "--data", workspace / "data" / "small.csv", "--config", cfg,
                     "--out", tmp_path / "kd")
    assert code == 2


def test_distill_outputs(workspace):
    kd = workspace / "kd"
    rows = list(csv.DictReader(open(kd / "loss.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert "kd_max_steps = 3" in (kd / "config.txt").read_text()
    state = nn.load_checkpoint(kd / "distill.ckpt")
    assert int(state["meta/steps"]) == 3 and int(state["meta/epochs"]) == 2
    assert any(k.startswith("student/naf/") for k in state)
    assert any(k.startswith("teacher/") for k in state)
    assert any(k.startswith("opt/student/") for k in state)


def test_distill_resume_continues(workspace, tmp_path, capsys):
    shutil.copytree(workspace / "kd", tmp_path / "kd")
    code, out, _ = run(capsys, "distill", "--data", workspace / "data" / "small.csv", "--out", tmp_path / "kd",
                       "--resume", "--set", "kd_epochs=3", "--set", "kd_max_steps=5")
    assert code == 0
    state = nn.load_checkpoint(tmp_path / "kd" / "distill.ckpt")
    assert int(state["meta/steps"]) == 5 and int(state["meta/epochs"]) == 3
    rows = list(csv.DictReader(open(tmp_path / "kd" / "loss.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]


def test_distill_without_resume_refuses_existing(workspace, capsys):
    code, _, err = run(capsys, "distill", "--data", workspace / "data" / "small.csv", "--config",
                       workspace / "tiny.txt", "--out", workspace / "kd")
    assert code == 2 and "--resume" in err


def test_distill_missing_teacher(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "distill", "--data", workspace / "data" / "small.csv", "--config",
                       workspace / "tiny.txt", "--out", tmp_path / "kd", "--teacher", tmp_path / "none.ckpt")
    assert code == 2 and "teacher checkpoint not found" in err


def test_distill_loads_teacher(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "distill", "--data", workspace / "data" / "small.csv", "--config",
                     workspace / "tiny.txt", "--out", tmp_path / "kd", "--teacher", workspace / "kd" / "distill.ckpt",
                     "--seed", 11, "--set", "kd_max_steps=1")
    assert code == 0
    a = nn.load_checkpoint(workspace / "kd" / "distill.ckpt")
    b = nn.load_checkpoint(tmp_path / "kd" / "distill.ckpt")
    teacher_keys = [k for k in a if k.startswith("teacher/")]
    assert all(np.array_equal(a[k], b[k]) for k in teacher_keys)


def test_train_mos_outputs(workspace):
    mos = workspace / "mos"
    assert sorted(p.parent.name for p in mos.glob("fold*/model.ckpt")) == ["fold0", "fold1", "fold2"]
    for f in range(3):
        rows = list(csv.DictReader(open(mos / f"fold{f}" / "loss.csv")))
        assert len(rows) == 2 and all(r["val_loss"] for r in rows)
    preds = list(csv.DictReader(open(mos / "oof_predictions.csv")))
    assert len(preds) == 18
    assert all(1.0 <= float(r["pred"]) <= 5.0 for r in preds)
    assert "folds = 3" in (mos / "config.txt").read_text()


def test_train_mos_single_system(workspace, tmp_path, capsys):
    records = load_manifest(workspace / "data" / "small.csv")
    one = [r for r in records if r.system_id == records[0].system_id]
    write_manifest(workspace / "data" / "one_system.csv", one)
    code, _, _ = run(capsys, "train-mos", "--data", workspace / "data" / "one_system.csv",
                     "--init", workspace / "kd" / "distill.ckpt", "--folds", 2, "--out", tmp_path / "m")
    assert code == 2


def test_train_mos_missing_init(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "train-mos", "--data", workspace / "data" / "small.csv",
                     "--init", tmp_path / "nothing.ckpt", "--out", tmp_path / "m")
    assert code == 2


def _first_wav(workspace):
    return workspace / "data" / load_manifest(workspace / "data" / "small.csv")[0].wav_path


def test_predict_prints_value_in_range(workspace, capsys):
    code, out, _ = run(capsys, "predict", "--models", workspace / "mos", "--wav", _first_wav(workspace))
    assert code == 0
    assert 1.0 <= float(out.strip()) <= 5.0


def test_predict_verbose_breakdown(workspace, capsys):
    code, out, _ = run(capsys, "predict", "--models", workspace / "mos", "--wav", _first_wav(workspace), "--verbose")
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 4
    per_model = [float(l.split(":")[1]) for l in lines[:3]]
    assert float(lines[-1]) == pytest.approx(np.mean(per_model), abs=2e-6)


def test_predict_single_model_single_listener(workspace, tmp_path, capsys):
    single = tmp_path / "single"
    (single / "fold0").mkdir(parents=True)
    shutil.copy(workspace / "mos" / "fold0" / "model.ckpt", single / "fold0")
    shutil.copy(workspace / "mos" / "config.txt", single)
    code, out, _ = run(capsys, "predict", "--models", single, "--wav", _first_wav(workspace), "--listeners", "3")
    assert code == 0
    _, [(encoder, head)] = load_fold_models(single)
    w = read_wav(_first_wav(workspace))
    direct = float(denormalize_score(predict_listener_score(encoder.features(w), 3, head).data[0]))
    assert float(out) == pytest.approx(np.clip(direct, 1, 5), abs=1e-6)


@pytest.mark.parametrize("listeners", ["12", "a..b", "5..2"])
def test_predict_bad_listeners(workspace, capsys, listeners):
    code, _, _ = run(capsys, "predict", "--models", workspace / "mos", "--wav", _first_wav(workspace),
                     "--listeners", listeners)
    assert code == 2


def test_predict_bad_wav(workspace, tmp_path, capsys):
    write_wav(tmp_path / "odd.wav", Waveform(np.zeros(2205), 22050))
    assert run(capsys, "predict", "--models", workspace / "mos", "--wav", tmp_path / "odd.wav")[0] == 2
    assert run(capsys, "predict", "--models", workspace / "mos", "--wav", tmp_path / "missing.wav")[0] == 2
    assert run(capsys, "predict", "--models", tmp_path, "--wav", _first_wav(workspace))[0] == 2


def _truth_csv(workspace, path, shuffle=None):
    records = load_manifest(workspace / "data" / "small.csv")
    means = {}
    for r in records:
        means.setdefault(r.wav_path, []).append(r.score)
    rows = [(u, float(np.mean(s))) for u, s in means.items()]
    if shuffle is not None:
        rows = [rows[i] for i in np.random.default_rng(shuffle).permutation(len(rows))]
    with open(path, "w") as fh:
        fh.write("utterance_id,pred\n")
        fh.writelines(f"{u},{p!r}\n" for u, p in rows)


def _report(out):
    return dict(line.split("=") for line in out.strip().splitlines())


def test_evaluate_perfect(workspace, tmp_path, capsys):
    _truth_csv(workspace, tmp_path / "p.csv")
    code, out, _ = run(capsys, "evaluate", "--manifest", workspace / "data" / "small.csv", "--pred", tmp_path / "p.csv",
                       "--out", tmp_path / "rep")
    rep = _report(out)
    assert code == 0
    for level in ("utterance", "system"):
        assert float(rep[f"{level}.mse"]) == 0.0
        for m in ("lcc", "srcc", "ktau"):
            assert float(rep[f"{level}.{m}"]) == pytest.approx(1.0, abs=1e-12)
    assert (tmp_path / "rep" / "report.txt").read_text().strip() == out.strip()


def test_evaluate_join_by_id(workspace, capsys):
    pred = workspace / "mos" / "oof_predictions.csv"
    code, out, _ = run(capsys, "evaluate", "--manifest", workspace / "data" / "small.csv", "--pred", pred)
    assert code == 0
    lines = open(pred).read().splitlines()
    shuffled = workspace / "shuffled.csv"
    body = [lines[1:][i] for i in np.random.default_rng(0).permutation(len(lines) - 1)]
    shuffled.write_text("\n".join([lines[0]] + body) + "\n")
    assert run(capsys, "evaluate", "--manifest", workspace / "data" / "small.csv", "--pred", shuffled)[1] == out
    preds = {r["utterance_id"]: float(r["pred"]) for r in csv.DictReader(open(pred))}
    expected = evaluate_all(join_predictions(load_manifest(workspace / "data" / "small.csv"), preds))
    rep = _report(out)
    for level, values in expected.items():
        for m, v in values.items():
            assert float(rep[f"{level}.{m}"]) == v


def test_evaluate_unmatched(workspace, tmp_path, capsys):
    _truth_csv(workspace, tmp_path / "p.csv")
    with open(tmp_path / "p.csv", "a") as fh:
        fh.write("wav/nowhere.wav,3.0\n")
    code, _, err = run(capsys, "evaluate", "--manifest", workspace / "data" / "small.csv", "--pred", tmp_path / "p.csv")
    assert code == 1 and "wav/nowhere.wav" in err


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["predict", "--wav", "x.wav"]) == 2
    assert main(["no-such-command"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sfimos", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-mos" in proc.stdout
