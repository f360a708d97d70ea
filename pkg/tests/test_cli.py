import csv
import json
import shutil

import numpy as np
import pytest

from helpers import sine
from vacond import data as D
from vacond.cells import CellConfig, Model, load_checkpoint, process_sequence, save_checkpoint
from vacond.cli import main
from vacond.dsp import Waveform

FS = 48000


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["synth-data", "--device", "overdrive", "--grid", "2x2", "--seconds", "1.2",
                 "--split", "50/25/25", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--manifest", str(dataset / "manifest.json"), "--out", str(out),
                 "--conditioning", "film", "--hidden-size", "4", "--epochs", "1", "--warmup", "0",
                 "--chunk-segments", "1", "--batch-size", "4"]) == 0
    return out


# ---------------------------------------------------------------- synth-data


def test_synth_data_is_deterministic(tmp_path):
    args = ["synth-data", "--device", "overdrive", "--grid", "5x5", "--seconds", "0.02", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a" / "nested")]) == 0
    assert main(args + ["--out", str(tmp_path / "b" / "nested")]) == 0
    a, b = _tree(tmp_path / "a" / "nested"), _tree(tmp_path / "b" / "nested")
    assert a == b and len(a) == 1 + 4 + 100


def test_synth_data_usage_and_io_errors(tmp_path, capsys):
    assert main(["synth-data", "--grid", "0x5", "--out", str(tmp_path / "x")]) == 2
    assert "grid" in capsys.readouterr().err
    assert main(["synth-data", "--grid", "5", "--out", str(tmp_path / "x")]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("not a folder")
    assert main(["synth-data", "--grid", "2x2", "--seconds", "0.01", "--out", str(blocker / "sub")]) == 1


def test_synth_data_compressor_grid(tmp_path):
    assert main(["synth-data", "--device", "compressor", "--grid", "11", "--seconds", "0.01",
                 "--split", "80/10/10", "--out", str(tmp_path)]) == 0
    m = D.load_manifest(tmp_path / "manifest.json")
    assert sorted({e.knobs[0] for e in m.entries}) == list(range(0, 101, 10))


# ---------------------------------------------------------------- train


def test_train_writes_artifacts(trained, capsys):
    for name in ("best.ckpt", "last.ckpt", "history.csv", "train_config.json"):
        assert (trained / name).exists(), name
    model, meta, _ = load_checkpoint(trained / "best.ckpt")
    assert model.config.conditioning == "film" and model.config.cond_dim == 2
    assert meta["sample_rate"] == FS and meta["knob_ranges"] == [[0.0, 4.0], [0.0, 4.0]]


def test_train_resume_continues_epoch_counter(dataset, trained, tmp_path):
    run = tmp_path / "run"
    shutil.copytree(trained, run)
    assert main(["train", "--manifest", str(dataset / "manifest.json"), "--out", str(run),
                 "--resume", str(run / "last.ckpt"), "--epochs", "2"]) == 0
    with open(run / "history.csv") as fh:
        assert [int(r["epoch"]) for r in csv.DictReader(fh)] == [0, 1]
    _, meta, extra = load_checkpoint(run / "last.ckpt")
    assert meta["epoch"] == 1 and extra["adam.step"][0] > 0


def test_train_config_file_and_overrides(dataset, tmp_path):
    cfg = {"manifest": str(dataset / "manifest.json"), "out": str(tmp_path / "run"), "conditioning": "concat",
           "hidden_size": 4, "epochs": 3, "warmup": 0, "chunk_segments": 1, "batch_size": 8}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--epochs", "1"]) == 0
    written = json.loads((tmp_path / "run" / "train_config.json").read_text())
    assert written["epochs"] == 1 and written["batch_size"] == 8


def test_train_usage_errors(dataset, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--manifest", str(dataset / "manifest.json"), "--out", str(tmp_path), "--conditioning", "bias"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    for name in ("concat", "film", "static_hyper", "dynamic_hyper"):
        assert name in err
    assert main(["train", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"momentum": 0.9}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--manifest", "m", "--out", "o"]) == 2


def test_train_reports_dataset_errors_first(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 1
    assert "does not exist" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


# ---------------------------------------------------------------- eval


def test_eval_checkpoint_writes_fixed_columns(dataset, trained, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "best.ckpt"), "--manifest", str(dataset / "manifest.json"),
            "--split", "test"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    text = (tmp_path / "a" / "metrics.csv").read_text()
    assert text.splitlines()[0] == "clip_id,l1,stft,lufs,cf,rms,transient"
    assert text.splitlines()[-1].startswith("mean,")
    assert text == (tmp_path / "b" / "metrics.csv").read_text()
    payload = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert len(payload["clips"]) == len(D.load_manifest(dataset / "manifest.json").split("test")) == 4


def test_eval_self_predictions_give_zero_rows(dataset, tmp_path):
    m = D.load_manifest(dataset / "manifest.json")
    preds = tmp_path / "preds"
    preds.mkdir()
    for e in m.split("train"):
        shutil.copy(m.resolve(e.target), preds / f"{e.id}.wav")
    assert main(["eval", "--predictions", str(preds), "--manifest", str(dataset / "manifest.json"),
                 "--split", "train", "--out", str(tmp_path / "out")]) == 0
    with open(tmp_path / "out" / "metrics.csv") as fh:
        for row in csv.DictReader(fh):
            assert all(float(row[c]) == 0.0 for c in ("l1", "stft", "lufs", "cf", "rms", "transient"))


def test_eval_errors(dataset, trained, tmp_path, capsys):
    only_train = tmp_path / "ds"
    D.build_synthetic_dataset(only_train, "overdrive", D.make_sources(FS, 0.05), [[0], [0]], split=(1.0, 0.0, 0.0))
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--manifest", str(only_train / "manifest.json"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "no 'test' entries" in capsys.readouterr().err
    model, meta, _ = load_checkpoint(trained / "best.ckpt")
    save_checkpoint(tmp_path / "sr.ckpt", model, {**meta, "sample_rate": 44100})
    assert main(["eval", "--checkpoint", str(tmp_path / "sr.ckpt"), "--manifest", str(dataset / "manifest.json"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "44100" in capsys.readouterr().err


# ---------------------------------------------------------------- infer


@pytest.fixture
def zero_ckpt(tmp_path):
    model = Model(CellConfig("gru", "concat", hidden_size=8)).zero_()
    path = tmp_path / "zero.ckpt"
    save_checkpoint(path, model, {"sample_rate": FS, "knob_names": ["gain", "tone"], "knob_ranges": [[0, 4], [0, 4]]})
    return path


def test_infer_zero_weight_is_identity(zero_ckpt, tmp_path):
    x = sine(220.0, 0.3, amp=0.5).astype(np.float32).astype(np.float64)
    D.write_wav(Waveform(x, FS), tmp_path / "in.wav")
    assert main(["infer", "--checkpoint", str(zero_ckpt), "--input", str(tmp_path / "in.wav"),
                 "--output", str(tmp_path / "out.wav"), "--knobs", "2,3"]) == 0
    assert np.array_equal(D.read_wav(tmp_path / "out.wav").samples, x)


def test_infer_is_deterministic_and_streams_exactly(tmp_path):
    model = Model(CellConfig("lstm", "dynamic_hyper", hidden_size=8), seed=4)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, model, {"sample_rate": FS})
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 5000)
    D.write_wav(Waveform(x, FS), tmp_path / "in.wav")
    for name in ("a.wav", "b.wav"):
        assert main(["infer", "--checkpoint", str(ckpt), "--input", str(tmp_path / "in.wav"),
                     "--output", str(tmp_path / name), "--phi", "0.2,-0.4", "--block", "1000"]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    loaded, _, _ = load_checkpoint(ckpt, dtype=np.float64)
    full, _ = process_sequence(loaded, D.read_wav(tmp_path / "in.wav").samples, [0.2, -0.4])
    assert np.max(np.abs(D.read_wav(tmp_path / "a.wav").samples - full)) < 1e-6


def test_infer_knob_errors(zero_ckpt, tmp_path, capsys):
    D.write_wav(Waveform(np.zeros(100), FS), tmp_path / "in.wav")
    base = ["infer", "--checkpoint", str(zero_ckpt), "--input", str(tmp_path / "in.wav"),
            "--output", str(tmp_path / "out.wav")]
    assert main(base + ["--knobs", "1"]) == 2
    assert main(base + ["--knobs", "1,9"]) == 2
    assert "gain in [0, 4], tone in [0, 4]" in capsys.readouterr().err
    assert main(base + ["--knobs", "1,1", "--phi", "0,0"]) == 2
    assert main(base + ["--phi", "0,1.5"]) == 2
    assert not (tmp_path / "out.wav").exists()


# ---------------------------------------------------------------- flops


def test_flops_report(tmp_path, capsys):
    assert main(["flops", "--model", "concat-gru", "--sr", "48000", "--json", str(tmp_path / "f.json")]) == 0
    out = capsys.readouterr().out
    total = float(out.strip().splitlines()[-1].split()[1])
    assert abs(total - 0.325) / 0.325 <= 0.15
    assert json.loads((tmp_path / "f.json").read_text())[0]["total_gflops"] == pytest.approx(total, abs=1e-4)


def test_flops_zero_duration_and_bad_label(capsys):
    assert main(["flops", "--model", "film-lstm", "dynamichyper-gru", "--duration", "0"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.strip().startswith("total")]
    assert len(lines) == 2 and all(float(ln.split()[1]) == 0.0 for ln in lines)
    assert main(["flops", "--model", "wavenet"]) == 2
    assert "unknown model label" in capsys.readouterr().err
