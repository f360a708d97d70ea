"""Command-line entry point: synth-data, train, eval, infer, flops.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .cells import CellConfig, CheckpointError, Model, ModelError, load_checkpoint, process_stream
from .conditioning import CONDITIONINGS
from .dsp import DSPConfigError, Waveform
from .flops import estimate_flops, parse_model_label
from .metrics import MetricError, evaluate_clip, evaluate_prediction, mean_row, reports_to_csv
from .training import AdamState, TrainConfig, TrainingError, read_history, train

log = logging.getLogger("vacond")

CELL_KINDS = ("vanilla", "gru", "lstm")
RUNTIME_ERRORS = (OSError, ValueError, data_mod.WavError, data_mod.ManifestError, CheckpointError,
                  TrainingError, MetricError, ModelError, DSPConfigError)
# TrainConfig / CellConfig fields that the CLI sets from other sources
_MODEL_SKIP = {"input_dim", "cond_dim"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing


def _add_dataclass_flags(parser, cls, skip=(), choices=None):
    choices = choices or {}
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in fields(cls):
        if f.name in skip:
            continue
        kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        conv = float if "float" in kind else int if "int" in kind else str
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=conv, default=None,
                           choices=choices.get(f.name), help=f"default {f.default!r}")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return d


def _merge(cls, file_cfg: dict, args, skip=()) -> dict:
    """Values from the config file, overridden by flags that were given."""
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        if f.name in file_cfg:
            out[f.name] = file_cfg[f.name]
        flag = getattr(args, f.name, None)
        if flag is not None:
            out[f.name] = flag
    return out


def _parse_grid(text: str, device: str):
    try:
        counts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise UsageError(f"--grid must look like 5x5 or 11, got {text!r}") from None
    spec = data_mod.OverdriveSpec() if device == "overdrive" else data_mod.CompressorSpec()
    if len(counts) != len(spec.knob_names):
        raise UsageError(f"{device} has {len(spec.knob_names)} knobs ({', '.join(spec.knob_names)}); grid {text!r}")
    grid = []
    for n, (lo, hi) in zip(counts, spec.ranges()):
        if n < 1:
            raise UsageError(f"grid counts must be >= 1, got {text!r}")
        values = sorted({int(round(v)) for v in np.linspace(lo, hi, n)}) if n > 1 else [int(lo)]
        if len(values) != n:
            raise UsageError(f"{n} settings do not fit the integer knob range [{lo:g}, {hi:g}]")
        grid.append(values)
    return grid


def _parse_split(text: str):
    try:
        parts = [float(p) for p in text.split("/")]
    except ValueError:
        raise UsageError(f"--split must look like 80/15/5, got {text!r}") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise UsageError(f"--split must be three non-negative numbers, got {text!r}")
    total = sum(parts)
    return tuple(p / total for p in parts)


# ---------------------------------------------------------------- subcommands


def cmd_synth_data(args) -> int:
    grid = _parse_grid(args.grid, args.device) if args.grid else None
    split = _parse_split(args.split)
    sources = data_mod.make_sources(args.sample_rate, args.seconds, args.seed)
    m = data_mod.build_synthetic_dataset(args.out, args.device, sources, grid, split, args.seed)
    counts = {s: len(m.split(s)) for s in data_mod.SPLITS}
    print(f"wrote {len(m.entries)} entries to {Path(args.out) / 'manifest.json'}  {counts}")
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    manifest_path = args.manifest or file_cfg.get("manifest")
    out_dir = args.out or file_cfg.get("out")
    if not manifest_path or not out_dir:
        raise UsageError("train needs --manifest and --out (as flags or config keys)")
    unknown = set(file_cfg) - {f.name for f in fields(CellConfig)} - {f.name for f in fields(TrainConfig)} - {"manifest", "out"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cond_name = args.conditioning or file_cfg.get("conditioning", "concat")
    if cond_name not in CONDITIONINGS:
        raise UsageError(f"conditioning must be one of {{{','.join(CONDITIONINGS)}}}, got {cond_name!r}")

    # dataset problems surface before any training work
    manifest = data_mod.load_manifest(manifest_path)
    dataset = data_mod.manifest_dataset(manifest)
    if not dataset.train or not dataset.val:
        raise TrainingError("the manifest needs non-empty train and val splits")

    train_dict = _merge(TrainConfig, file_cfg, args)
    adam = None
    history = []
    start_epoch = 0
    if args.resume:
        model, meta, extra = load_checkpoint(args.resume, dtype=np.dtype(train_dict.get("dtype", "float32")))
        train_dict = {**meta.get("train_config", {}), **train_dict}
        cfg = TrainConfig.from_dict(train_dict)
        adam = AdamState.from_arrays(model.params, extra)
        start_epoch = int(meta.get("epoch", -1)) + 1
        hist_path = Path(out_dir) / "history.csv"
        history = [r for r in read_history(hist_path) if r.epoch < start_epoch] if hist_path.exists() else []
        if model.config.cond_dim != manifest.cond_dim:
            raise UsageError(f"checkpoint cond_dim {model.config.cond_dim} != manifest cond_dim {manifest.cond_dim}")
        log.info("resuming at epoch %d", start_epoch)
    else:
        model_dict = _merge(CellConfig, file_cfg, args, _MODEL_SKIP)
        model_dict["conditioning"] = cond_name
        model_cfg = CellConfig(**model_dict, cond_dim=manifest.cond_dim)
        cfg = TrainConfig.from_dict(train_dict)
        model = Model(model_cfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))

    meta_extra = {"knob_names": manifest.knob_names, "knob_ranges": manifest.knob_ranges, "device": manifest.device}
    best, history, _ = train(model, dataset, cfg, out_dir, adam, start_epoch, history, meta_extra)
    Path(out_dir, "train_config.json").write_text(cfg.to_json() + "\n")
    if history:
        last = history[-1]
        best_row = min(history, key=lambda r: r.val_loss)
        print(f"epoch {last.epoch}: train {last.train_loss:.6f}  val {last.val_loss:.6f}  "
              f"(best val {best_row.val_loss:.6f} at epoch {best_row.epoch})")
    else:
        print(f"nothing to do: already trained for {cfg.epochs} epochs")
    return 0


def cmd_eval(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise MetricError(f"manifest has no {args.split!r} entries")
    model = None
    if args.predictions is None:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint or --predictions")
        model, meta, _ = load_checkpoint(args.checkpoint, dtype=np.float64)
        sr = meta.get("sample_rate")
        if sr is not None and int(sr) != manifest.sample_rate:
            raise MetricError(f"checkpoint was trained at {sr} Hz but the data is {manifest.sample_rate} Hz")
        if model.config.cond_dim != manifest.cond_dim:
            raise MetricError(f"checkpoint cond_dim {model.config.cond_dim} != manifest cond_dim {manifest.cond_dim}")

    pairs = data_mod.load_pairs(manifest, args.split)

    def score(item):
        clip_id, x, y, phi = item
        target = Waveform(y, manifest.sample_rate)
        meta = {"clip_id": clip_id, "phi": phi.tolist()}
        if model is not None:
            return evaluate_clip(model.copy(), Waveform(x, manifest.sample_rate), target, phi, meta)
        pred = data_mod.read_wav(Path(args.predictions) / f"{clip_id}.wav")
        if pred.sample_rate != manifest.sample_rate:
            raise MetricError(f"{clip_id}: prediction rate {pred.sample_rate} != {manifest.sample_rate}")
        return evaluate_prediction(Waveform(pred.samples[: y.size], pred.sample_rate), target, metadata=meta)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        reports = list(pool.map(score, pairs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    payload = {"clips": [json.loads(r.to_json()) for r in reports], "mean": mean_row(reports)}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    m = payload["mean"]
    print("mean  " + "  ".join(f"{k}={'n/a' if v is None else f'{v:.5g}'}" for k, v in m.items()))
    return 0


def _parse_knobs(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--knobs must be comma-separated numbers, got {text!r}") from None


def cmd_infer(args) -> int:
    if (args.knobs is None) == (args.phi is None):
        raise UsageError("give exactly one of --knobs (raw values) or --phi (normalized values)")
    if args.block < 1:
        raise UsageError("--block must be >= 1")
    model, meta, _ = load_checkpoint(args.checkpoint, dtype=np.float64)
    cond_dim = model.config.cond_dim
    if args.knobs is not None:
        raw = _parse_knobs(args.knobs)
        ranges = meta.get("knob_ranges") or [[-1.0, 1.0]] * cond_dim
        if len(raw) != cond_dim:
            raise UsageError(f"checkpoint expects {cond_dim} knob values, got {len(raw)}")
        for i, (v, (lo, hi)) in enumerate(zip(raw, ranges)):
            if not lo <= v <= hi:
                names = meta.get("knob_names") or [f"knob{j}" for j in range(cond_dim)]
                valid = ", ".join(f"{n} in [{a:g}, {b:g}]" for n, (a, b) in zip(names, ranges))
                raise UsageError(f"knob {i} value {v:g} out of range; valid ranges: {valid}")
        phi = data_mod.normalize_knobs(raw, ranges)
    else:
        phi = np.asarray(_parse_knobs(args.phi))
        if phi.size != cond_dim:
            raise UsageError(f"checkpoint expects {cond_dim} conditioning values, got {phi.size}")
        if np.any(np.abs(phi) > 1):
            raise UsageError("--phi values must lie in [-1, 1]")
    w = data_mod.read_wav(args.input)
    sr = meta.get("sample_rate")
    if sr is not None and int(sr) != w.sample_rate:
        log.warning("input is %d Hz but the model was trained at %s Hz", w.sample_rate, sr)
    y = process_stream(model, w.samples, phi, block=args.block)
    data_mod.write_wav(Waveform(np.asarray(y, dtype=np.float64), w.sample_rate), args.output, args.bit_depth)
    print(f"wrote {len(y)} samples to {args.output}")
    return 0


def cmd_flops(args) -> int:
    reports = []
    for label in args.model:
        try:
            cfg = parse_model_label(label, hidden_size=args.hidden_size, cond_dim=args.cond_dim)
        except (ValueError, ModelError) as exc:
            raise UsageError(str(exc)) from None
        reports.append(estimate_flops(cfg, args.sr, args.duration))
    for r in reports:
        print(r.table())
    if args.json:
        Path(args.json).write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vacond", description="Conditioned recurrent models of audio effects.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render a synthetic device dataset")
    s.add_argument("--device", choices=("overdrive", "compressor"), default="overdrive")
    s.add_argument("--grid", help="settings per knob, e.g. 5x5 (overdrive) or 11 (compressor)")
    s.add_argument("--out", required=True, help="output folder")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seconds", type=float, default=6.0, help="length of each source signal")
    s.add_argument("--sample-rate", type=int, default=48000)
    s.add_argument("--split", default="80/15/5", help="train/val/test ratio")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="JSON file; flags override its values")
    t.add_argument("--manifest")
    t.add_argument("--out", help="folder for checkpoints and history")
    t.add_argument("--resume", help="checkpoint (last.ckpt) to continue from")
    _add_dataclass_flags(t, CellConfig, _MODEL_SKIP, {"conditioning": CONDITIONINGS, "cell_kind": CELL_KINDS})
    _add_dataclass_flags(t, TrainConfig, (), {"dtype": ("float32", "float64")})
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or saved predictions) on a split")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=data_mod.SPLITS, default="test")
    e.add_argument("--predictions", help="folder of <entry id>.wav files to score instead of running a model")
    e.add_argument("--out", required=True, help="folder for metrics.csv and metrics.json")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="process a WAV file at fixed knob settings")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--knobs", help="raw knob values, comma-separated")
    i.add_argument("--phi", help="normalized conditioning values in [-1, 1], comma-separated")
    i.add_argument("--block", type=int, default=2048)
    i.add_argument("--bit-depth", type=int, choices=(16, 24, 32), default=32)
    i.set_defaults(func=cmd_infer)

    f = sub.add_parser("flops", help="analytic FLOPs per second of audio")
    f.add_argument("--model", nargs="+", required=True, help="labels such as concat-gru, film-lstm")
    f.add_argument("--sr", type=int, default=48000)
    f.add_argument("--duration", type=float, default=1.0)
    f.add_argument("--hidden-size", type=int, default=32)
    f.add_argument("--cond-dim", type=int, default=2)
    f.add_argument("--json", help="also write the reports to this file")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vacond {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"vacond {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
