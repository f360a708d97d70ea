"""Truncated-BPTT training with Adam, step learning-rate decay and best-checkpoint tracking."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .cells import Model, process_sequence, run_sequence, save_checkpoint
from .losses import FFT_SIZES, combined_loss, mrstft_loss

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 1e-3
    lr_halving_period_epochs: int = 5
    tbptt_len: int = 2048
    # segments per training chunk; state is carried (detached) across them
    chunk_segments: int = 8
    warmup: int = 256
    w_l1: float = 1.0
    w_stft: float = 1.0
    seed: int = 0
    clip_norm: float = 5.0
    checkpoint_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_halving_period_epochs", "chunk_segments", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tbptt_len < 64:
            raise ValueError("tbptt_len must be >= 64")
        if not self.lr0 > 0 or not self.clip_norm > 0:
            raise ValueError("lr0 and clip_norm must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def chunk_len(self) -> int:
        return self.warmup + self.chunk_segments * self.tbptt_len

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def tbptt_segments(clip_len: int, seg_len: int) -> list[tuple[int, int]]:
    """Contiguous full-length segments; a shorter remainder is dropped."""
    if seg_len < 1:
        raise ValueError("seg_len must be >= 1")
    return [(s, s + seg_len) for s in range(0, clip_len - seg_len + 1, seg_len)]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halving_period_epochs)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items() if t.requires_grad},
            v={n: np.zeros_like(t.data) for n, t in params.items() if t.requires_grad},
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, params: ParamStore, arrays: dict[str, np.ndarray]) -> "AdamState":
        st = cls.create(params)
        for n in st.m:
            if f"adam.m.{n}" in arrays:
                st.m[n] = arrays[f"adam.m.{n}"].astype(st.m[n].dtype).reshape(st.m[n].shape)
                st.v[n] = arrays[f"adam.v.{n}"].astype(st.v[n].dtype).reshape(st.v[n].shape)
        st.step = int(arrays.get("adam.step", np.zeros(1))[0])
        return st


def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for name, t in params.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
        if not np.all(np.isfinite(t.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(total)


def adam_step(params: ParamStore, state: AdamState, lr: float, clip_norm: float | None = 5.0) -> float:
    """Clip by global norm, apply one bias-corrected Adam update, zero the gradients.

    Returns the pre-clipping gradient norm.
    """
    norm = global_grad_norm(params)
    scale = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        if not t.requires_grad:
            continue
        g = t.grad * scale if scale != 1.0 else t.grad
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params.set(name, (t.data - update).astype(t.data.dtype))
    params.zero_grad()
    return norm


# ---------------------------------------------------------------- data plumbing


@dataclass
class Clip:
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    clip_id: str = ""


@dataclass
class SequenceDataset:
    train: list[Clip]
    val: list[Clip]
    test: list[Clip]
    sample_rate: int
    cond_dim: int


def make_chunks(clips: list[Clip], cfg: TrainConfig) -> list[tuple[int, int]]:
    """(clip index, start) of every full training chunk."""
    out = []
    for i, clip in enumerate(clips):
        for start, _ in tbptt_segments(clip.x.size, cfg.chunk_len):
            out.append((i, start))
    return out


# ---------------------------------------------------------------- loop


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def write_history(rows: list[HistoryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(HISTORY_COLUMNS)
        for r in rows:
            wr.writerow([r.epoch, f"{r.train_loss:.9g}", f"{r.val_loss:.9g}", f"{r.lr:.9g}"])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [
            HistoryRow(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
            for r in csv.DictReader(fh)
        ]


def validation_loss(model: Model, clips: list[Clip]) -> float:
    """Mean multi-resolution STFT loss over whole validation clips (no parameter updates)."""
    if not clips:
        raise TrainingError("validation split is empty")
    losses = []
    for clip in clips:
        y, _ = process_sequence(model, clip.x, clip.phi)
        losses.append(float(mrstft_loss(y.astype(np.float64), clip.y)))
    return float(np.mean(losses))


def train_chunk(model: Model, x: np.ndarray, y: np.ndarray, phi: np.ndarray, cfg: TrainConfig,
                adam: AdamState, lr: float, where: str = "") -> list[float]:
    """One batch of chunks: warmup preroll, then one Adam step per TBPTT segment."""
    B = x.shape[0]
    state = model.initial_state(B)
    if cfg.warmup:
        with ad.no_grad():
            _, state = run_sequence(model, x[:, : cfg.warmup], phi, state)
        state = state.detach()
    losses = []
    for k, (s, e) in enumerate(tbptt_segments(x.shape[1] - cfg.warmup, cfg.tbptt_len)):
        s += cfg.warmup
        e += cfg.warmup
        with ad.Tape() as tape:
            pred, new_state = run_sequence(model, x[:, s:e], phi, state)
            loss = combined_loss(pred, y[:, s:e], cfg.w_l1, cfg.w_stft)
        value = loss.value
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at {where} segment {k}")
        ad.backward(tape, loss.total, model.params)
        adam_step(model.params, adam, lr, cfg.clip_norm)
        state = new_state.detach()
        losses.append(value)
    return losses


def train(model: Model, dataset: SequenceDataset, cfg: TrainConfig, out_dir=None,
          adam: AdamState | None = None, start_epoch: int = 0, history: list[HistoryRow] | None = None,
          meta_extra: dict | None = None):
    """Train ``model`` in place; returns (best model, history rows, adam state).

    With ``out_dir`` the history CSV, ``last.ckpt`` and ``best.ckpt`` are written there;
    ``meta_extra`` is merged into the checkpoint metadata.
    """
    dtype = np.dtype(cfg.dtype)
    if model.dtype != dtype:
        model.astype(dtype)
    if cfg.w_stft > 0 and cfg.tbptt_len < max(FFT_SIZES):
        raise TrainingError(f"tbptt_len {cfg.tbptt_len} is shorter than the largest STFT window ({max(FFT_SIZES)})")
    chunks = make_chunks(dataset.train, cfg)
    if not chunks:
        raise TrainingError(f"no training clip is at least {cfg.chunk_len} samples long")
    adam = adam or AdamState.create(model.params)
    history = list(history or [])
    best_val = min((r.val_loss for r in history), default=math.inf)
    best = model.copy()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    L = cfg.chunk_len
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(chunks))
        seg_losses = []
        for bi in range(0, len(order), cfg.batch_size):
            idx = order[bi : bi + cfg.batch_size]
            picks = [chunks[i] for i in idx]
            x = np.stack([dataset.train[c].x[s : s + L] for c, s in picks]).astype(dtype)
            y = np.stack([dataset.train[c].y[s : s + L] for c, s in picks]).astype(dtype)
            phi = np.stack([dataset.train[c].phi for c, s in picks])
            seg_losses += train_chunk(model, x, y, phi, cfg, adam, lr, f"epoch {epoch} batch {bi // cfg.batch_size}")
        val = validation_loss(model, dataset.val)
        row = HistoryRow(epoch, float(np.mean(seg_losses)), val, lr)
        history.append(row)
        log.info("epoch %d  train %.5f  val %.5f  lr %.3g", epoch, row.train_loss, val, lr)
        improved = val < best_val
        if improved:
            best_val = val
            best = model.copy()
        if out is not None:
            write_history(history, out / "history.csv")
            meta = {"epoch": epoch, "val_loss": val, "sample_rate": dataset.sample_rate, "train_config": asdict(cfg),
                    **(meta_extra or {})}
            if improved:
                save_checkpoint(out / "best.ckpt", best, meta)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
                save_checkpoint(out / "last.ckpt", model, meta, adam.to_arrays())
    return best, history, adam
