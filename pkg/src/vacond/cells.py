"""Conditioned recurrent cells, sequence/streaming execution and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import conditioning as cond
from .autodiff import ParamStore, Tensor
from .recurrence import GATE_COUNT, gate_count, gate_update

HYPER = ("static_hyper", "dynamic_hyper")
# "none" is the unconditioned backbone, used as a reference
ALL_CONDITIONINGS = cond.CONDITIONINGS + ("none",)


class ModelError(ValueError):
    pass


@dataclass
class CellConfig:
    cell_kind: str = "gru"
    conditioning: str = "concat"
    hidden_size: int = 32
    input_dim: int = 1
    cond_dim: int = 2
    hyper_hidden: int | None = None
    z_dim: int | None = None
    # hidden layers of the generator MLPs (width, count)
    film_hidden: int = 32
    film_depth: int = 2
    static_depth: int = 2
    dyn_hidden: int = 32
    dyn_depth: int = 2
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.cell_kind not in GATE_COUNT:
            raise ModelError(f"cell_kind must be one of {sorted(GATE_COUNT)}, got {self.cell_kind!r}")
        if self.conditioning not in ALL_CONDITIONINGS:
            raise ModelError(f"conditioning must be one of {list(cond.CONDITIONINGS)}, got {self.conditioning!r}")
        for name in ("hidden_size", "input_dim", "cond_dim"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.conditioning in HYPER:
            if self.hyper_hidden is None:
                self.hyper_hidden = 8
            if self.conditioning == "dynamic_hyper" and self.z_dim is None:
                self.z_dim = 32
            if self.conditioning == "static_hyper" and self.z_dim is not None:
                raise ModelError("z_dim only applies to dynamic_hyper")
        elif self.hyper_hidden is not None or self.z_dim is not None:
            raise ModelError("hyper_hidden / z_dim only apply to hyper conditioning")

    @property
    def rows(self) -> int:
        return gate_count(self.cell_kind) * self.hidden_size

    @property
    def main_input_dim(self) -> int:
        return self.input_dim + (self.cond_dim if self.conditioning == "concat" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CellConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor | None = None
    hyper: cond.HyperState | None = None

    def detach(self) -> "RecurrentState":
        return RecurrentState(
            self.h.detach(),
            None if self.c is None else self.c.detach(),
            None if self.hyper is None else self.hyper.detach(),
        )


@dataclass
class Context:
    """Per-sequence conditioning products (computed once, reused every step)."""

    phi: Tensor
    film: cond.FiLMCoeffs | None = None
    shift_h: Tensor | None = None
    shift_x: Tensor | None = None
    weights: cond.WeightBundle | None = None


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def backbone_init(rng: np.random.Generator, kind: str, in_dim: int, hidden: int):
    """Orthogonal recurrent blocks, uniform input weights, zero biases."""
    g = gate_count(kind)
    bound = ad.xavier_bound(in_dim)
    w_x = rng.uniform(-bound, bound, size=(g * hidden, in_dim))
    w_h = np.concatenate([_orthogonal(rng, hidden) for _ in range(g)], axis=0)
    return w_x, w_h, np.zeros(g * hidden), np.zeros(g * hidden)


class Model:
    """A single-layer conditioned RNN with a residual linear output head."""

    def __init__(self, config: CellConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self.generator_calls = 0
        self._build(np.random.default_rng(seed))

    def _add_cell(self, rng, prefix: str, in_dim: int, hidden: int) -> None:
        w_x, w_h, b_x, b_h = backbone_init(rng, self.config.cell_kind, in_dim, hidden)
        for name, v in (("w_x", w_x), ("w_h", w_h), ("b_x", b_x), ("b_h", b_h)):
            self.params.add(f"{prefix}.{name}", v, dtype=self.dtype)

    def _build(self, rng) -> None:
        cfg = self.config
        kind = cfg.conditioning
        if kind == "static_hyper":
            init = backbone_init(rng, cfg.cell_kind, cfg.input_dim, cfg.hidden_size)
            cond.init_static(self.params, cfg, rng, self.dtype, init)
        else:
            self._add_cell(rng, "cell", cfg.main_input_dim, cfg.hidden_size)
        if kind == "film":
            cond.init_film(self.params, cfg, rng, self.dtype)
        elif kind == "dynamic_hyper":
            cond.init_dynamic(
                self.params, cfg, rng, self.dtype,
                lambda prefix, in_dim, hidden: self._add_cell(rng, prefix, in_dim, hidden),
            )
        bound = ad.xavier_bound(cfg.hidden_size)
        self.params.add("head.w", rng.uniform(-bound, bound, size=(1, cfg.hidden_size)), dtype=self.dtype)
        self.params.add("head.b", np.zeros(1), dtype=self.dtype)

    # ------------------------------------------------------------ execution

    def initial_state(self, batch: int = 1) -> RecurrentState:
        cfg = self.config
        h = Tensor(np.zeros((batch, cfg.hidden_size), dtype=self.dtype))
        c = Tensor(np.zeros((batch, cfg.hidden_size), dtype=self.dtype)) if cfg.cell_kind == "lstm" else None
        hyper = cond.initial_hyper_state(cfg, batch, self.dtype) if cfg.conditioning == "dynamic_hyper" else None
        return RecurrentState(h, c, hyper)

    def prepare(self, phi) -> Context:
        """Run the once-per-sequence part of the conditioning."""
        cfg = self.config
        phi = cond.as_conditioning(phi, cfg.cond_dim, self.dtype)
        ctx = Context(phi=phi)
        if cfg.conditioning == "film":
            self.generator_calls += 1
            ctx.film = cond.film_generate(phi, self.params, cfg)
            # sequence-constant shifts fold into the bias
            ctx.shift_h = ad.bias_add(ctx.film.beta_h, self.params["cell.b_h"])
            ctx.shift_x = ad.bias_add(ctx.film.beta_x, self.params["cell.b_x"])
        elif cfg.conditioning == "static_hyper":
            self.generator_calls += 1
            ctx.weights = cond.statichyper_generate(phi, self.params, cfg)
        return ctx

    def step(self, state: RecurrentState, x_t: Tensor, ctx: Context):
        """One time step. ``x_t`` is [batch, input_dim]; returns (y_t [batch, 1], new state)."""
        cfg = self.config
        p = self.params
        kind = cfg.conditioning
        h = state.h
        hyper = None
        if kind == "concat":
            fx = ad.linear(ad.concat([x_t, ctx.phi], axis=1), p["cell.w_x"], p["cell.b_x"])
            fh = ad.linear(h, p["cell.w_h"], p["cell.b_h"])
        elif kind == "none":
            fx = ad.linear(x_t, p["cell.w_x"], p["cell.b_x"])
            fh = ad.linear(h, p["cell.w_h"], p["cell.b_h"])
        elif kind == "film":
            f = ctx.film
            fx = cond.film_apply(ad.linear(x_t, p["cell.w_x"]), f.alpha_x, ctx.shift_x)
            fh = cond.film_apply(ad.linear(h, p["cell.w_h"]), f.alpha_h, ctx.shift_h)
        elif kind == "static_hyper":
            w = ctx.weights
            fx = ad.bmv(x_t, w.w_x) + w.b_x
            fh = ad.bmv(h, w.w_h) + w.b_h
        else:
            z_h, z_x, hyper = cond.dynamichyper_step(ctx.phi, h, state.hyper, p, cfg)
            mh, mx = cond.dynamic_modulate(z_h, z_x, ad.linear(h, p["cell.w_h"]), ad.linear(x_t, p["cell.w_x"]), p, cfg)
            fh = ad.bias_add(mh, p["cell.b_h"])
            fx = ad.bias_add(mx, p["cell.b_x"])
        h_new, c_new = gate_update(cfg.cell_kind, fx, fh, h, state.c)
        y = ad.linear(h_new, p["head.w"], p["head.b"]) + x_t[:, :1]
        return y, RecurrentState(h_new, c_new, hyper)

    def zero_(self) -> "Model":
        for name, t in self.params.items():
            self.params.set(name, np.zeros_like(t.data))
        return self

    def copy(self) -> "Model":
        other = Model.__new__(Model)
        other.config = self.config
        other.dtype = self.dtype
        other.generator_calls = 0
        other.params = ParamStore()
        for name, t in self.params.items():
            other.params.add(name, t.data, trainable=t.requires_grad, dtype=self.dtype)
        return other

    def astype(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        self.params.astype(self.dtype)
        return self


def cell_step(model: Model, state: RecurrentState, x_t, phi, ctx: Context | None = None, t: int = 0):
    """Single step on raw inputs; regenerates per-sequence conditioning unless ``ctx`` is given."""
    x = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=model.dtype)
    x = x.reshape(state.h.data.shape[0], -1)
    if not np.all(np.isfinite(x)):
        raise ModelError(f"non-finite input at step {t}")
    if ctx is None:
        ctx = model.prepare(phi)
    return model.step(state, Tensor(x), ctx)


def _as_batch(x, input_dim: int, dtype):
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != input_dim:
        raise ModelError(f"input must be [T], [B, T] or [B, T, {input_dim}], got {np.shape(x)}")
    if arr.shape[1] < 1:
        raise ModelError("input sequence is empty")
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        raise ModelError(f"non-finite input at sample index {int(bad[0][1])}")
    return arr, squeeze


ENGINES = ("fused", "step")


def run_sequence(model: Model, x, phi, state0: RecurrentState | None = None, ctx: Context | None = None,
                 engine: str = "fused"):
    """Run the model over x; returns (y tensor [B, T], final state).

    Records on the active tape, if any. ``engine="fused"`` uses the
    whole-sequence scan ops; ``"step"`` folds :meth:`Model.step` and serves as
    the reference implementation.
    """
    if engine not in ENGINES:
        raise ModelError(f"engine must be one of {ENGINES}, got {engine!r}")
    arr, _ = _as_batch(x, model.config.input_dim, model.dtype)
    B, T, _ = arr.shape
    if ctx is None:
        ctx = model.prepare(phi)
    if ctx.phi.data.shape[0] != B:
        raise ModelError(f"conditioning batch {ctx.phi.data.shape[0]} does not match input batch {B}")
    state = state0 if state0 is not None else model.initial_state(B)
    if state.h.data.shape != (B, model.config.hidden_size):
        raise ModelError(f"state has shape {state.h.data.shape}, expected {(B, model.config.hidden_size)}")
    if engine == "fused":
        return _run_fused(model, arr, ctx, state)
    ys = []
    for t in range(T):
        y, state = model.step(state, Tensor(arr[:, t, :]), ctx)
        ys.append(y)
    return ad.concat(ys, axis=1), state


def _zeros_like_state(t: Tensor | None, ref: Tensor) -> Tensor:
    return t if t is not None else Tensor(np.zeros_like(ref.data))


def _run_fused(model: Model, arr: np.ndarray, ctx: Context, state: RecurrentState):
    from . import scan

    cfg = model.config
    p = model.params
    B, T, D = arr.shape
    H = cfg.hidden_size
    rows = cfg.rows
    X = Tensor(arr)
    h0 = state.h
    c0 = _zeros_like_state(state.c, h0)
    hyper = None
    if cfg.conditioning == "dynamic_hyper":
        n = cfg.dyn_depth + 1
        heads = {
            k: ([p[f"hyper.{k}.l{i}.w"] for i in range(n)], [p[f"hyper.{k}.l{i}.b"] for i in range(n)])
            for k in ("f_h", "f_x", "d_h", "d_x")
        }
        cell = {k: p[f"cell.{k}"] for k in ("w_x", "b_x", "w_h", "b_h")}
        hyp = {k: p[f"hyper.cell.{k}"] for k in ("w_x", "b_x", "w_h", "b_h")}
        hp0 = state.hyper.h
        cp0 = _zeros_like_state(state.hyper.c, hp0)
        Hs, Cs, HPs, CPs = scan.dynamic_scan(cfg.cell_kind, X, ctx.phi, cell, hyp, heads, cfg.leaky_slope,
                                             h0, c0, hp0, cp0)
        hyper = cond.HyperState(HPs[:, -1, :], CPs[:, -1, :] if cfg.cell_kind == "lstm" else None)
    else:
        ones = Tensor(np.ones((B, rows), dtype=model.dtype))
        zeros = Tensor(np.zeros((B, rows), dtype=model.dtype))
        ax = ah = ones
        kind = cfg.conditioning
        if kind == "static_hyper":
            w = ctx.weights
            Wx, sx, Wh, sh = w.w_x, w.b_x, w.w_h, w.b_h
        else:
            Wh = ad.reshape(p["cell.w_h"], (1, rows, H))
            if kind == "concat":
                # conditioning columns contribute a per-sequence constant
                w_all = p["cell.w_x"]
                Wx = ad.reshape(w_all[:, :D], (1, rows, D))
                sx = ad.linear(ctx.phi, w_all[:, D:], p["cell.b_x"])
                sh = ad.bias_add(zeros, p["cell.b_h"])
            else:
                Wx = ad.reshape(p["cell.w_x"], (1, rows, D))
                if kind == "film":
                    ax, ah = ctx.film.alpha_x, ctx.film.alpha_h
                    sx, sh = ctx.shift_x, ctx.shift_h
                else:
                    sx = ad.bias_add(zeros, p["cell.b_x"])
                    sh = ad.bias_add(zeros, p["cell.b_h"])
        Hs, Cs = scan.affine_scan(cfg.cell_kind, X, Wx, ax, sx, Wh, ah, sh, h0, c0)
    head = ad.linear(ad.reshape(Hs, (B * T, H)), p["head.w"], p["head.b"])
    y = ad.reshape(head, (B, T)) + X[:, :, 0]
    final = RecurrentState(Hs[:, -1, :], Cs[:, -1, :] if cfg.cell_kind == "lstm" else None, hyper)
    return y, final


ENGINES_INFERENCE = ("compiled", "reference")


def process_sequence(model: Model, x, phi, state0: RecurrentState | None = None, engine: str = "compiled"):
    """Inference over a whole sequence; returns (y ndarray shaped like x[..., 0], final state).

    ``engine="compiled"`` runs the fused scan kernels; ``"reference"`` folds :meth:`Model.step`.
    """
    if engine not in ENGINES_INFERENCE:
        raise ModelError(f"engine must be one of {ENGINES_INFERENCE}, got {engine!r}")
    with ad.no_grad():
        arr, squeeze = _as_batch(x, model.config.input_dim, model.dtype)
        y, state = run_sequence(model, arr, phi, state0, engine="fused" if engine == "compiled" else "step")
    out = y.data
    return (out[0] if squeeze else out), state.detach()


def process_stream(model: Model, x, phi, block: int = 2048, engine: str = "compiled"):
    """Block-wise processing with carried state; equals ``process_sequence`` on the whole input."""
    if block < 1:
        raise ModelError("block size must be >= 1")
    arr = np.asarray(x, dtype=model.dtype)
    state = None
    out = []
    for start in range(0, arr.shape[-1], block):
        y, state = process_sequence(model, arr[..., start : start + block], phi, state, engine)
        out.append(y)
    return np.concatenate(out, axis=-1)


# ---------------------------------------------------------------- parameter counting


def param_count(model: Model) -> int:
    return model.params.num_trainable()


def closed_form_param_count(cfg: CellConfig) -> int:
    """Trainable scalars implied by the configuration alone."""
    g = gate_count(cfg.cell_kind)
    H = cfg.hidden_size
    rows = g * H

    def cell(in_dim: int, hidden: int) -> int:
        return g * hidden * (in_dim + hidden + 2)

    head = H + 1
    if cfg.conditioning == "static_hyper":
        return cond.mlp_param_count(cond.static_dims(cfg)) + head
    total = cell(cfg.main_input_dim, H) + head
    if cfg.conditioning == "film":
        total += cond.mlp_param_count([cfg.cond_dim] + [cfg.film_hidden] * cfg.film_depth + [4 * rows])
    elif cfg.conditioning == "dynamic_hyper":
        total += cell(H + cfg.cond_dim, cfg.hyper_hidden)
        f = [cfg.hyper_hidden] + [cfg.dyn_hidden] * cfg.dyn_depth + [cfg.z_dim]
        d = [cfg.z_dim] + [cfg.dyn_hidden] * cfg.dyn_depth + [rows]
        total += 2 * cond.mlp_param_count(f) + 2 * cond.mlp_param_count(d)
    return total


# ---------------------------------------------------------------- checkpoints

MAGIC = b"VACKPT\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write config + named f32 tensors (row-major, little-endian) to ``path``."""
    tensors = [(name, t.data) for name, t in model.params.items()]
    tensors += sorted((extra or {}).items())
    entries = []
    payload = []
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "extra": name not in model.params})
        payload.append(a.tobytes())
    header = json.dumps(
        {"config": model.config.to_dict(), "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path, dtype=np.float32):
    """Returns (model, meta, extra tensors)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    config = CellConfig.from_dict(header["config"])
    model = Model(config, dtype=dtype)
    offset = 16 + hlen
    extra: dict[str, np.ndarray] = {}
    seen = set()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += nbytes
        if entry.get("extra"):
            extra[entry["name"]] = arr.copy()
            continue
        if entry["name"] not in model.params:
            raise CheckpointError(f"{path}: unknown parameter {entry['name']!r}")
        if model.params[entry["name"]].data.shape != shape:
            raise CheckpointError(
                f"{path}: parameter {entry['name']!r} has shape {shape}, "
                f"expected {model.params[entry['name']].data.shape}"
            )
        model.params.set(entry["name"], arr)
        seen.add(entry["name"])
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    if param_count(model) != closed_form_param_count(config):
        raise CheckpointError(f"{path}: parameter count mismatch")
    return model, header.get("meta", {}), extra


def config_label(cfg: CellConfig) -> str:
    names = {"concat": "Concat", "film": "FiLM", "static_hyper": "StaticHyper",
             "dynamic_hyper": "DynamicHyper", "none": "Plain"}
    return f"{names[cfg.conditioning]}-{cfg.cell_kind.upper() if cfg.cell_kind != 'vanilla' else 'RNN'}"
