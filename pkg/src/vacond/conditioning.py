"""Conditioning mechanisms: concatenation, FiLM, static and dynamic hypernetworks.

Every generator is a pure function of (conditioning, parameters). Coefficient
vectors cover the stacked gate pre-activations, one entry per row of the
[gates*H] gate matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .recurrence import gate_count, gate_update

if TYPE_CHECKING:
    from .cells import CellConfig

CONDITIONINGS = ("concat", "film", "static_hyper", "dynamic_hyper")


class ConditioningError(ValueError):
    pass


def as_conditioning(phi, cond_dim: int, dtype=np.float64) -> Tensor:
    """Validate normalized knob values and return a [batch, cond_dim] tensor."""
    if isinstance(phi, Tensor):
        t = phi
    else:
        arr = np.asarray(phi, dtype=dtype)
        t = Tensor(arr.reshape(1, -1) if arr.ndim == 1 else arr)
    if t.data.ndim == 1:
        t = ad.reshape(t, (1, -1))
    if t.data.ndim != 2 or t.data.shape[1] != cond_dim:
        raise ConditioningError(f"conditioning must have {cond_dim} values per item, got shape {t.data.shape}")
    if not np.all(np.isfinite(t.data)) or np.any(np.abs(t.data) > 1.0):
        raise ConditioningError(f"conditioning values must lie in [-1, 1], got {t.data.tolist()}")
    return t


# ---------------------------------------------------------------- MLP helpers


def init_mlp(params: ParamStore, prefix: str, dims: list[int], rng: np.random.Generator, dtype,
             head_weight_scale: float = 1.0, head_bias=None) -> None:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases; the last layer may be rescaled."""
    n = len(dims) - 1
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = ad.xavier_bound(fan_in)
        scale = head_weight_scale if i == n - 1 else 1.0
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)) * scale
        b = np.zeros(fan_out)
        if i == n - 1 and head_bias is not None:
            b = np.asarray(head_bias, dtype=np.float64)
        params.add(f"{prefix}.l{i}.w", w, dtype=dtype)
        params.add(f"{prefix}.l{i}.b", b, dtype=dtype)


def mlp(params: ParamStore, prefix: str, x: Tensor, n_layers: int, slope: float = 0.1) -> Tensor:
    """LeakyReLU between layers, linear output."""
    for i in range(n_layers):
        x = ad.linear(x, params[f"{prefix}.l{i}.w"], params[f"{prefix}.l{i}.b"])
        if i < n_layers - 1:
            x = ad.leaky_relu(x, slope)
    return x


def mlp_param_count(dims: list[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


# ---------------------------------------------------------------- FiLM


@dataclass
class FiLMCoeffs:
    alpha_h: Tensor
    beta_h: Tensor
    alpha_x: Tensor
    beta_x: Tensor


def film_dims(cfg: "CellConfig") -> list[int]:
    rows = gate_count(cfg.cell_kind) * cfg.hidden_size
    return [cfg.cond_dim] + [cfg.film_hidden] * cfg.film_depth + [4 * rows]


def init_film(params: ParamStore, cfg: "CellConfig", rng, dtype) -> None:
    rows = gate_count(cfg.cell_kind) * cfg.hidden_size
    # alpha = 1, beta = 0 for every phi: zero head weights
    head_bias = np.concatenate([np.ones(rows), np.zeros(rows), np.ones(rows), np.zeros(rows)])
    init_mlp(params, "film", film_dims(cfg), rng, dtype, head_weight_scale=0.0, head_bias=head_bias)


def film_generate(phi, params: ParamStore, cfg: "CellConfig") -> FiLMCoeffs:
    phi = as_conditioning(phi, cfg.cond_dim, params["film.l0.w"].data.dtype)
    out = mlp(params, "film", phi, cfg.film_depth + 1, cfg.leaky_slope)
    rows = gate_count(cfg.cell_kind) * cfg.hidden_size
    return FiLMCoeffs(
        alpha_h=out[:, :rows],
        beta_h=out[:, rows : 2 * rows],
        alpha_x=out[:, 2 * rows : 3 * rows],
        beta_x=out[:, 3 * rows :],
    )


def film_apply(F: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """alpha * F + beta, elementwise."""
    if not (F.data.shape == alpha.data.shape == beta.data.shape):
        raise ad.ShapeError(
            f"film_apply: feature map {F.data.shape}, alpha {alpha.data.shape}, beta {beta.data.shape}"
        )
    return alpha * F + beta


# ---------------------------------------------------------------- static hypernetwork


@dataclass
class WeightBundle:
    """Per-item recurrent weights. Leading axis is the batch."""

    w_x: Tensor  # [B, gates*H, input_dim]
    w_h: Tensor  # [B, gates*H, H]
    b_x: Tensor  # [B, gates*H]
    b_h: Tensor  # [B, gates*H]


def static_flat_size(cfg: "CellConfig") -> int:
    rows = gate_count(cfg.cell_kind) * cfg.hidden_size
    return rows * (cfg.input_dim + cfg.hidden_size + 2)


def static_dims(cfg: "CellConfig") -> list[int]:
    return [cfg.cond_dim] + [cfg.hyper_hidden] * cfg.static_depth + [static_flat_size(cfg)]


def init_static(params: ParamStore, cfg: "CellConfig", rng, dtype, backbone_init) -> None:
    """Small head weights; head bias holds a regular backbone initialization."""
    w_x, w_h, b_x, b_h = backbone_init
    bias = np.concatenate([w_x.ravel(), w_h.ravel(), b_x, b_h])
    init_mlp(params, "static", static_dims(cfg), rng, dtype, head_weight_scale=0.1, head_bias=bias)


def statichyper_generate(phi, params: ParamStore, cfg: "CellConfig") -> WeightBundle:
    phi = as_conditioning(phi, cfg.cond_dim, params["static.l0.w"].data.dtype)
    flat = mlp(params, "static", phi, cfg.static_depth + 1, cfg.leaky_slope)
    B = flat.data.shape[0]
    rows = gate_count(cfg.cell_kind) * cfg.hidden_size
    n_x = rows * cfg.input_dim
    n_h = rows * cfg.hidden_size
    o = 0
    w_x = ad.reshape(flat[:, o : o + n_x], (B, rows, cfg.input_dim))
    o += n_x
    w_h = ad.reshape(flat[:, o : o + n_h], (B, rows, cfg.hidden_size))
    o += n_h
    b_x = flat[:, o : o + rows]
    o += rows
    b_h = flat[:, o : o + rows]
    return WeightBundle(w_x, w_h, b_x, b_h)


# ---------------------------------------------------------------- dynamic hypernetwork


@dataclass
class HyperState:
    h: Tensor
    c: Tensor | None = None

    def detach(self) -> "HyperState":
        return HyperState(self.h.detach(), None if self.c is None else self.c.detach())


def hyper_input_dim(cfg: "CellConfig") -> int:
    return cfg.hidden_size + cfg.cond_dim


def dynamic_f_dims(cfg: "CellConfig") -> list[int]:
    return [cfg.hyper_hidden] + [cfg.dyn_hidden] * cfg.dyn_depth + [cfg.z_dim]


def dynamic_d_dims(cfg: "CellConfig") -> list[int]:
    rows = gate_count(cfg.cell_kind) * cfg.hidden_size
    return [cfg.z_dim] + [cfg.dyn_hidden] * cfg.dyn_depth + [rows]


def init_dynamic(params: ParamStore, cfg: "CellConfig", rng, dtype, cell_init) -> None:
    """``cell_init(prefix, rows, in_dim, hidden)`` adds a backbone-style recurrent cell."""
    rows = gate_count(cfg.cell_kind) * cfg.hidden_size
    cell_init("hyper.cell", hyper_input_dim(cfg), cfg.hyper_hidden)
    init_mlp(params, "hyper.f_h", dynamic_f_dims(cfg), rng, dtype)
    init_mlp(params, "hyper.f_x", dynamic_f_dims(cfg), rng, dtype)
    # d heads output exactly one at init
    init_mlp(params, "hyper.d_h", dynamic_d_dims(cfg), rng, dtype, head_weight_scale=0.0, head_bias=np.ones(rows))
    init_mlp(params, "hyper.d_x", dynamic_d_dims(cfg), rng, dtype, head_weight_scale=0.0, head_bias=np.ones(rows))


def initial_hyper_state(cfg: "CellConfig", batch: int, dtype) -> HyperState:
    z = np.zeros((batch, cfg.hyper_hidden), dtype=dtype)
    return HyperState(Tensor(z), Tensor(z.copy()) if cfg.cell_kind == "lstm" else None)


def dynamichyper_step(phi: Tensor, h_main_prev: Tensor, hyper_state: HyperState, params: ParamStore,
                      cfg: "CellConfig"):
    """One hyperRNN step on [h_main_prev; phi], then z_h = f_h(h^p), z_x = f_x(h^p)."""
    if hyper_state.h.data.shape[1] != cfg.hyper_hidden:
        raise ConditioningError(
            f"hyper state has size {hyper_state.h.data.shape[1]}, configuration says {cfg.hyper_hidden}"
        )
    if h_main_prev.data.shape[1] != cfg.hidden_size:
        raise ConditioningError(f"main hidden state has size {h_main_prev.data.shape[1]}, expected {cfg.hidden_size}")
    xp = ad.concat([h_main_prev, phi], axis=1)
    fx = ad.linear(xp, params["hyper.cell.w_x"], params["hyper.cell.b_x"])
    fh = ad.linear(hyper_state.h, params["hyper.cell.w_h"], params["hyper.cell.b_h"])
    hp, cp = gate_update(cfg.cell_kind, fx, fh, hyper_state.h, hyper_state.c)
    depth = cfg.dyn_depth + 1
    z_h = mlp(params, "hyper.f_h", hp, depth, cfg.leaky_slope)
    z_x = mlp(params, "hyper.f_x", hp, depth, cfg.leaky_slope)
    return z_h, z_x, HyperState(hp, cp)


def dynamic_modulate(z_h: Tensor, z_x: Tensor, F_h: Tensor, F_x: Tensor, params: ParamStore,
                     cfg: "CellConfig"):
    """(d_h(z_h) * F_h, d_x(z_x) * F_x)."""
    depth = cfg.dyn_depth + 1
    d_h = mlp(params, "hyper.d_h", z_h, depth, cfg.leaky_slope)
    d_x = mlp(params, "hyper.d_x", z_x, depth, cfg.leaky_slope)
    if d_h.data.shape != F_h.data.shape or d_x.data.shape != F_x.data.shape:
        raise ad.ShapeError(
            f"dynamic_modulate: d_h {d_h.data.shape} vs F_h {F_h.data.shape}, d_x {d_x.data.shape} vs F_x {F_x.data.shape}"
        )
    return d_h * F_h, d_x * F_x
