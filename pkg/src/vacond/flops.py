"""Analytical FLOP counts per second of audio for every model configuration.

Counting convention: 2 FLOPs per multiply-accumulate, 1 per bias add,
elementwise product/sum and activation evaluation. FiLM shifts are
sequence-constant and folded into the bias, so they cost one add per row.
Work done once per sequence (FiLM coefficients, StaticHyper weights) is
reported separately and is not part of the per-second total.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .cells import CellConfig, config_label
from .conditioning import dynamic_d_dims, dynamic_f_dims, film_dims, static_dims
from .recurrence import gate_count

COMPONENTS = ("input_projection", "recurrent_projection", "gates", "conditioning", "output_head")

_CELL_ALIASES = {"rnn": "vanilla", "vanilla": "vanilla", "gru": "gru", "lstm": "lstm"}
_COND_ALIASES = {
    "concat": "concat", "film": "film",
    "static_hyper": "static_hyper", "statichyper": "static_hyper", "static": "static_hyper",
    "dynamic_hyper": "dynamic_hyper", "dynamichyper": "dynamic_hyper", "dynamic": "dynamic_hyper",
}


@dataclass
class FlopsReport:
    label: str
    steps_per_second: int
    duration_s: float
    per_step: dict
    one_time_flops: int
    amortized_per_step: float
    total_gflops: float

    @property
    def per_step_total(self) -> int:
        return sum(self.per_step.values())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{self.label}  ({self.steps_per_second} steps/s, {self.duration_s:g} s)"]
        for name in COMPONENTS:
            lines.append(f"  {name:<22}{self.per_step[name]:>12,d} FLOPs/step")
        lines.append(f"  {'per-step total':<22}{self.per_step_total:>12,d} FLOPs/step")
        lines.append(f"  {'one-time generation':<22}{self.one_time_flops:>12,d} FLOPs"
                     f"  ({self.amortized_per_step:.3f}/step amortized)")
        lines.append(f"  {'total':<22}{self.total_gflops:>12.4f} GFLOPs")
        return "\n".join(lines)


def parse_model_label(label: str, **overrides) -> CellConfig:
    """'concat-gru', 'film-lstm', 'statichyper-gru', 'dynamic_hyper-rnn', ..."""
    head, sep, tail = label.lower().rpartition("-")
    if not sep or head not in _COND_ALIASES or tail not in _CELL_ALIASES:
        raise ValueError(
            f"unknown model label {label!r}; expected <conditioning>-<cell> with conditioning in "
            f"{{concat,film,static_hyper,dynamic_hyper}} and cell in {{rnn,gru,lstm}}"
        )
    return CellConfig(cell_kind=_CELL_ALIASES[tail], conditioning=_COND_ALIASES[head], **overrides)


def _mlp_flops(dims: list[int]) -> int:
    total = 0
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        total += 2 * a * b + b
        if i < len(dims) - 2:
            total += b  # LeakyReLU
    return total


def _gate_elementwise(kind: str, hidden: int) -> int:
    """Pre-activation sums plus gate arithmetic after both projections."""
    if kind == "vanilla":
        return 2 * hidden  # add, tanh
    if kind == "gru":
        # r, z: add + sigmoid; n: r*fh, add, tanh; h: (h - n), z*, + n
        return 4 * hidden + 3 * hidden + 3 * hidden
    # i f g o: add + activation; c: f*c + i*g; tanh(c); o*
    return 8 * hidden + 3 * hidden + 2 * hidden


def _cell_flops(kind: str, in_dim: int, hidden: int, bias: bool = True) -> tuple[int, int, int]:
    rows = gate_count(kind) * hidden
    extra = rows if bias else 0
    return 2 * rows * in_dim + extra, 2 * rows * hidden + extra, _gate_elementwise(kind, hidden)


def estimate_flops(cfg: CellConfig, sample_rate: int = 48000, duration_s: float = 1.0) -> FlopsReport:
    if sample_rate < 1:
        raise ValueError("sample_rate must be >= 1")
    if duration_s < 0:
        raise ValueError("duration must be >= 0")
    kind, H, rows = cfg.cell_kind, cfg.hidden_size, cfg.rows
    cond = cfg.conditioning
    one_time = 0
    conditioning = 0
    if cond in ("concat", "none", "static_hyper"):
        inp, rec, gates = _cell_flops(kind, cfg.main_input_dim, H)
        if cond == "static_hyper":
            one_time = _mlp_flops(static_dims(cfg))
    elif cond == "film":
        inp, rec, gates = _cell_flops(kind, cfg.input_dim, H, bias=False)
        conditioning = 2 * rows + 2 * rows  # alpha products, folded shift+bias adds
        one_time = _mlp_flops(film_dims(cfg))
    else:
        inp, rec, gates = _cell_flops(kind, cfg.input_dim, H)
        hx, hh, hg = _cell_flops(kind, H + cfg.cond_dim, cfg.hyper_hidden)
        conditioning = hx + hh + hg
        conditioning += 2 * _mlp_flops(dynamic_f_dims(cfg)) + 2 * _mlp_flops(dynamic_d_dims(cfg))
        conditioning += 2 * rows  # d_h * F_h, d_x * F_x
    head = 2 * H + 1 + 1  # projection, bias, residual
    per_step = dict(zip(COMPONENTS, (inp, rec, gates, conditioning, head)))
    steps = int(round(sample_rate * duration_s))
    return FlopsReport(
        label=config_label(cfg),
        steps_per_second=sample_rate,
        duration_s=float(duration_s),
        per_step=per_step,
        one_time_flops=one_time,
        amortized_per_step=one_time / steps if steps else 0.0,
        total_gflops=steps * sum(per_step.values()) / 1e9,
    )
