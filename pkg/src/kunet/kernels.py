"""Kernel families applied to batches of segments.

Every kernel maps ``(batch, in_len, in_width)`` to ``(batch, out_len, out_width)``.
Parameters live in a plain ``dict[str, Tensor]`` so that the model can
register them under qualified names.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (Tensor, concat, matmul, reshape, sigmoid, softmax,
                     tanh, transpose)

KINDS = ("linear", "mlp", "transformer", "lstm")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    in_len: int
    in_width: int
    out_len: int
    out_width: int
    hidden: int | None = None
    heads: int | None = None
    blocks: int | None = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        for name in ("in_len", "in_width", "out_len", "out_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.kind in ("mlp", "transformer", "lstm") and (self.hidden is None or self.hidden < 1):
            raise ConfigError(f"{self.kind} kernel needs hidden >= 1")
        if self.kind == "transformer":
            if self.heads is None or self.blocks is None or self.heads < 1 or self.blocks < 1:
                raise ConfigError("transformer kernel needs heads >= 1 and blocks >= 1")
            if self.hidden % self.heads:
                raise ConfigError(f"model width {self.hidden} is not divisible by {self.heads} heads")
        elif self.heads is not None or self.blocks is not None:
            raise ConfigError(f"heads/blocks only apply to transformer kernels, not {self.kind}")
        if self.kind in ("transformer", "lstm") and self.in_len > 1 and self.out_len > 1:
            raise ConfigError(
                f"{self.kind} kernel reduces to one token or expands from one token; "
                f"got in_len={self.in_len}, out_len={self.out_len}")

    @property
    def expands(self) -> bool:
        """True for the decoder direction: one token in, several out."""
        return self.in_len == 1 and self.out_len > 1

    @property
    def tokens(self) -> int:
        """Sequence length the attention or recurrence runs over."""
        return self.out_len if self.expands else self.in_len


def param_shapes(spec: KernelSpec) -> dict[str, tuple[tuple[int, ...], int]]:
    """Name -> (shape, fan_in) for every parameter of ``spec``."""
    n_in = spec.in_len * spec.in_width
    n_out = spec.out_len * spec.out_width
    if spec.kind == "linear":
        return {"w": ((n_in, n_out), n_in), "b": ((n_out,), n_in)}
    if spec.kind == "mlp":
        h = spec.hidden
        return {"w1": ((n_in, h), n_in), "b1": ((h,), n_in),
                "w2": ((h, n_out), h), "b2": ((n_out,), h)}
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    d = spec.hidden
    if spec.kind == "transformer":
        emb = spec.out_len * d if spec.expands else d
        shapes["w_embed"] = ((spec.in_width, emb), spec.in_width)
        shapes["b_embed"] = ((emb,), spec.in_width)
        for k in range(spec.blocks):
            for name in ("wq", "wk", "wv", "wo", "w_ff"):
                shapes[f"block{k}.{name}"] = ((d, d), d)
            shapes[f"block{k}.b_ff"] = ((d,), d)
    else:
        cell_in = spec.in_width
        if spec.expands:
            shapes["w_in"] = ((spec.in_width, spec.out_len * cell_in), spec.in_width)
            shapes["b_in"] = ((spec.out_len * cell_in,), spec.in_width)
        for gate in ("f", "i", "C", "o"):
            shapes[f"W_{gate}"] = ((d + cell_in, d), d + cell_in)
            shapes[f"b_{gate}"] = ((d,), d + cell_in)
    shapes["w_out"] = ((spec.tokens * d, n_out), spec.tokens * d)
    shapes["b_out"] = ((n_out,), spec.tokens * d)
    return shapes


def parameter_count(spec: KernelSpec) -> int:
    """Closed-form parameter count, written independently of :func:`param_shapes`."""
    n_in = spec.in_len * spec.in_width
    n_out = spec.out_len * spec.out_width
    if spec.kind == "linear":
        return n_in * n_out + n_out
    h = spec.hidden
    if spec.kind == "mlp":
        return n_in * h + h + h * n_out + n_out
    head = spec.tokens * h * n_out + n_out
    if spec.kind == "transformer":
        embed = (spec.in_width + 1) * (spec.out_len * h if spec.expands else h)
        return embed + spec.blocks * (5 * h * h + h) + head
    m = spec.in_width
    expand = (m + 1) * spec.out_len * m if spec.expands else 0
    return expand + 4 * ((h + m) * h + h) + head


def init_params(spec: KernelSpec, rng: np.random.Generator, dtype=np.float64) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor."""
    params = {}
    for name, (shape, fan_in) in param_shapes(spec).items():
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)
    return params


# -- building blocks ---------------------------------------------------------

def _flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def _check_input(x: Tensor, length: int, width: int, kind: str) -> None:
    if x.ndim != 3 or x.shape[1] != length or x.shape[2] != width:
        raise DimensionError(f"{kind} kernel expects (batch, {length}, {width}), got {x.shape}")


def linear_forward(x: Tensor, params: dict[str, Tensor], out_len: int, out_width: int) -> Tensor:
    y = matmul(_flatten(x), params["w"]) + params["b"]
    return reshape(y, (x.shape[0], out_len, out_width))


def mlp_forward(x: Tensor, params: dict[str, Tensor], out_len: int, out_width: int) -> Tensor:
    hidden = tanh(matmul(_flatten(x), params["w1"]) + params["b1"])
    y = matmul(hidden, params["w2"]) + params["b2"]
    return reshape(y, (x.shape[0], out_len, out_width))


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table: sin on even dimensions, cos on odd ones, frequency 10000**(-2*(i//2)/d)."""
    if d < 1 or length < 1:
        raise ConfigError(f"positional encoding needs length, d >= 1, got {length}, {d}")
    t = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d)
    omega = 10000.0 ** (-2.0 * (i // 2) / d)
    angle = t * omega[None, :]
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes; leading axes are batch."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: query width {q.shape} and key width {k.shape} differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scores = matmul(q, _swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def multi_head_attention(x: Tensor, params: dict[str, Tensor], heads: int, prefix: str = "") -> Tensor:
    """Self-attention with ``heads`` heads.

    ``wq``/``wk``/``wv`` are stored as (d, d); columns ``h*d_k:(h+1)*d_k`` hold
    head ``h``'s projection.  Heads are concatenated in order and projected by ``wo``.
    """
    batch, length, d = x.shape
    if d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, dk)), (0, 2, 1, 3))

    q = split(matmul(x, params[prefix + "wq"]))
    k = split(matmul(x, params[prefix + "wk"]))
    v = split(matmul(x, params[prefix + "wv"]))
    heads_out = attention(q, k, v)
    merged = reshape(transpose(heads_out, (0, 2, 1, 3)), (batch, length, d))
    return matmul(merged, params[prefix + "wo"])


def transformer_kernel_forward(x: Tensor, params: dict[str, Tensor], spec: KernelSpec) -> Tensor:
    batch = x.shape[0]
    d = spec.hidden
    if spec.expands:
        tokens = matmul(_flatten(x), params["w_embed"]) + params["b_embed"]
        h = reshape(tokens, (batch, spec.out_len, d))
    else:
        h = matmul(x, params["w_embed"]) + params["b_embed"]
    h = h + Tensor(positional_encoding(spec.tokens, d), dtype=h.dtype)
    for k in range(spec.blocks):
        pre = f"block{k}."
        h = h + multi_head_attention(h, params, spec.heads, prefix=pre)
        h = h + tanh(matmul(h, params[pre + "w_ff"]) + params[pre + "b_ff"])
    y = matmul(_flatten(h), params["w_out"]) + params["b_out"]
    return reshape(y, (batch, spec.out_len, spec.out_width))


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM update; each gate acts on the concatenation [h_prev, x_t]."""
    if h_prev.shape != c_prev.shape or x_t.shape[0] != h_prev.shape[0]:
        raise DimensionError(f"lstm_step: x {x_t.shape}, h {h_prev.shape}, C {c_prev.shape} disagree")
    if params["W_f"].shape[0] != h_prev.shape[1] + x_t.shape[1]:
        raise DimensionError(
            f"lstm_step: gate weights {params['W_f'].shape} do not fit [h, x] of width "
            f"{h_prev.shape[1] + x_t.shape[1]}")
    hx = concat([h_prev, x_t], axis=-1)
    f = sigmoid(matmul(hx, params["W_f"]) + params["b_f"])
    i = sigmoid(matmul(hx, params["W_i"]) + params["b_i"])
    c_cand = tanh(matmul(hx, params["W_C"]) + params["b_C"])
    c = f * c_prev + i * c_cand
    o = sigmoid(matmul(hx, params["W_o"]) + params["b_o"])
    return o * tanh(c), c


def lstm_kernel_forward(x: Tensor, params: dict[str, Tensor], spec: KernelSpec) -> Tensor:
    batch = x.shape[0]
    if spec.expands:
        seq = matmul(_flatten(x), params["w_in"]) + params["b_in"]
        seq = reshape(seq, (batch, spec.out_len, spec.in_width))
    else:
        seq = x
    zeros = np.zeros((batch, spec.hidden), dtype=x.dtype)
    h, c = Tensor(zeros), Tensor(zeros)
    states = []
    for t in range(spec.tokens):
        h, c = lstm_step(seq[:, t, :], h, c, params)
        states.append(h)
    y = matmul(concat(states, axis=-1), params["w_out"]) + params["b_out"]
    return reshape(y, (batch, spec.out_len, spec.out_width))


class Kernel:
    """A kernel instance: a spec plus its parameter tensors."""

    def __init__(self, spec: KernelSpec, params: dict[str, Tensor]):
        expected = {name: shape for name, (shape, _) in param_shapes(spec).items()}
        got = {name: t.shape for name, t in params.items()}
        if expected != got:
            raise ConfigError(f"parameters {got} do not match {spec.kind} spec {expected}")
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: KernelSpec, rng: np.random.Generator, dtype=np.float64) -> "Kernel":
        return cls(spec, init_params(spec, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        s = self.spec
        _check_input(x, s.in_len, s.in_width, s.kind)
        if s.kind == "linear":
            return linear_forward(x, self.params, s.out_len, s.out_width)
        if s.kind == "mlp":
            return mlp_forward(x, self.params, s.out_len, s.out_width)
        if s.kind == "transformer":
            return transformer_kernel_forward(x, self.params, s)
        return lstm_kernel_forward(x, self.params, s)

    def attention_macs(self, segments: int) -> int:
        """Multiply-accumulates spent on attention scores for ``segments`` segments."""
        if self.spec.kind != "transformer":
            return 0
        return segments * self.spec.tokens ** 2 * self.spec.hidden * self.spec.blocks
