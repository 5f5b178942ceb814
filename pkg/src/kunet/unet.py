"""Kernel U-Net: encoder/decoder stacks of kernel wrappers joined by skips."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, DimensionError
from .kernels import Kernel, KernelSpec, parameter_count
from .partition import (PartitionPlan, feature_transpose, feature_untranspose, horizon_plan,
                        merge_level, slice_level, validate)
from .tensor import Tensor, as_tensor, matmul, no_grad, reshape, transpose

VARIANTS = ("linear", "linear-1-hidden", "linear-5-hidden", "transformer", "lstm")

_INNER_KIND = {"linear": "linear", "linear-1-hidden": "mlp", "linear-5-hidden": "mlp",
               "transformer": "transformer", "lstm": "lstm"}

CHECKPOINT_FORMAT = "kunet-checkpoint/1"


class KernelWrapper:
    """Reshapes its input, adds the pending skip, applies the kernel, remembers the output."""

    def __init__(self, kernel: Kernel, name: str):
        self.kernel = kernel
        self.name = name
        self.skip_output: Tensor | None = None
        self.skip_input: Tensor | None = None

    @property
    def spec(self) -> KernelSpec:
        return self.kernel.spec

    @property
    def params(self) -> dict[str, Tensor]:
        return self.kernel.params

    def clear(self) -> None:
        self.skip_output = None
        self.skip_input = None

    def __call__(self, x: Tensor) -> Tensor:
        x = reshape(x, (-1, self.spec.in_len, self.spec.in_width))
        if self.skip_input is not None:
            if self.skip_input.shape != x.shape:
                raise DimensionError(f"{self.name}: skip {self.skip_input.shape} does not match input {x.shape}")
            x = x + self.skip_input
        y = self.kernel(x)
        self.skip_output = y
        return y


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model besides its parameter values."""

    plan: PartitionPlan
    variant: str = "linear"
    kernel_overrides: dict = field(default_factory=dict)
    heads: int = 2
    blocks: int = 1
    mlp_hidden: int | None = None
    lstm_hidden: int | None = None
    d_model: int | None = None
    skips: bool = True
    seed: int = 0
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(), "variant": self.variant,
            "kernel_overrides": [[list(k) if isinstance(k, tuple) else k, v]
                                 for k, v in self.kernel_overrides.items()],
            "heads": self.heads, "blocks": self.blocks, "mlp_hidden": self.mlp_hidden,
            "lstm_hidden": self.lstm_hidden, "d_model": self.d_model, "skips": self.skips,
            "seed": self.seed, "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["plan"] = PartitionPlan.from_dict(data["plan"])
        data["kernel_overrides"] = {tuple(k) if isinstance(k, list) else k: v
                                    for k, v in data["kernel_overrides"]}
        return cls(**data)


class KUNetModel:
    def __init__(self, config: ModelConfig, encoder: list[KernelWrapper], decoder: list[KernelWrapper],
                 adapters: dict[int, dict[str, Tensor]]):
        self.config = config
        self.plan = config.plan
        self.variant = config.variant
        self.encoder = encoder
        self.decoder = decoder
        self.adapters = adapters
        self.registry: dict[str, Tensor] = {}
        for side, wrappers in (("encoder", encoder), ("decoder", decoder)):
            for i, w in enumerate(wrappers):
                for pname, t in w.params.items():
                    self._register(f"{side}.{i}.{pname}", t)
        for level, params in adapters.items():
            for pname, t in params.items():
                self._register(f"skip_adapter.{level}.{pname}", t)

    def _register(self, name: str, tensor: Tensor) -> None:
        if name in self.registry or any(t is tensor for t in self.registry.values()):
            raise ConfigError(f"parameter {name} registered twice")
        self.registry[name] = tensor

    def parameters(self) -> list[Tensor]:
        return list(self.registry.values())

    def zero_grad(self) -> None:
        for t in self.registry.values():
            t.grad = None

    def mirror(self, level: int) -> int:
        """Decoder position of the wrapper mirroring encoder level ``level`` (0-based)."""
        return len(self.encoder) - 1 - level

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return forward(self, Tensor(x, dtype=np.dtype(self.config.dtype))).data


# -- construction ---------------------------------------------------------------

def layer_kinds(n_levels: int, variant: str) -> list[str]:
    """Kernel kind per encoder level (outermost first) for a named variant."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant in ("linear", "linear-5-hidden"):
        return [_INNER_KIND[variant]] * n_levels
    inner = min(2, n_levels)
    return ["linear"] * (n_levels - inner) + [_INNER_KIND[variant]] * inner


def _resolve_overrides(overrides: Mapping, n_levels: int) -> tuple[dict[int, dict], dict[int, dict]]:
    enc: dict[int, dict] = {}
    dec: dict[int, dict] = {}
    for key, value in (overrides or {}).items():
        if isinstance(key, (tuple, list)):
            side, level = key
            sides = {"encoder": (enc,), "decoder": (dec,)}.get(side)
            if sides is None:
                raise ConfigError(f"override side must be 'encoder' or 'decoder', got {side!r}")
        else:
            level, sides = key, (enc, dec)
        level = int(level)
        if not 1 <= level <= n_levels:
            raise ConfigError(f"override level {level} outside 1..{n_levels}")
        value = {"kind": value} if isinstance(value, str) else dict(value)
        if "kind" not in value:
            raise ConfigError(f"override for level {level} needs a 'kind'")
        for target in sides:
            target[level - 1] = value
    return enc, dec


def _kernel_spec(kind: str, extra: dict, cfg: ModelConfig, in_len, in_width, out_len, out_width) -> KernelSpec:
    hidden = cfg.plan.hidden
    kw: dict = {}
    if kind == "mlp":
        kw["hidden"] = extra.get("hidden", cfg.mlp_hidden or hidden)
    elif kind == "transformer":
        kw["hidden"] = extra.get("hidden", cfg.d_model or hidden)
        kw["heads"] = extra.get("heads", cfg.heads)
        kw["blocks"] = extra.get("blocks", cfg.blocks)
    elif kind == "lstm":
        kw["hidden"] = extra.get("hidden", cfg.lstm_hidden or hidden)
    unknown = set(extra) - {"kind", "hidden", "heads", "blocks"}
    if unknown:
        raise ConfigError(f"unknown kernel override fields {sorted(unknown)}")
    return KernelSpec(kind, in_len, in_width, out_len, out_width, **kw)


def layer_specs(cfg: ModelConfig) -> tuple[list[KernelSpec], list[KernelSpec]]:
    """Kernel specs for the encoder (outermost first) and decoder (innermost first)."""
    plan = cfg.plan
    n = plan.n_levels
    kinds = layer_kinds(n, cfg.variant)
    enc_over, dec_over = _resolve_overrides(cfg.kernel_overrides, n)
    latent_len, latent_width = plan.latent
    levels, out_levels = plan.levels, plan.output_levels
    encoder, decoder = [], []
    for i in range(n):
        last = i == n - 1
        extra = enc_over.get(i, {"kind": kinds[i]})
        encoder.append(_kernel_spec(
            extra["kind"], extra, cfg,
            levels[i], plan.unit_width if i == 0 else plan.hidden,
            latent_len if last else 1, latent_width if last else plan.hidden))
    for i in reversed(range(n)):
        last = i == n - 1
        extra = dec_over.get(i, {"kind": kinds[i]})
        decoder.append(_kernel_spec(
            extra["kind"], extra, cfg,
            latent_len if last else 1, latent_width if last else plan.hidden,
            out_levels[i], plan.unit_width if i == 0 else plan.hidden))
    return encoder, decoder


def adapter_shapes(plan: PartitionPlan) -> dict[int, tuple[int, int]]:
    """Look-back levels whose skip needs re-arranging: level -> (encoder segments, decoder segments).

    Counts are per window and per feature group, so they only involve the
    look-back schedules.
    """
    n = plan.n_lookback_levels
    enc = [plan.levels[i + 1:n] for i in range(n)]
    dec = [plan.output_levels[i + 1:n] for i in range(n)]
    shapes = {}
    for i in range(n):
        p_enc, p_dec = math.prod(enc[i]), math.prod(dec[i])
        if p_enc != p_dec:
            shapes[i] = (p_enc, p_dec)
    return shapes


def build(plan: PartitionPlan, variant: str = "linear", kernel_overrides: Mapping | None = None, *,
          seed: int = 0, dtype: str = "float64", heads: int = 2, blocks: int = 1,
          mlp_hidden: int | None = None, lstm_hidden: int | None = None, d_model: int | None = None,
          skips: bool = True) -> KUNetModel:
    """Assemble a Kernel U-Net for ``plan``.

    ``variant`` picks the kernels per level; ``kernel_overrides`` maps an
    encoder level (1 = outermost) to a kind or a dict with ``kind`` and
    optional ``hidden``/``heads``/``blocks``.  An int key affects the encoder
    level and its decoder mirror; ``("encoder", k)`` or ``("decoder", k)``
    touches one side only.
    """
    validate(plan)
    cfg = ModelConfig(plan=plan, variant=variant, kernel_overrides=dict(kernel_overrides or {}),
                      heads=heads, blocks=blocks, mlp_hidden=mlp_hidden, lstm_hidden=lstm_hidden,
                      d_model=d_model, skips=skips, seed=seed, dtype=dtype)
    return build_from_config(cfg)


def build_from_config(cfg: ModelConfig) -> KUNetModel:
    validate(cfg.plan)
    if cfg.dtype not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, got {cfg.dtype!r}")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    enc_specs, dec_specs = layer_specs(cfg)
    encoder = [KernelWrapper(Kernel.create(s, rng, dtype), f"encoder.{i}") for i, s in enumerate(enc_specs)]
    decoder = [KernelWrapper(Kernel.create(s, rng, dtype), f"decoder.{i}") for i, s in enumerate(dec_specs)]
    adapters = {}
    if cfg.skips:
        for level, (p_enc, p_dec) in adapter_shapes(cfg.plan).items():
            bound = 1.0 / math.sqrt(p_enc)
            adapters[level] = {
                "w": Tensor(rng.uniform(-bound, bound, (p_enc, p_dec)), requires_grad=True, dtype=dtype),
                "b": Tensor(rng.uniform(-bound, bound, (p_dec,)), requires_grad=True, dtype=dtype),
            }
    return KUNetModel(cfg, encoder, decoder, adapters)


# -- forward ----------------------------------------------------------------------

def _adapt_skip(skip: Tensor, params: dict[str, Tensor], p_enc: int, p_dec: int) -> Tensor:
    rows, length, width = skip.shape
    groups = rows // p_enc
    s = transpose(reshape(skip, (groups, p_enc, length * width)), (0, 2, 1))
    s = matmul(s, params["w"]) + params["b"]
    return reshape(transpose(s, (0, 2, 1)), (groups * p_dec, length, width))


def forward(model: KUNetModel, x) -> Tensor:
    """Encode ``x`` (B, L, M) to the latent, decode to (B, horizon, M)."""
    plan = model.plan
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (plan.lookback, plan.features):
        raise DimensionError(f"input {x.shape} does not match plan (B, {plan.lookback}, {plan.features})")
    batch = x.shape[0]
    for w in model.encoder + model.decoder:
        w.clear()

    h = feature_transpose(x, plan)
    for i, wrapper in enumerate(model.encoder):
        if i > 0:
            h = merge_level(h, plan.levels[i])
        h = wrapper(h)

    if model.config.skips:
        shapes = adapter_shapes(plan)
        for i in range(plan.n_lookback_levels):
            skip = model.encoder[i].skip_output
            if i in shapes:
                skip = _adapt_skip(skip, model.adapters[i], *shapes[i])
            model.decoder[model.mirror(i)].skip_input = skip

    out_levels = plan.output_levels
    for j, wrapper in enumerate(model.decoder):
        h = wrapper(h)
        level = len(model.decoder) - 1 - j
        if level > 0:
            h = slice_level(h, out_levels[level])
    return feature_untranspose(h, plan, batch, unit_len=plan.output_unit)


def forecast(model: KUNetModel, window, horizon: int | None = None) -> Tensor:
    """Predict the ``horizon`` steps that follow ``window``; the decoder fixes the horizon."""
    if horizon is not None and horizon != model.plan.horizon:
        raise ConfigError(f"model decodes {model.plan.horizon} steps, asked for {horizon}")
    return forward(model, window)


def build_forecaster(plan: PartitionPlan, horizon: int, variant: str = "linear", *, output_unit: int | None = None,
                     output_multiples=None, **kwargs) -> KUNetModel:
    """Build a model whose decoder emits ``horizon`` steps instead of mirroring the look-back."""
    return build(horizon_plan(plan, horizon, output_unit, output_multiples), variant, **kwargs)


# -- accounting ------------------------------------------------------------------------

@dataclass
class ParameterCount:
    total: int
    per_layer: dict[str, int]


def count_parameters(model: KUNetModel) -> ParameterCount:
    """Closed-form count from the layer specs, independent of the allocated tensors."""
    per_layer = {}
    for side, wrappers in (("encoder", model.encoder), ("decoder", model.decoder)):
        for i, w in enumerate(wrappers):
            per_layer[f"{side}.{i}"] = parameter_count(w.spec)
    if model.config.skips:
        for level, (p_enc, p_dec) in adapter_shapes(model.plan).items():
            per_layer[f"skip_adapter.{level}"] = p_enc * p_dec + p_dec
    return ParameterCount(sum(per_layer.values()), per_layer)


def registry_count(model: KUNetModel) -> int:
    return sum(t.size for t in model.registry.values())


@dataclass
class AttentionCost:
    total: int
    per_layer: dict[str, int]


def attention_cost(model: KUNetModel, batch: int = 1) -> AttentionCost:
    """Attention-score multiply-accumulates for one forward pass over ``batch`` windows."""
    plan = model.plan
    enc_segments = plan.segments(batch)
    dec_segments = plan.output_segments(batch)
    per_layer = {}
    for i, w in enumerate(model.encoder):
        per_layer[f"encoder.{i}"] = w.kernel.attention_macs(enc_segments[i])
    for j, w in enumerate(model.decoder):
        level = len(model.decoder) - 1 - j
        per_layer[f"decoder.{j}"] = w.kernel.attention_macs(dec_segments[level])
    return AttentionCost(sum(per_layer.values()), per_layer)


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(model: KUNetModel, path: str | Path) -> Path:
    """Write an ``.npz`` holding a JSON header and one array per registered parameter.

    The header (array ``__meta__``) records the format tag, the model config
    and each parameter's shape; arrays are stored at full precision so a
    reload is bit-exact.
    """
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "shapes": {name: list(t.shape) for name, t in model.registry.items()},
    }
    arrays = {name: t.data for name, t in model.registry.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path) -> KUNetModel:
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        model = build_from_config(ModelConfig.from_dict(meta["config"]))
        if set(meta["shapes"]) != set(model.registry):
            raise ConfigError(f"{path}: parameter names do not match the rebuilt model")
        for name, t in model.registry.items():
            arr = archive[name]
            if list(arr.shape) != meta["shapes"][name] or arr.shape != t.shape:
                raise ConfigError(f"{path}: parameter {name} has shape {arr.shape}, expected {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)
    return model
