"""Multiples schedules and the hierarchical slice/merge reshapes.

A look-back window of length ``lookback`` is cut into ``unit_len``-long
segments, which are then grouped level by level according to
``len_multiples`` (outermost first).  Features are treated the same way
with ``unit_width`` and ``feature_multiples``.  All rearrangements are
row-major reshapes plus a single transpose that brings the feature groups
in front of the look-back groups.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, reshape, transpose


class PlanError(ConfigError):
    """An invalid multiples schedule."""


def _prod(values) -> int:
    return int(math.prod(values))


@dataclass(frozen=True)
class PartitionPlan:
    """Schedule of segment lengths for every level of the U-Net.

    ``horizon_unit``/``horizon_multiples`` describe the decoder's output
    schedule; when omitted the decoder mirrors the look-back schedule.
    """

    lookback: int
    unit_len: int
    len_multiples: tuple[int, ...] = ()
    features: int = 1
    unit_width: int = 1
    feature_multiples: tuple[int, ...] = ()
    hidden: int = 128
    latent_len: int = 1
    latent_width: int | None = None
    horizon_unit: int | None = None
    horizon_multiples: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "len_multiples", tuple(int(v) for v in self.len_multiples))
        object.__setattr__(self, "feature_multiples", tuple(int(v) for v in self.feature_multiples))
        if self.horizon_multiples is not None:
            object.__setattr__(self, "horizon_multiples", tuple(int(v) for v in self.horizon_multiples))

    # -- derived quantities --------------------------------------------------
    @property
    def latent(self) -> tuple[int, int]:
        return self.latent_len, (self.latent_width if self.latent_width is not None else self.hidden)

    @property
    def n_lookback_levels(self) -> int:
        return 1 + len(self.len_multiples)

    @property
    def n_levels(self) -> int:
        return self.n_lookback_levels + len(self.feature_multiples)

    @property
    def levels(self) -> list[int]:
        """Segment length consumed by each encoder level, outermost first."""
        return [self.unit_len, *self.len_multiples, *self.feature_multiples]

    @property
    def output_unit(self) -> int:
        return self.unit_len if self.horizon_unit is None else self.horizon_unit

    @property
    def output_multiples(self) -> tuple[int, ...]:
        return self.len_multiples if self.horizon_multiples is None else self.horizon_multiples

    @property
    def horizon(self) -> int:
        return self.output_unit * _prod(self.output_multiples)

    @property
    def output_levels(self) -> list[int]:
        """Segment length emitted by the decoder level mirroring each encoder level."""
        return [self.output_unit, *self.output_multiples, *self.feature_multiples]

    def segments(self, batch: int = 1) -> list[int]:
        """Number of segments each encoder level processes for a batch of ``batch`` windows."""
        lv = self.levels
        return [batch * _prod(lv[i + 1:]) for i in range(len(lv))]

    def output_segments(self, batch: int = 1) -> list[int]:
        lv = self.output_levels
        return [batch * _prod(lv[i + 1:]) for i in range(len(lv))]

    def with_horizon(self, unit: int, multiples) -> "PartitionPlan":
        data = asdict(self)
        data.update(horizon_unit=int(unit), horizon_multiples=tuple(multiples))
        return PartitionPlan(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("len_multiples", "feature_multiples", "horizon_multiples"):
            if data[key] is not None:
                data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionPlan":
        return cls(**data)


def validate(plan: PartitionPlan) -> PartitionPlan:
    """Check both product identities and the extents; return the plan unchanged."""
    extents = {
        "unit_len": plan.unit_len, "unit_width": plan.unit_width, "hidden": plan.hidden,
        "latent_len": plan.latent_len, "latent_width": plan.latent[1], "output_unit": plan.output_unit,
    }
    for name, value in extents.items():
        if value < 1:
            raise PlanError(f"{name} must be >= 1, got {value}")
    for name, mult in (("len_multiples", plan.len_multiples), ("feature_multiples", plan.feature_multiples),
                       ("horizon_multiples", plan.output_multiples)):
        if any(m < 1 for m in mult):
            raise PlanError(f"all {name} must be >= 1, got {list(mult)}")
    got = plan.unit_len * _prod(plan.len_multiples)
    if got != plan.lookback:
        raise PlanError(
            f"look-back product mismatch: expected {plan.lookback}, got {got} "
            f"= {plan.unit_len} x {list(plan.len_multiples)}")
    got = plan.unit_width * _prod(plan.feature_multiples)
    if got != plan.features:
        raise PlanError(
            f"feature product mismatch: expected {plan.features}, got {got} "
            f"= {plan.unit_width} x {list(plan.feature_multiples)}")
    if len(plan.output_multiples) != len(plan.len_multiples):
        raise PlanError(
            f"output schedule needs {len(plan.len_multiples)} multiples to mirror the encoder, "
            f"got {list(plan.output_multiples)}")
    return plan


def factorize(total: int, n_factors: int) -> list[int]:
    """Split ``total`` into ``n_factors`` integer factors, as balanced as the primes allow.

    Factors are returned outermost first; larger factors are placed towards
    the outside.  Ones pad the schedule when ``total`` has too few primes.
    """
    if total < 1 or n_factors < 1:
        raise PlanError(f"cannot factorize {total} into {n_factors} factors")
    primes, rest, p = [], total, 2
    while p * p <= rest:
        while rest % p == 0:
            primes.append(p)
            rest //= p
        p += 1
    if rest > 1:
        primes.append(rest)
    factors = [1] * n_factors
    for q in sorted(primes, reverse=True):
        factors[int(np.argmin(factors))] *= q
    return sorted(factors, reverse=True)


def horizon_plan(plan: PartitionPlan, horizon: int, unit: int | None = None,
                 multiples=None) -> PartitionPlan:
    """Return a copy of ``plan`` whose decoder emits ``horizon`` steps.

    With no explicit schedule, ``horizon`` is factorized over the same number
    of levels as the encoder.
    """
    n = plan.n_lookback_levels
    if multiples is None:
        if unit is None:
            factors = factorize(horizon, n)
            unit, multiples = factors[0], factors[1:]
        else:
            if horizon % unit:
                raise PlanError(f"horizon {horizon} is not divisible by output unit {unit}")
            multiples = factorize(horizon // unit, n - 1) if n > 1 else []
    elif unit is None:
        raise PlanError("an explicit output schedule needs its output unit too")
    got = int(unit) * _prod(multiples)
    if got != horizon:
        raise PlanError(f"output schedule product mismatch: expected {horizon}, got {got} = {unit} x {list(multiples)}")
    return validate(plan.with_horizon(unit, multiples))


# -- reshapes ------------------------------------------------------------------

def slice_level(x: Tensor, k: int) -> Tensor:
    """(batch, seg_len*k, width) -> (batch*k, seg_len, width), keeping slices contiguous."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"slice_level expects (batch, length, width), got {x.shape}")
    batch, length, width = x.shape
    if k < 1 or length % k:
        raise DimensionError(f"slice_level: length {length} is not divisible by {k}")
    return reshape(x, (batch * k, length // k, width))


def merge_level(x: Tensor, k: int) -> Tensor:
    """(batch*k, seg_len, width) -> (batch, seg_len*k, width); inverse of :func:`slice_level`."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"merge_level expects (batch, length, width), got {x.shape}")
    rows, length, width = x.shape
    if k < 1 or rows % k:
        raise DimensionError(f"merge_level: leading extent {rows} is not divisible by {k}")
    return reshape(x, (rows // k, length * k, width))


def feature_transpose(x: Tensor, plan: PartitionPlan) -> Tensor:
    """(B, L, M) -> (B * feature groups * length groups, unit_len, unit_width).

    Feature groups vary slower than look-back groups, so the look-back levels
    are consumed first and the feature levels last.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != plan.lookback or x.shape[2] != plan.features:
        raise DimensionError(
            f"input {x.shape} does not match plan (B, {plan.lookback}, {plan.features})")
    return _to_slices(x, x.shape[0], plan.lookback // plan.unit_len, plan.unit_len,
                      plan.features // plan.unit_width, plan.unit_width)


def feature_untranspose(y: Tensor, plan: PartitionPlan, batch: int, unit_len: int | None = None) -> Tensor:
    """Inverse of :func:`feature_transpose`; ``unit_len`` selects the output schedule's unit."""
    unit_len = plan.unit_len if unit_len is None else unit_len
    y = as_tensor(y)
    groups_m = plan.features // plan.unit_width
    if y.ndim != 3 or y.shape[1] != unit_len or y.shape[2] != plan.unit_width or y.shape[0] % (batch * groups_m):
        raise DimensionError(
            f"slices {y.shape} do not match (B*groups, {unit_len}, {plan.unit_width}) for batch {batch}")
    groups_l = y.shape[0] // (batch * groups_m)
    y = reshape(y, (batch, groups_m, groups_l, unit_len, plan.unit_width))
    y = transpose(y, (0, 2, 3, 1, 4))
    return reshape(y, (batch, groups_l * unit_len, plan.features))


def _to_slices(x: Tensor, batch: int, groups_l: int, unit_len: int, groups_m: int, unit_width: int) -> Tensor:
    x = reshape(x, (batch, groups_l, unit_len, groups_m, unit_width))
    x = transpose(x, (0, 3, 1, 2, 4))
    return reshape(x, (batch * groups_m * groups_l, unit_len, unit_width))


def encode_arrangement(x: Tensor, plan: PartitionPlan) -> list[Tensor]:
    """Every intermediate arrangement the encoder sees, without applying kernels.

    Level ``i`` gets ``(segments_i, levels[i], width)``; the widths stay the
    raw unit width because no kernel reduces anything here.
    """
    out = [feature_transpose(x, plan)]
    for k in plan.levels[1:]:
        cur = out[-1]
        # fold the current segment into the batch, then regroup k consecutive segments
        rows, length, width = cur.shape
        cur = reshape(cur, (rows, 1, length * width))
        out.append(merge_level(cur, k))
    return out


def decode_arrangement(levels: list[Tensor], plan: PartitionPlan, batch: int) -> Tensor:
    """Undo :func:`encode_arrangement` starting from its innermost arrangement."""
    cur = levels[-1]
    lv = plan.levels
    for i in range(len(lv) - 1, 0, -1):
        cur = slice_level(cur, lv[i])
        rows, _, width = cur.shape
        cur = reshape(cur, (rows, lv[i - 1], width // lv[i - 1]))
    return feature_untranspose(cur, plan, batch)
