"""Per-window normalisation and random-erase augmentation.

Arrays are ``(L,)``, ``(L, M)`` or ``(B, L, M)``; statistics are always taken
along the time axis of the input window only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MODES = ("mean", "last", "instance", "none")


@dataclass
class NormState:
    mode: str
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    last: np.ndarray | None = None
    eps: float = 1e-5

    def shift(self) -> np.ndarray | float:
        if self.mode in ("mean", "instance"):
            return self.mean
        if self.mode == "last":
            return self.last
        return 0.0

    def scale(self) -> np.ndarray | float:
        return self.std if self.mode == "instance" else 1.0


def _time_axis(x: np.ndarray) -> int:
    return 0 if x.ndim == 1 else -2


def apply(window, mode: str = "mean", eps: float = 1e-5) -> tuple[np.ndarray, NormState]:
    """Normalise ``window`` and return the statistics needed to undo it.

    ``mean`` subtracts the per-channel mean, ``last`` the final value,
    ``instance`` subtracts the mean and divides by sqrt(population var + eps).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown normalisation mode {mode!r}; expected one of {MODES}")
    x = np.asarray(window, dtype=np.float64) if not isinstance(window, np.ndarray) else window
    if x.size == 0:
        raise ConfigError("cannot normalise an empty window")
    axis = _time_axis(x)
    state = NormState(mode, eps=eps)
    if mode in ("mean", "instance"):
        state.mean = x.mean(axis=axis, keepdims=True)
    if mode == "instance":
        state.std = np.sqrt(x.var(axis=axis, keepdims=True) + eps)
    if mode == "last":
        state.last = np.take(x, [-1], axis=axis)
    return transform(x, state), state


def transform(values: np.ndarray, state: NormState) -> np.ndarray:
    """Normalise ``values`` (e.g. targets) with statistics taken from the input window."""
    if state.mode == "none":
        return np.array(values, copy=True)
    return (values - state.shift()) / state.scale()


def invert(prediction: np.ndarray, state: NormState) -> np.ndarray:
    if state.mode == "none":
        return np.array(prediction, copy=True)
    return prediction * state.scale() + state.shift()


def random_erase(window, p: float = 0.5, span_range=(0.02, 0.2), rng_seed=None) -> np.ndarray:
    """Zero one contiguous span per channel with probability ``p``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``; the span
    length is ``round(ratio * L)`` (at least 1) with ratio ~ U(span_range).
    """
    lo, hi = (float(v) for v in span_range)
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"erase probability must lie in [0, 1], got {p}")
    if not 0.0 < lo <= hi <= 1.0:
        raise ConfigError(f"span ratio range must satisfy 0 < lo <= hi <= 1, got {span_range}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    x = np.array(window, dtype=np.float64 if not isinstance(window, np.ndarray) else window.dtype, copy=True)
    view = x.reshape(1, -1, 1) if x.ndim == 1 else (x[None] if x.ndim == 2 else x)
    batch, length, channels = view.shape
    hit = rng.random((batch, channels)) < p
    ratios = rng.uniform(lo, hi, size=(batch, channels))
    spans = np.clip(np.rint(ratios * length).astype(int), 1, length)
    starts = (rng.random((batch, channels)) * (length - spans + 1)).astype(int)
    for b, c in zip(*np.nonzero(hit)):
        view[b, starts[b, c]:starts[b, c] + spans[b, c], c] = 0.0
    return x
