"""Adam training loop with early stopping, forecast metrics and a naive baseline."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import normalize
from .data import WindowBatch, channel_flatten, channel_unflatten
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, mean, mul, no_grad, sub
from .unet import KUNetModel, attention_cost, count_parameters, forward


class TrainingDiverged(RuntimeError):
    """The training loss became NaN or infinite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    patience: int = 30
    batch_size: int = 32
    seed: int = 0
    norm: str = "mean"
    augment: bool = False
    erase_p: float = 0.5
    erase_span: tuple[float, float] = (0.02, 0.2)
    channel_independent: bool = True
    shuffle: bool = True

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.patience <= self.epochs:
            raise ConfigError(f"patience must lie in [1, epochs={self.epochs}], got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.norm not in normalize.MODES:
            raise ConfigError(f"norm must be one of {normalize.MODES}, got {self.norm!r}")
        if self.augment:
            normalize.random_erase(np.zeros(4), self.erase_p, self.erase_span, 0)
        return self


# -- metrics --------------------------------------------------------------------------

def _check_shapes(pred, target, name: str) -> tuple[np.ndarray, np.ndarray]:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"{name}: prediction {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise DataError(f"{name}: empty input")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _check_shapes(pred, target, "mse")
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = _check_shapes(pred, target, "mae")
    return float(np.mean(np.abs(pred - target)))


def repeat_last_baseline(window, horizon: int) -> np.ndarray:
    """Repeat the final observed value ``horizon`` times along the time axis."""
    x = np.asarray(window)
    if x.size == 0:
        raise DataError("repeat_last_baseline needs a non-empty window")
    axis = 0 if x.ndim == 1 else x.ndim - 2
    last = np.take(x, [-1], axis=axis)
    return np.repeat(last, horizon, axis=axis)


@dataclass
class MetricsReport:
    mse: float
    mae: float
    horizon_mse: np.ndarray
    horizon_mae: np.ndarray
    windows: int
    val_curve: list[float] = field(default_factory=list)
    train_curve: list[float] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = 0
    parameter_count: int = 0
    attention_cost: int = 0
    wall_clock_s: float = 0.0

    def lines(self, wall_clock: bool = True) -> list[str]:
        """``key = value`` lines; floats use ``repr`` so the text round-trips exactly."""
        out = [
            f"mse = {self.mse!r}", f"mae = {self.mae!r}", f"windows = {self.windows}",
            f"epochs_run = {self.epochs_run}", f"best_epoch = {self.best_epoch}",
            f"parameter_count = {self.parameter_count}", f"attention_cost = {self.attention_cost}",
        ]
        out += [f"mse_h{t + 1} = {v!r}" for t, v in enumerate(self.horizon_mse.tolist())]
        out += [f"mae_h{t + 1} = {v!r}" for t, v in enumerate(self.horizon_mae.tolist())]
        if wall_clock:
            out.append(f"wall_clock_s = {self.wall_clock_s:.3f}")
        return out


# -- model I/O helpers ----------------------------------------------------------------

def _to_model_layout(x: np.ndarray, model: KUNetModel, channel_independent: bool) -> np.ndarray:
    features = model.plan.features
    if x.shape[-1] == features:
        return x
    if channel_independent and features == 1:
        return channel_flatten(x)
    raise DimensionError(f"data has {x.shape[-1]} channels, model expects {features}"
                         + ("" if channel_independent else " (channel_independent is off)"))


def _from_model_layout(y: np.ndarray, channels: int) -> np.ndarray:
    return y if y.shape[-1] == channels else channel_unflatten(y, channels)


def _prepare(batch: WindowBatch, model: KUNetModel, cfg: TrainConfig):
    x, state = normalize.apply(batch.inputs, cfg.norm)
    y = normalize.transform(batch.targets, state)
    return (_to_model_layout(x, model, cfg.channel_independent),
            _to_model_layout(y, model, cfg.channel_independent), state)


def predict(model: KUNetModel, inputs: np.ndarray, norm: str = "mean", batch_size: int = 256,
            channel_independent: bool = True) -> np.ndarray:
    """Denormalised forecasts for raw ``(B, L, M)`` windows."""
    dtype = np.dtype(model.config.dtype)
    out = []
    for s in range(0, inputs.shape[0], batch_size):
        x, state = normalize.apply(inputs[s:s + batch_size], norm)
        y = model.predict(_to_model_layout(x, model, channel_independent).astype(dtype, copy=False))
        out.append(normalize.invert(_from_model_layout(y, inputs.shape[-1]).astype(np.float64), state))
    return np.concatenate(out)


def evaluate(model: KUNetModel, batch: WindowBatch, norm: str = "mean", batch_size: int = 256,
             channel_independent: bool = True) -> MetricsReport:
    """MSE/MAE of denormalised forecasts, overall and per horizon step."""
    if batch is None or len(batch) == 0:
        raise DataError("evaluate: the window stream is empty")
    pred = predict(model, batch.inputs, norm, batch_size, channel_independent)
    err = pred - batch.targets
    if not np.all(np.isfinite(pred)):
        raise TrainingDiverged("evaluate: model produced non-finite forecasts")
    return MetricsReport(
        mse=mse(pred, batch.targets), mae=mae(pred, batch.targets),
        horizon_mse=np.mean(err ** 2, axis=(0, 2)), horizon_mae=np.mean(np.abs(err), axis=(0, 2)),
        windows=len(batch), parameter_count=count_parameters(model).total,
        attention_cost=attention_cost(model).total,
    )


def baseline_report(batch: WindowBatch) -> MetricsReport:
    pred = repeat_last_baseline(batch.inputs, batch.targets.shape[1])
    err = pred - batch.targets
    return MetricsReport(mse(pred, batch.targets), mae(pred, batch.targets),
                         np.mean(err ** 2, axis=(0, 2)), np.mean(np.abs(err), axis=(0, 2)), len(batch))


# -- optimisation ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def train_step(model: KUNetModel, optimizer: Adam, x: np.ndarray, y: np.ndarray) -> float:
    dtype = np.dtype(model.config.dtype)
    model.zero_grad()
    loss = mse_loss(forward(model, Tensor(x, dtype=dtype)), Tensor(y, dtype=dtype))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at optimizer step {optimizer.t + 1}")
    loss.backward()
    optimizer.step()
    return value


@dataclass
class TrainData:
    train: WindowBatch
    val: WindowBatch | None = None


def _snapshot(model: KUNetModel) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.registry.items()}


def _restore(model: KUNetModel, snap: dict[str, np.ndarray]) -> None:
    for name, t in model.registry.items():
        t.data[...] = snap[name]


def train(model: KUNetModel, config: TrainConfig, data: TrainData,
          validate: Callable[[KUNetModel, int], float] | None = None,
          log: Callable[[str], None] | None = None) -> tuple[KUNetModel, MetricsReport]:
    """Fit ``model`` in place and return it with a report on the validation split.

    After every epoch the validation score (``validate(model, epoch)`` when
    given, else denormalised MSE on ``data.val``, else the mean training
    loss) decides early stopping; the best-scoring parameters are restored.
    """
    config.validate()
    if data.train is None or len(data.train) == 0:
        raise DataError("train: the training split has no windows")
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    n = len(data.train)
    start = time.perf_counter()
    best, best_epoch, wait = np.inf, 0, 0
    snap = _snapshot(model)
    val_curve, train_curve = [], []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        losses = []
        for s in range(0, n, config.batch_size):
            x, y, _ = _prepare(data.train.take(order[s:s + config.batch_size]), model, config)
            if config.augment:
                x = normalize.random_erase(x, config.erase_p, config.erase_span, rng)
            losses.append(train_step(model, optimizer, x, y))
        train_loss = float(np.mean(losses))
        train_curve.append(train_loss)
        if validate is not None:
            score = float(validate(model, epoch))
        elif data.val is not None and len(data.val):
            score = evaluate(model, data.val, config.norm, channel_independent=config.channel_independent).mse
        else:
            score = train_loss
        val_curve.append(score)
        if log is not None:
            log(f"epoch = {epoch} train_loss = {train_loss!r} val_score = {score!r}")
        if score < best:
            best, best_epoch, wait = score, epoch, 0
            snap = _snapshot(model)
        else:
            wait += 1
            if wait >= config.patience:
                break
    _restore(model, snap)
    elapsed = time.perf_counter() - start
    if data.val is not None and len(data.val):
        report = evaluate(model, data.val, config.norm, channel_independent=config.channel_independent)
    else:
        report = evaluate(model, data.train, config.norm, channel_independent=config.channel_independent)
    report.val_curve, report.train_curve = val_curve, train_curve
    report.epochs_run, report.best_epoch, report.wall_clock_s = len(val_curve), best_epoch, elapsed
    return model, report
