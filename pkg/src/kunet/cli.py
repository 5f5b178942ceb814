"""``kunet`` command line: train, eval, gradcheck, report, bench."""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
import time
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import IngestConfig, SeriesTable, collect, load_csv, split, split_rows, synthetic_ett, windows
from .errors import ConfigError, DataError, DimensionError
from .partition import PartitionPlan, horizon_plan, validate
from .tensor import Tensor, grad_check
from .train import TrainConfig, TrainData, TrainingDiverged, baseline_report, evaluate, mse_loss, train
from .unet import (VARIANTS, attention_cost, build, build_from_config, count_parameters, forward,
                   load_checkpoint, registry_count, save_checkpoint)

DATA_DIR_ENV = "KUNET_DATA_DIR"
SUMMARY_FILE = "summary.txt"


@dataclass
class RunConfig:
    """Every knob of a run; the config file sets any subset, the rest keep these defaults."""

    # data
    data: str = "synthetic"            # CSV path, or "synthetic" for the bundled ETT-like generator
    synthetic_rows: int = 4000
    columns: tuple[str, ...] = ()       # empty keeps every channel
    max_rows: int = 0                   # 0 reads the whole file
    missing: str = "reject"
    split: str = "ratio"
    stride: int = 1
    # plan
    lookback: int = 96
    horizon: int = 96
    unit_len: int = 4
    len_multiples: tuple[int, ...] = (4, 3, 2)
    output_unit: int = 0                # 0 factorizes the horizon automatically
    output_multiples: tuple[int, ...] = ()
    unit_width: int = 1
    feature_multiples: tuple[int, ...] = ()
    hidden: int = 32
    # model
    variant: str = "linear-1-hidden"
    heads: int = 2
    blocks: int = 1
    skips: bool = True
    dtype: str = "float64"
    # training
    seed: int = 0
    learning_rate: float = 1e-3
    epochs: int = 30
    patience: int = 5
    batch_size: int = 32
    norm: str = "mean"
    augment: bool = False
    erase_p: float = 0.5
    erase_span: tuple[float, float] = (0.02, 0.2)
    channel_independent: bool = True
    output_dir: str = "runs/latest"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = typing.get_type_hints(RunConfig)


def _convert(name: str, raw: str):
    kind = _TYPES[name]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, float, str):
            return kind(raw)
        item = typing.get_args(kind)[0]
        return tuple(item(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"config field {name!r}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config(text: str, overrides: list[str] | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines (``#`` comments, comma lists); unknown keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None,
                                       delimiters=("=",), strict=True)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    values = dict(parser["run"])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = raw
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    return RunConfig(**{k: _convert(k, v) for k, v in values.items()})


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), overrides)


# -- wiring ------------------------------------------------------------------------------

def make_plan(cfg: RunConfig, features: int) -> PartitionPlan:
    plan = PartitionPlan(lookback=cfg.lookback, unit_len=cfg.unit_len, len_multiples=cfg.len_multiples,
                         features=features, unit_width=cfg.unit_width, feature_multiples=cfg.feature_multiples,
                         hidden=cfg.hidden)
    validate(plan)
    unit = cfg.output_unit or None
    multiples = cfg.output_multiples or None
    return horizon_plan(plan, cfg.horizon, unit, multiples)


def resolve_data_path(data: str) -> Path:
    path = Path(data)
    if not path.is_absolute() and not path.exists() and os.environ.get(DATA_DIR_ENV):
        path = Path(os.environ[DATA_DIR_ENV]) / path
    if not path.is_file():
        raise DataError(f"data file {path} not found (relative paths also search ${DATA_DIR_ENV})")
    return path


def load_table(cfg: RunConfig) -> SeriesTable:
    columns = cfg.columns or None
    if cfg.data == "synthetic":
        table = synthetic_ett(cfg.synthetic_rows, seed=0).select(columns)
        return dataclasses.replace(table, report=None)
    ingest = IngestConfig(missing=cfg.missing, columns=columns, max_rows=cfg.max_rows or None)
    return load_csv(resolve_data_path(cfg.data), ingest)


def make_windows(cfg: RunConfig, table: SeriesTable):
    splits = split(table, cfg.split)
    out = {}
    for which in ("train", "val", "test"):
        rows, offset = split_rows(table.values, splits, which, cfg.lookback)
        batches = list(windows(rows, cfg.lookback, cfg.horizon, cfg.stride, offset=offset))
        out[which] = collect(batches) if batches else None
    if out["train"] is None or out["test"] is None:
        raise DataError(f"splits of {table.n_rows} rows are too short for lookback {cfg.lookback} "
                        f"+ horizon {cfg.horizon}")
    return out


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs, patience=cfg.patience,
                       batch_size=cfg.batch_size, seed=cfg.seed, norm=cfg.norm, augment=cfg.augment,
                       erase_p=cfg.erase_p, erase_span=cfg.erase_span,
                       channel_independent=cfg.channel_independent).validate()


def _ingest_text(cfg: RunConfig, table: SeriesTable) -> str:
    if table.report is not None:
        return table.report.to_text()
    return f"path = synthetic\nrows = {table.n_rows}\nchannels = {table.n_channels}\nrejected_rows = 0\nfilled_cells = 0\n"


# -- commands ----------------------------------------------------------------------------

def cmd_train(config_path: str | Path, overrides: list[str] | None = None, output_dir: str | None = None) -> int:
    """Train, evaluate on the test split and write the run directory.

    ``summary.txt`` holds only deterministic values; wall-clock times go to
    ``timing.txt`` and ``metrics.log``.
    """
    cfg = load_config(config_path, overrides)
    if output_dir is not None:
        cfg.output_dir = output_dir
    tcfg = train_config(cfg)
    table = load_table(cfg)
    features = 1 if cfg.channel_independent else table.n_channels
    plan = make_plan(cfg, features)
    data = make_windows(cfg, table)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    (out / "ingest_report.txt").write_text(_ingest_text(cfg, table))

    model = build(plan, cfg.variant, seed=cfg.seed, dtype=cfg.dtype, heads=cfg.heads, blocks=cfg.blocks,
                  skips=cfg.skips)
    log_lines: list[str] = []
    start = time.perf_counter()
    model, fit = train(model, tcfg, TrainData(data["train"], data["val"]), log=log_lines.append)
    test = evaluate(model, data["test"], cfg.norm, channel_independent=cfg.channel_independent)
    base = baseline_report(data["test"])
    elapsed = time.perf_counter() - start
    save_checkpoint(model, out / "model.npz")

    test.epochs_run, test.best_epoch = fit.epochs_run, fit.best_epoch
    summary = [f"variant = {cfg.variant}", f"seed = {cfg.seed}", f"lookback = {cfg.lookback}",
               f"horizon = {cfg.horizon}", f"train_windows = {len(data['train'])}",
               f"best_val_score = {min(fit.val_curve)!r}"]
    summary += [f"test_{line}" for line in test.lines(wall_clock=False)]
    summary += [f"baseline_mse = {base.mse!r}", f"baseline_mae = {base.mae!r}"]
    (out / SUMMARY_FILE).write_text("\n".join(summary) + "\n")
    (out / "metrics.log").write_text("\n".join(log_lines + summary + [f"wall_clock_s = {elapsed:.3f}"]) + "\n")
    (out / "timing.txt").write_text(f"wall_clock_s = {elapsed:.3f}\ntrain_s = {fit.wall_clock_s:.3f}\n")
    print("\n".join(summary))
    print(f"wall_clock_s = {elapsed:.3f}")
    return 0


def cmd_eval(checkpoint: str | Path, config_path: str | Path, overrides: list[str] | None = None) -> int:
    cfg = load_config(config_path, overrides)
    model = load_checkpoint(checkpoint)
    table = load_table(cfg)
    data = make_windows(cfg, table)
    report = evaluate(model, data["test"], cfg.norm, channel_independent=cfg.channel_independent)
    base = baseline_report(data["test"])
    print("\n".join(report.lines(wall_clock=False)))
    print(f"baseline_mse = {base.mse!r}\nbaseline_mae = {base.mae!r}")
    return 0


def tiny_plan(lookback: int = 8, hidden: int = 4) -> PartitionPlan:
    """Binary schedule with a unit of 2 used for whole-model gradient checks."""
    levels = int(np.log2(lookback))
    if 2 ** levels != lookback or levels < 2:
        raise ConfigError(f"gradcheck lookback must be a power of two >= 4, got {lookback}")
    return validate(PartitionPlan(lookback=lookback, unit_len=2, len_multiples=(2,) * (levels - 1), hidden=hidden))


def model_grad_check(variant: str, seed: int, plan: PartitionPlan | None = None, batch: int = 2):
    """Finite-difference check of every parameter of a freshly built model on a random batch."""
    plan = plan or tiny_plan()
    model = build(plan, variant, seed=seed, dtype="float64")
    rng = np.random.default_rng(seed + 1000)
    x = Tensor(rng.normal(size=(batch, plan.lookback, plan.features)))
    y = Tensor(rng.normal(size=(batch, plan.horizon, plan.features)))
    return grad_check(lambda: mse_loss(forward(model, x), y), None, params=model.parameters())


def cmd_gradcheck(variant: str, seed: int = 0, lookback: int = 8, hidden: int = 4) -> int:
    report = model_grad_check(variant, seed, tiny_plan(lookback, hidden))
    print(f"variant = {variant}\nseed = {seed}\nmax_rel_error = {report.max_rel_error:.6e}\n"
          f"checked = {report.n_checked}\nstatus = {'pass' if report.passed else 'fail'}")
    return 0 if report.max_rel_error <= 1e-4 else 1


def report_lines(model) -> list[str]:
    counts = count_parameters(model)
    cost = attention_cost(model)
    lines = [f"variant = {model.variant}", f"lookback = {model.plan.lookback}", f"horizon = {model.plan.horizon}",
             f"parameter_count = {counts.total}", f"registry_count = {registry_count(model)}",
             f"attention_cost = {cost.total}"]
    for name, n in counts.per_layer.items():
        kind = ""
        side, _, idx = name.partition(".")
        if side in ("encoder", "decoder"):
            kind = getattr(model, side)[int(idx)].spec.kind
        lines.append(f"layer {name} kind = {kind or 'adapter'} params = {n} attention = {cost.per_layer.get(name, 0)}")
    return lines


def cmd_report(checkpoint: str | Path) -> int:
    print("\n".join(report_lines(load_checkpoint(checkpoint))))
    return 0


def bench_rows(min_exp: int = 4, max_exp: int = 10, hidden: int = 16, unit_len: int = 2) -> list[dict]:
    """Parameters and attention MACs for L = unit * 2^k with every multiple equal to 2.

    ``inner`` puts transformers on the two levels next to the latent,
    ``outer`` on the two outermost levels; other levels stay linear.
    """
    rows = []
    for k in range(min_exp, max_exp + 1):
        lookback = 2 ** k
        plan = validate(PartitionPlan(lookback=lookback, unit_len=unit_len,
                                      len_multiples=(2,) * (k - int(np.log2(unit_len))), hidden=hidden))
        n = plan.n_levels
        inner = build(plan, "linear", {n: "transformer", n - 1: "transformer"}, seed=0)
        outer = build(plan, "linear", {1: "transformer", 2: "transformer"}, seed=0)
        rows.append({
            "lookback": lookback, "levels": n,
            "linear_params": count_parameters(build(plan, "linear", seed=0)).total,
            "inner_params": count_parameters(inner).total, "outer_params": count_parameters(outer).total,
            "inner_attention": attention_cost(inner).total, "outer_attention": attention_cost(outer).total,
        })
    return rows


def cmd_bench(min_exp: int = 4, max_exp: int = 10, hidden: int = 16, unit_len: int = 2) -> int:
    rows = bench_rows(min_exp, max_exp, hidden, unit_len)
    keys = list(rows[0])
    print("\t".join(keys))
    for row in rows:
        print("\t".join(str(row[k]) for k in keys))
    return 0


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kunet", description="Kernel U-Net forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate from a config file")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", dest="output_dir")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split of a config's data")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("gradcheck", help="whole-model finite-difference gradient check")
    p.add_argument("--variant", choices=VARIANTS, default="linear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lookback", type=int, default=8)
    p.add_argument("--hidden", type=int, default=4)

    p = sub.add_parser("report", help="parameter and attention accounting of a checkpoint")
    p.add_argument("checkpoint")

    p = sub.add_parser("bench", help="parameters and attention cost versus look-back length")
    p.add_argument("--min-exp", type=int, default=4)
    p.add_argument("--max-exp", type=int, default=10)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--unit-len", type=int, default=2)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.overrides, args.output_dir)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.config, args.overrides)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.variant, args.seed, args.lookback, args.hidden)
        if args.command == "report":
            return cmd_report(args.checkpoint)
        return cmd_bench(args.min_exp, args.max_exp, args.hidden, args.unit_len)
    except (ConfigError, DataError, DimensionError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
