"""Experiment configuration files and the train/eval/sweep/count workflows.

Config files are flat ``key = value`` lines; ``#`` starts a comment. Every
key has a default (the full-scale CIFAR-100 setup), and the complete set is
written back to ``<out>/manifest.cfg`` on every run. See ``DEFAULTS``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import torch

from .channel import ChannelConfig, FadingChannel
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import CodecConfig, build_decoder, build_encoder
from .complexity import count_ondevice
from .data import ImageSet, channel_stats, load_cifar
from .pyramid import PyramidConfig, PyramidNet, build_model, split_model, split_plan
from .train import (METRIC_FIELDS, STAGES, TrainingSchedule, WirelessPipeline,
                    evaluate_topk, run_stage)

log = logging.getLogger(__name__)

DEFAULTS: dict[str, str] = {
    "model.units": "54",
    "model.widening": "120",
    "model.classes": "100",
    "model.split": "45",
    "model.se": "true",
    "codec.symbols": "128",
    "codec.power": "1.0",
    "channel.kind": "rayleigh",
    "channel.snr_db": "15",
    "channel.gain_var": "1.0",
    "channel.seed": "0",
    "channel.granularity": "sample",
    "train.seed": "0",
    "train.stages": "backbone,codec,end2end",
    "train.limit": "0",
    "eval.limit": "0",
    "train.backbone.lr": "0.025",
    "train.backbone.epochs": "300",
    "train.backbone.milestones": "150,225",
    "train.backbone.batch_size": "32",
    "train.codec.lr": "0.01",
    "train.codec.epochs": "160",
    "train.codec.milestones": "80,120",
    "train.codec.batch_size": "64",
    "train.codec.frozen": "front,rest",
    "train.end2end.lr": "0.01",
    "train.end2end.epochs": "160",
    "train.end2end.milestones": "80,120",
    "train.end2end.batch_size": "64",
    "train.end2end.frozen": "",
    "train.weight_decay": "5e-4",
    "train.momentum": "0.9",
    "data.variant": "cifar100",
    "data.root": "",
    "data.augment": "true",
    "data.strict": "true",
    "data.mean": "",
    "data.std": "",
    "out": "runs/default",
    "link.server": "127.0.0.1:5760",
    "link.proxy": "127.0.0.1:5761",
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


def parse_text(text: str) -> dict[str, str]:
    values, problems = {}, []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {n}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            problems.append(f"line {n}: unknown key {key!r}")
        values[key] = value
    if problems:
        raise ConfigError(problems)
    return values


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _address(s: str) -> tuple[str, int]:
    host, port = s.rsplit(":", 1)
    return host, int(port)


@dataclass(frozen=True)
class ExperimentConfig:
    raw: tuple[tuple[str, str], ...]
    model: PyramidConfig
    split: int
    symbols: int
    power: float
    channel: ChannelConfig
    schedules: tuple[TrainingSchedule, ...]
    stages: tuple[str, ...]
    seed: int
    train_limit: int
    eval_limit: int
    variant: str
    data_root: str
    augment: bool
    strict: bool
    mean: tuple[float, ...]
    std: tuple[float, ...]
    out: Path
    server: tuple[str, int]
    proxy: tuple[str, int]

    @property
    def values(self) -> dict[str, str]:
        return dict(self.raw)

    def schedule(self, stage: str) -> TrainingSchedule:
        return next(s for s in self.schedules if s.stage == stage)

    def codec(self) -> CodecConfig:
        return CodecConfig.from_plan(split_plan(self.model, self.split), self.symbols, self.power)

    def with_values(self, **overrides: str) -> "ExperimentConfig":
        vals = self.values
        vals.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return from_values(vals)

    def manifest(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.raw))


def from_values(values: dict[str, str]) -> ExperimentConfig:
    v = dict(DEFAULTS)
    v.update(values)
    problems: list[str] = []

    def get(key, conv):
        try:
            return conv(v[key])
        except (ValueError, TypeError) as exc:
            problems.append(f"{key}: {exc}")
            return None

    model = PyramidConfig(get("model.units", int) or 0, get("model.widening", float) or 0.0,
                          get("model.classes", int) or 0, 32, bool(get("model.se", _bool)))
    try:
        model.validate()
    except ValueError as exc:
        problems.append(str(exc))
    split = get("model.split", int)
    symbols = get("codec.symbols", int)
    power = get("codec.power", float)
    if split is not None and model.num_units and not 1 <= split <= model.num_units:
        problems.append(f"model.split={split} must lie in [1, model.units={model.num_units}]")
    elif split is not None and symbols is not None and power is not None and not problems:
        problems += CodecConfig.from_plan(split_plan(model, split), symbols, power).problems()
    channel = ChannelConfig(v["channel.kind"], get("channel.snr_db", float) or 0.0, power or 1.0,
                            get("channel.gain_var", float) or 0.0, get("channel.seed", int) or 0,
                            v["channel.granularity"])
    problems += channel.problems()
    schedules = []
    wd, mom = get("train.weight_decay", float), get("train.momentum", float)
    for stage in STAGES:
        p = f"train.{stage}."
        sched = TrainingSchedule(stage, get(p + "lr", float) or 0.0, get(p + "epochs", int) or 0,
                                 get(p + "milestones", _ints) or (), get(p + "batch_size", int) or 0,
                                 wd or 0.0, mom or 0.0, _names(v.get(p + "frozen", "")))
        problems += sched.problems()
        bad = [s for s in sched.frozen if s not in ("front", "rest", "encoder", "decoder")]
        if bad:
            problems.append(f"{p}frozen: unknown scopes {bad}")
        schedules.append(sched)
    stages = _names(v["train.stages"])
    if [s for s in stages if s not in STAGES]:
        problems.append(f"train.stages: unknown stages in {stages}")
    if v["data.variant"] not in ("cifar10", "cifar100"):
        problems.append(f"data.variant must be cifar10 or cifar100, got {v['data.variant']!r}")
    elif model.num_classes and model.num_classes != {"cifar10": 10, "cifar100": 100}[v["data.variant"]]:
        problems.append(f"model.classes={model.num_classes} does not match {v['data.variant']}")
    mean, std = get("data.mean", _floats), get("data.std", _floats)
    if mean and len(mean) != 3 or std and len(std) != 3:
        problems.append("data.mean and data.std need 3 comma-separated values")
    get("data.augment", _bool)
    get("data.strict", _bool)
    for key in ("link.server", "link.proxy"):
        get(key, _address)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        raw=tuple(sorted(v.items())), model=model, split=split, symbols=symbols, power=power,
        channel=channel, schedules=tuple(schedules), stages=stages, seed=int(v["train.seed"]),
        train_limit=int(v["train.limit"]), eval_limit=int(v["eval.limit"]), variant=v["data.variant"],
        data_root=v["data.root"], augment=_bool(v["data.augment"]),
        strict=_bool(v["data.strict"]), mean=mean or (), std=std or (),
        out=Path(v["out"]), server=_address(v["link.server"]), proxy=_address(v["link.proxy"]))


def load_config(path: str | Path, **overrides: str) -> ExperimentConfig:
    values = parse_text(Path(path).read_text())
    values.update({k.replace("__", "."): str(val) for k, val in overrides.items()})
    return from_values(values)


# --- model assembly ------------------------------------------------------------

@dataclass
class Models:
    full: PyramidNet
    pipeline: WirelessPipeline


def build_models(cfg: ExperimentConfig) -> Models:
    full = build_model(cfg.model, seed=cfg.seed)
    front, rest, plan = split_model(full, cfg.split)
    codec = CodecConfig.from_plan(plan, cfg.symbols, cfg.power)
    pipeline = WirelessPipeline(front, build_encoder(codec, seed=cfg.seed + 1), FadingChannel(cfg.channel),
                                build_decoder(codec, seed=cfg.seed + 2), rest, cfg.power)
    return Models(full, pipeline)


def _prefixed(prefix: str, state) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _unprefixed(prefix: str, state) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}


def save_split_checkpoints(pipeline: WirelessPipeline, out: Path) -> tuple[Path, Path]:
    device = out / "device.ewck"
    server = out / "server.ewck"
    save_checkpoint(device, {**_prefixed("front", pipeline.front.state_dict()),
                             **_prefixed("encoder", pipeline.encoder.state_dict())})
    save_checkpoint(server, {**_prefixed("rest", pipeline.rest.state_dict()),
                             **_prefixed("decoder", pipeline.decoder.state_dict())})
    return device, server


def load_device(cfg: ExperimentConfig, path: str | Path):
    m = build_models(cfg).pipeline
    state = load_checkpoint(path)
    m.front.load_state_dict(_unprefixed("front", state))
    m.encoder.load_state_dict(_unprefixed("encoder", state))
    return m.front.eval(), m.encoder.eval()


def load_server(cfg: ExperimentConfig, path: str | Path):
    m = build_models(cfg).pipeline
    state = load_checkpoint(path)
    m.rest.load_state_dict(_unprefixed("rest", state))
    m.decoder.load_state_dict(_unprefixed("decoder", state))
    return m.decoder.eval(), m.rest.eval()


# --- workflows -------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[ImageSet, ImageSet]:
    counts = (50_000, 10_000) if cfg.strict else None
    train, test = load_cifar(cfg.data_root or None, cfg.variant, counts)
    return train, test.subset(cfg.eval_limit)


def normalization(cfg: ExperimentConfig, train: ImageSet) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if cfg.mean and cfg.std:
        return cfg.mean, cfg.std
    return channel_stats(train.images)


def write_metrics(path: Path, rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_FIELDS})
    path.write_text(buf.getvalue())


def train(cfg: ExperimentConfig, data: tuple[ImageSet, ImageSet] | None = None) -> dict:
    """Run the configured stages, writing checkpoints and metrics under ``cfg.out``."""
    torch.use_deterministic_algorithms(True)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = data or load_data(cfg)
    mean, std = normalization(cfg, train_set)
    cfg = cfg.with_values(data__mean=",".join(map(repr, mean)), data__std=",".join(map(repr, std)))
    (out / "manifest.cfg").write_text(cfg.manifest())

    models = build_models(cfg)
    rows: list[dict] = []
    kw = dict(seed=cfg.seed, augmentation=cfg.augment, mean=mean, std=std, train_limit=cfg.train_limit)
    if "backbone" in cfg.stages:
        rows += run_stage(cfg.schedule("backbone"), models.full, train_set, test_set, **kw).metrics
        save_checkpoint(out / "backbone.ewck", models.full.state_dict())
    elif (out / "backbone.ewck").exists():
        models.full.load_state_dict(load_checkpoint(out / "backbone.ewck"))
    for stage in ("codec", "end2end"):
        if stage in cfg.stages:
            rows += run_stage(cfg.schedule(stage), models.pipeline, train_set, test_set, **kw).metrics
            save_checkpoint(out / f"{stage}.ewck", models.pipeline.state_dict())
    write_metrics(out / "metrics.csv", rows)
    save_split_checkpoints(models.pipeline, out)
    return {"metrics": rows, "models": models, "mean": mean, "std": std, "config": cfg}


def latest_pipeline(cfg: ExperimentConfig) -> WirelessPipeline:
    models = build_models(cfg)
    for name in ("end2end.ewck", "codec.ewck"):
        path = cfg.out / name
        if path.exists():
            models.pipeline.load_state_dict(load_checkpoint(path))
            return models.pipeline.eval()
    raise FileNotFoundError(f"no trained pipeline checkpoint under {cfg.out}")


def evaluate(cfg: ExperimentConfig, pipeline: WirelessPipeline | None = None,
             test_set: ImageSet | None = None, mean=None, std=None) -> dict[int, float]:
    if test_set is None or mean is None:
        train_set, test = load_data(cfg)
        test_set = test_set or test
        mean, std = normalization(cfg, train_set)
    pipeline = pipeline or latest_pipeline(cfg)
    pipeline.channel = FadingChannel(cfg.channel)
    ks = (1, min(5, test_set.num_classes))
    acc = evaluate_topk(pipeline, test_set, ks, mean=mean, std=std)
    return {1: acc[1], 5: acc[ks[1]]}


def complexity(cfg: ExperimentConfig):
    models = build_models(cfg)
    return count_ondevice(models.pipeline.front, models.pipeline.encoder)


SWEEP_FIELDS = ("value", "top1", "top5", "gmacs", "mparams")


def sweep(cfg: ExperimentConfig, axis: str, values: list[float], *, with_eval: bool = True,
          data: tuple[ImageSet, ImageSet] | None = None) -> tuple[list[dict], list[str]]:
    """One row per axis value; invalid points are skipped and reported.

    snr: evaluates the trained pipeline of ``cfg.out`` at each test SNR.
    bandwidth / split: retrains the codec and end-to-end stages per point,
    starting from ``cfg.out/backbone.ewck``.
    """
    key = {"snr": "channel.snr_db", "bandwidth": "codec.symbols", "split": "model.split"}.get(axis)
    if key is None:
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows, skipped = [], []
    if with_eval:
        train_set, test_set = data or load_data(cfg)
        mean, std = normalization(cfg, train_set)
    for value in values:
        text = repr(float(value)) if axis == "snr" else str(int(value))
        try:
            point = cfg.with_values(**{key.replace(".", "__"): text})
        except ConfigError as exc:
            skipped.append(f"{axis}={text}: " + "; ".join(exc.problems))
            log.warning("skipping %s=%s: %s", axis, text, exc)
            continue
        rep = complexity(point)
        row = {"value": text, "top1": "", "top5": "", "gmacs": repr(rep.gmacs), "mparams": repr(rep.mparams)}
        if with_eval:
            if axis == "snr":
                acc = evaluate(point, latest_pipeline(cfg), test_set, mean, std)
            else:
                acc = _retrain_codec(point, cfg.out / "backbone.ewck", (train_set, test_set), mean, std,
                                     cfg.out / f"sweep_{axis}" / text)
            row["top1"], row["top5"] = repr(acc[1]), repr(acc[5])
        rows.append(row)
    return rows, skipped


def _retrain_codec(cfg: ExperimentConfig, backbone: Path, data, mean, std, out: Path) -> dict[int, float]:
    torch.use_deterministic_algorithms(True)
    out.mkdir(parents=True, exist_ok=True)
    models = build_models(cfg)
    models.full.load_state_dict(load_checkpoint(backbone))
    rows = []
    for stage in ("codec", "end2end"):
        if stage in cfg.stages:
            rows += run_stage(cfg.schedule(stage), models.pipeline, data[0], None, seed=cfg.seed,
                              augmentation=cfg.augment, mean=mean, std=std,
                              train_limit=cfg.train_limit).metrics
    write_metrics(out / "metrics.csv", rows)
    return evaluate(cfg, models.pipeline, data[1], mean, std)


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
