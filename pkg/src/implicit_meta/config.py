"""Experiment configuration and its INI text format.

Each dataclass maps to one section; values are written with ``repr`` for
floats so that ``parse(emit(cfg)) == cfg`` holds exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import io
import typing
from dataclasses import dataclass, field, replace

from . import model as M
from .data import SplitSpec
from .hypergrad import ApproxSpec
from .metaopt import APPENDIX_L2_GRID, INNER_STEPS_ABLATION, MetaConfig, Schedule
from .ssl import SslConfig

COMMANDS = ("overfit-val", "per-layer", "hessian-compare", "ablation-steps", "baseline-grid", "ssl-toy")
DEFAULT_SEEDS = (231, 981, 1110)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSource:
    """Where inputs come from: synthetic blobs or an IDX image/label pair."""
    kind: str = "blobs"
    images: str = ""
    labels: str = ""
    n_per_class: int = 200
    num_classes: int = 10
    dim: int = 20
    spread: float = 0.3
    separation: float = 1.0
    blob_seed: int = 0
    layout: str = "circle"
    downsample: bool = False

    def __post_init__(self):
        if self.kind not in ("blobs", "idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")


@dataclass(frozen=True)
class SslData:
    num_classes: int = 4
    labeled_per_class: int = 4
    unlabeled_per_class: int = 150
    n_ood: int = 300
    val_per_class: int = 25
    test_per_class: int = 250
    spread: float = 0.35
    radius: float = 2.0


@dataclass(frozen=True)
class Protocol:
    """Command-specific extras that are not part of a single bilevel run."""
    compare_methods: tuple[ApproxSpec, ...] = ()
    l2_grid: tuple[float, ...] = APPENDIX_L2_GRID
    baseline_steps: int = 0
    ablation_steps: tuple[int, ...] = INNER_STEPS_ABLATION
    with_baseline: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out_dir: str = "results"
    data: DataSource = field(default_factory=DataSource)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(50, 50, 50, seed=1))
    meta: MetaConfig = field(default_factory=MetaConfig)
    protocol: Protocol = field(default_factory=Protocol)
    ssl: SslConfig = field(default_factory=SslConfig)
    ssl_data: SslData = field(default_factory=SslData)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


SECTIONS = ("data", "split", "meta", "protocol", "ssl", "ssl_data")


def _encode(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, ApproxSpec):
        return str(value)
    if isinstance(value, tuple):
        return ", ".join(_encode(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _decode(text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if text.lower() == "none":
            return None
        return _decode(text, next(a for a in args if a is not type(None)))
    if origin is tuple:
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        return tuple(_decode(t, args[0]) for t in items)
    if hint is bool:
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if hint is ApproxSpec:
        return ApproxSpec.parse(text)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return hint(text)
    if hint in (int, float, str):
        return hint(text)
    raise ConfigError(f"unsupported field type {hint!r}")


def _hints(cls):
    import sys
    mod = sys.modules[cls.__module__]
    return typing.get_type_hints(cls, vars(mod))


def emit(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {
        "command": cfg.command,
        "seeds": _encode(cfg.seeds),
        "out_dir": cfg.out_dir,
    }
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _encode(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _section(cls, items: dict, name: str):
    hints = _hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(items) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**{k: _decode(v, hints[k]) for k, v in items.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


_SECTION_TYPES = {
    "data": DataSource, "split": SplitSpec, "meta": MetaConfig,
    "protocol": Protocol, "ssl": SslConfig, "ssl_data": SslData,
}


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text. Missing sections or keys fall back to ``base``
    (or the command defaults)."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if "experiment" not in parser or "command" not in parser["experiment"]:
        if base is None:
            raise ConfigError("config needs [experiment] command = ...")
    exp = dict(parser["experiment"]) if "experiment" in parser else {}
    command = exp.pop("command", base.command if base else None)
    cfg = base if base is not None and base.command == command else default_config(command)
    updates = {}
    if "seeds" in exp:
        updates["seeds"] = _decode(exp.pop("seeds"), tuple[int, ...])
    if "out_dir" in exp:
        updates["out_dir"] = exp.pop("out_dir")
    if exp:
        raise ConfigError(f"[experiment] unknown keys: {', '.join(sorted(exp))}")
    for name in parser.sections():
        if name == "experiment":
            continue
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{name}]")
        current = getattr(cfg, name)
        merged = {f.name: _encode(getattr(current, f.name)) for f in dataclasses.fields(current)}
        merged.update(parser[name])
        updates[name] = _section(_SECTION_TYPES[name], merged, name)
    try:
        return replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def default_config(command: str | None) -> ExperimentConfig:
    """Desk-scale defaults for each subcommand."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if command == "overfit-val":
        return ExperimentConfig(
            command,
            meta=MetaConfig(inner_steps=50, meta_updates=1000, inner_lr=1e-3, approx=ApproxSpec.neumann(3),
                            early_stop_patience=15, es_continue=True),
        )
    if command in ("per-layer", "ablation-steps"):
        return ExperimentConfig(
            command,
            data=DataSource(n_per_class=400, spread=0.35),
            split=SplitSpec(200, 200, 1000, seed=1),
            meta=MetaConfig(inner_steps=500, meta_updates=50, warmup_steps=1000, batch_size=128,
                            approx=ApproxSpec.neumann(3), hyper_mode=M.HyperMode.PER_LAYER,
                            lambda_init_mean=-3.0, lambda_init_std=0.0, inner_lr=1e-3),
            protocol=Protocol(with_baseline=command == "per-layer"),
        )
    if command == "hessian-compare":
        return ExperimentConfig(
            command,
            seeds=(DEFAULT_SEEDS[0],),
            data=DataSource(n_per_class=100, dim=784, spread=1.0, separation=0.3, layout="random", downsample=True),
            meta=MetaConfig(inner_steps=50, meta_updates=50, hidden=32, inner_lr=1e-3,
                            approx=ApproxSpec.neumann(3), compare_every=5),
            protocol=Protocol(compare_methods=(
                ApproxSpec.neumann(3, scale=True), ApproxSpec.neumann(20, scale=True),
                ApproxSpec.cg(3), ApproxSpec.cg(20), ApproxSpec.identity(), ApproxSpec.exact())),
        )
    if command == "baseline-grid":
        return ExperimentConfig(
            command,
            seeds=(DEFAULT_SEEDS[0],),
            meta=MetaConfig(inner_lr=1e-3),
            protocol=Protocol(baseline_steps=5000),
        )
    return ExperimentConfig(command)


def with_schedule(cfg: ExperimentConfig, schedule: Schedule) -> ExperimentConfig:
    """Switch a config to T1-T2: one inner step per identity meta-step, same total inner steps."""
    schedule = Schedule(schedule)
    if schedule == cfg.meta.schedule:
        return cfg
    m = cfg.meta
    if schedule == Schedule.T1T2:
        meta = replace(m, schedule=schedule, meta_updates=m.meta_updates * m.inner_steps, inner_steps=1,
                       approx=ApproxSpec.identity(), eval_every=m.inner_steps,
                       early_stop_patience=m.early_stop_patience)
    else:
        meta = replace(m, schedule=schedule, inner_steps=m.eval_every, meta_updates=m.meta_updates // m.eval_every,
                       eval_every=1)
    return replace(cfg, meta=meta)
