"""Flat ``key = value`` configuration files.

The format is deliberately minimal: UTF-8 lines of ``key = value``, ``#``
comments, blank lines allowed.  Nested configurations (the synthetic stream
description, recorded teacher files, snapshots) are referenced by path,
resolved relative to the file that names them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .arch import ArchConfig
from .distill import DistillConfig
from .metrics import CostModel
from .streams import EventSpec, ObjectSpec, SyntheticStreamConfig, TeacherNoise


class ConfigError(ValueError):
    """Invalid or inconsistent configuration file (CLI exit code 2)."""


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    table: dict[str, str] = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}: line {line_no}: empty key")
        if key in table:
            raise ConfigError(f"{path}: line {line_no}: duplicate key {key!r}")
        table[key] = value
    return table


class _Section:
    """Typed access over a parsed table, tracking unknown keys."""

    def __init__(self, table: dict[str, str], origin: Path):
        self.table = dict(table)
        self.origin = origin
        self.used: set[str] = set()

    def _get(self, key: str):
        self.used.add(key)
        return self.table.get(key)

    def has(self, key: str) -> bool:
        return key in self.table

    def str_(self, key: str, default: str | None = None) -> str | None:
        value = self._get(key)
        return default if value is None else value

    def int_(self, key: str, default: int | None = None) -> int | None:
        value = self._get(key)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{self.origin}: {key} must be an integer, got {value!r}")

    def float_(self, key: str, default: float | None = None) -> float | None:
        value = self._get(key)
        if value is None:
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{self.origin}: {key} must be a number, got {value!r}")

    def bool_(self, key: str, default: bool | None = None) -> bool | None:
        value = self._get(key)
        if value is None:
            return default
        lowered = value.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{self.origin}: {key} must be a boolean, got {value!r}")

    def path_(self, key: str) -> Path | None:
        value = self._get(key)
        if value is None:
            return None
        resolved = (self.origin.parent / value).resolve()
        if not resolved.exists():
            raise ConfigError(f"{self.origin}: {key} references missing path {resolved}")
        return resolved

    def unknown_keys(self, known_prefixes: tuple[str, ...] = ()) -> list[str]:
        leftover = []
        for key in self.table:
            if key in self.used:
                continue
            if any(key.startswith(p) for p in known_prefixes):
                continue
            leftover.append(key)
        return sorted(leftover)


def load_synthetic_config(path) -> SyntheticStreamConfig:
    origin = Path(path)
    section = _Section(parse_kv_file(origin), origin)
    objects = []
    index = 1
    while section.has(f"object{index}.class_id"):
        prefix = f"object{index}."
        objects.append(ObjectSpec(
            class_id=section.int_(prefix + "class_id"),
            shape=section.str_(prefix + "shape", "disc"),
            size_range=(section.float_(prefix + "size_min", 8.0),
                        section.float_(prefix + "size_max", 14.0)),
            speed_range=(section.float_(prefix + "speed_min", 0.3),
                         section.float_(prefix + "speed_max", 1.0)),
            texture_seed=section.int_(prefix + "texture_seed", 0)))
        index += 1
    events = []
    index = 1
    while section.has(f"event{index}.frame"):
        prefix = f"event{index}."
        events.append(EventSpec(
            frame_index=section.int_(prefix + "frame"),
            kind=section.str_(prefix + "kind", ""),
            object_index=section.int_(prefix + "object", None),
            dx=section.float_(prefix + "dx", 0.0),
            dy=section.float_(prefix + "dy", 0.0)))
        index += 1
    try:
        cfg = SyntheticStreamConfig(
            width=section.int_("width", 96),
            height=section.int_("height", 96),
            num_frames=section.int_("num_frames", 1000),
            class_count=section.int_("class_count", 3),
            objects=tuple(objects),
            events=tuple(events),
            seed=section.int_("seed", 0),
            textured=section.bool_("textured", True))
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    leftover = section.unknown_keys(("object", "event"))
    if leftover:
        raise ConfigError(f"{origin}: unknown keys {leftover}")
    return cfg


@dataclass
class RunConfig:
    origin: Path
    seed: int
    fps: float
    distill: DistillConfig
    arch: ArchConfig
    cost: CostModel
    noise: TeacherNoise
    synthetic: SyntheticStreamConfig | None
    container: Path | None
    recorded_teacher: Path | None
    init_snapshot: Path | None
    out_dir: Path | None


def _read_distill(section: _Section) -> DistillConfig:
    try:
        return DistillConfig(
            u_max=section.int_("u_max", 8),
            delta_min=section.int_("delta_min", 8),
            delta_max=section.int_("delta_max", 64),
            a_thresh=section.float_("a_thresh", 0.8),
            lr=section.float_("lr", 0.01),
            momentum=section.float_("momentum", 0.9),
            conf_thresh=section.float_("conf_thresh", 0.5),
            weight_factor=section.float_("weight_factor", 5.0),
            box_dilation=section.float_("box_dilation", 0.15))
    except ValueError as exc:
        raise ConfigError(f"{section.origin}: {exc}") from exc


def _read_arch(section: _Section, num_classes: int) -> ArchConfig:
    try:
        return ArchConfig(
            num_classes=num_classes,
            width_multiplier=section.float_("width_multiplier", 1.0),
            input_scale=section.float_("input_scale", 1.0),
            skip_connections=section.bool_("skip_connections", True))
    except ValueError as exc:
        raise ConfigError(f"{section.origin}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    origin = Path(path)
    section = _Section(parse_kv_file(origin), origin)

    synthetic_path = section.path_("stream.synthetic")
    container = section.path_("stream.container")
    recorded = section.path_("stream.recorded_teacher")
    if (synthetic_path is None) == (container is None):
        raise ConfigError(f"{origin}: exactly one of stream.synthetic / "
                          f"stream.container must be set")
    if container is not None and recorded is None:
        raise ConfigError(f"{origin}: a container stream needs "
                          f"stream.recorded_teacher for supervision")
    synthetic = load_synthetic_config(synthetic_path) if synthetic_path else None

    num_classes = section.int_("num_classes",
                               synthetic.class_count + 1 if synthetic else None)
    if num_classes is None:
        raise ConfigError(f"{origin}: num_classes is required for container streams")

    try:
        noise = TeacherNoise(
            boundary_jitter_px=section.int_("noise.jitter_px", 0),
            confidence_spread=section.float_("noise.conf_spread", 0.0),
            drop_prob=section.float_("noise.drop_prob", 0.0))
        cost = CostModel(
            t_teacher=section.float_("cost.teacher_ms", 300.0),
            t_infer=section.float_("cost.infer_ms", 7.0),
            t_update=section.float_("cost.update_ms", 30.0))
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc

    out_dir = section.str_("out_dir")
    cfg = RunConfig(
        origin=origin,
        seed=section.int_("seed", 0),
        fps=section.float_("fps", 25.0),
        distill=_read_distill(section),
        arch=_read_arch(section, num_classes),
        cost=cost,
        noise=noise,
        synthetic=synthetic,
        container=container,
        recorded_teacher=recorded,
        init_snapshot=section.path_("init_snapshot"),
        out_dir=(origin.parent / out_dir).resolve() if out_dir else None)
    leftover = section.unknown_keys()
    if leftover:
        raise ConfigError(f"{origin}: unknown keys {leftover}")
    return cfg


@dataclass
class PretrainConfig:
    origin: Path
    scenes: int
    frames_per_scene: int
    width: int
    height: int
    class_count: int
    presence_prob: float
    size_min: float
    size_max: float
    size_span: float
    speed_min: float
    speed_max: float
    epochs: int
    every_kth: int
    seed: int
    distill: DistillConfig
    arch: ArchConfig
    textured: bool


def load_pretrain_config(path) -> PretrainConfig:
    origin = Path(path)
    section = _Section(parse_kv_file(origin), origin)
    class_count = section.int_("corpus.class_count", 3)
    num_classes = section.int_("num_classes", class_count + 1)
    cfg = PretrainConfig(
        origin=origin,
        scenes=section.int_("corpus.scenes", 24),
        frames_per_scene=section.int_("corpus.frames_per_scene", 8),
        width=section.int_("corpus.width", 96),
        height=section.int_("corpus.height", 96),
        class_count=class_count,
        presence_prob=section.float_("corpus.presence_prob", 0.8),
        size_min=section.float_("corpus.size_min", 10.0),
        size_max=section.float_("corpus.size_max", 16.0),
        size_span=section.float_("corpus.size_span", 6.0),
        speed_min=section.float_("corpus.speed_min", 0.1),
        speed_max=section.float_("corpus.speed_max", 0.6),
        epochs=section.int_("epochs", 3),
        every_kth=section.int_("corpus.every_kth", 1),
        seed=section.int_("seed", 0),
        distill=_read_distill(section),
        arch=_read_arch(section, num_classes),
        textured=section.bool_("corpus.textured", True))
    if cfg.scenes < 1 or cfg.frames_per_scene < 1:
        raise ConfigError(f"{origin}: corpus must contain at least one frame")
    leftover = section.unknown_keys()
    if leftover:
        raise ConfigError(f"{origin}: unknown keys {leftover}")
    return cfg
