"""Experiment configuration files.

The format is flat UTF-8 ``key = value`` lines.  Keys use dotted section
prefixes (``distill.alpha``), ``#`` starts a comment, and blank lines are
ignored.  Every key has a default except ``dataset.path``.  Unknown keys,
duplicates, type errors and constraint violations raise :class:`ConfigError`
naming the offending key.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .data import AugmentConfig
from .distill import DistillConfig
from .models import ArchScale
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_text", "DEFAULTS"]


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}: {message}{where}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _pair(text: str) -> tuple:
    parts = [p for p in text.strip().strip("[]()").replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers 'lo, hi', got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _str(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    return text


# key -> (parser, default); None default marks a required key
DEFAULTS: dict[str, tuple[Callable, object]] = {
    "dataset.path": (_str, None),
    "dataset.format": (_str, "raw"),
    "dataset.side": (int, 32),
    "arch.width": (int, 8),
    "arch.stages": (int, 2),
    "arch.vgg_convs": (int, 1),
    "arch.res_blocks": (int, 1),
    "arch.head_width": (int, 64),
    "arch.student_blocks": (int, 3),
    "arch.expansion": (int, 3),
    "teacher.learning_rate": (float, 1e-5),
    "teacher.batch_size": (int, 32),
    "teacher.epochs": (int, 30),
    "student.learning_rate": (float, 1e-5),
    "student.batch_size": (int, 32),
    "student.epochs": (int, 30),
    "distill.alpha": (float, 0.9),
    "distill.temperature": (float, 4.0),
    "distill.kl_direction": (_str, "teacher"),
    "distill.tune": (_bool, False),
    "augment.enabled": (_bool, True),
    "augment.rotation": (_pair, (0.0, 20.0)),
    "folds.k": (int, 5),
    "folds.seed": (int, 0),
    "holdout.train_fraction": (float, 0.8),
    "oversample.enabled": (_bool, True),
    "oversample.paper_faithful": (_bool, False),
    "output.dir": (_str, "runs"),
    "seed": (int, 0),
}

_FORMATS = ("raw", "pgm")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: Path
    dataset_format: str
    scale: ArchScale
    teacher_train: TrainConfig
    student_train: TrainConfig
    distill: DistillConfig
    augment: Optional[AugmentConfig]
    k: int
    fold_seed: int
    train_fraction: float
    oversample: bool
    paper_faithful: bool
    tune: bool
    out_dir: Path
    seed: int
    values: dict  # resolved key -> value table, echoed into run manifests

    @property
    def config_hash(self) -> str:
        """sha256 of every setting except ``output.dir``, which says where results go, not what they are."""
        values = {k: v for k, v in _jsonable(self.values).items() if k != "output.dir"}
        return hashlib.sha256(json.dumps(values, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()

    def canonical(self) -> str:
        return json.dumps(_jsonable(self.values), sort_keys=True, separators=(",", ":"))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        values = dict(self.values)
        for key, value in overrides.items():
            key = key.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown key")
            values[key] = value
        return _build(values, Path("."))

    def to_text(self) -> str:
        lines = []
        for key in DEFAULTS:
            v = self.values[key]
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def _jsonable(values: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else str(v) if isinstance(v, Path) else v) for k, v in values.items()}


def parse_config_text(text: str, base_dir=".") -> ExperimentConfig:
    """Parse config text; relative paths resolve against ``base_dir``."""
    values: dict = {}
    seen_at: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line.split()[0], "expected 'key = value'", lineno)
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown key", lineno)
        if key in seen_at:
            raise ConfigError(key, f"duplicate key, first set on line {seen_at[key]}", lineno)
        seen_at[key] = lineno
        parser = DEFAULTS[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {value!r} as {getattr(parser, '__name__', 'value').lstrip('_')}: {exc}", lineno) from None
    for key, (_, default) in DEFAULTS.items():
        if key not in values:
            if default is None:
                raise ConfigError(key, "required key is missing")
            values[key] = default
    return _build(values, Path(base_dir))


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    return parse_config_text(text, path.parent)


def _checked(key: str, build):
    try:
        return build()
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, str(exc)) from None


def _build(values: dict, base: Path) -> ExperimentConfig:
    v = values
    if v["dataset.format"] not in _FORMATS:
        raise ConfigError("dataset.format", f"must be one of {_FORMATS}, got {v['dataset.format']!r}")
    dataset = Path(v["dataset.path"])
    if not dataset.is_absolute():
        dataset = base / dataset
    out_dir = Path(v["output.dir"])
    if not out_dir.is_absolute():
        out_dir = base / out_dir
    for key in ("dataset.side",) + tuple(k for k in DEFAULTS if k.startswith("arch.")):
        if v[key] < 1:
            raise ConfigError(key, f"must be positive, got {v[key]}")
    scale = _checked(
        "arch",
        lambda: ArchScale(
            side=v["dataset.side"],
            width=v["arch.width"],
            stages=v["arch.stages"],
            vgg_convs=v["arch.vgg_convs"],
            res_blocks=v["arch.res_blocks"],
            head_width=v["arch.head_width"],
            student_blocks=v["arch.student_blocks"],
            expansion=v["arch.expansion"],
        ),
    )
    trains = {}
    for role in ("teacher", "student"):
        for field_ in ("learning_rate", "batch_size", "epochs"):
            key = f"{role}.{field_}"
            bad = v[key] <= 0 if field_ != "epochs" else v[key] < 0
            if bad:
                raise ConfigError(key, f"out of range: {v[key]}")
        trains[role] = TrainConfig(
            learning_rate=v[f"{role}.learning_rate"],
            batch_size=v[f"{role}.batch_size"],
            epochs=v[f"{role}.epochs"],
            seed=v["seed"],
        )
    if not 0.0 <= v["distill.alpha"] <= 1.0:
        raise ConfigError("distill.alpha", f"alpha must lie in [0, 1], got {v['distill.alpha']}")
    if not v["distill.temperature"] > 0:
        raise ConfigError("distill.temperature", f"temperature must be positive, got {v['distill.temperature']}")
    distill = _checked(
        "distill.kl_direction",
        lambda: DistillConfig(v["distill.alpha"], v["distill.temperature"], v["distill.kl_direction"]),
    )
    augment = None
    if v["augment.enabled"]:
        augment = _checked("augment.rotation", lambda: AugmentConfig(tuple(v["augment.rotation"]), v["seed"]))
    if v["folds.k"] < 2:
        raise ConfigError("folds.k", f"k must be >= 2, got {v['folds.k']}")
    if not 0 < v["holdout.train_fraction"] < 1:
        raise ConfigError("holdout.train_fraction", f"must lie in (0, 1), got {v['holdout.train_fraction']}")
    if v["seed"] < 0 or v["folds.seed"] < 0:
        raise ConfigError("seed" if v["seed"] < 0 else "folds.seed", "seeds must be non-negative")
    return ExperimentConfig(
        dataset_path=dataset,
        dataset_format=v["dataset.format"],
        scale=scale,
        teacher_train=trains["teacher"],
        student_train=trains["student"],
        distill=distill,
        augment=augment,
        k=v["folds.k"],
        fold_seed=v["folds.seed"],
        train_fraction=v["holdout.train_fraction"],
        oversample=v["oversample.enabled"],
        paper_faithful=v["oversample.paper_faithful"],
        tune=v["distill.tune"],
        out_dir=out_dir,
        seed=v["seed"],
        values=dict(v, **{"dataset.path": str(dataset), "output.dir": str(out_dir)}),
    )
