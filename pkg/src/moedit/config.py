"""Run configuration: one JSON file describes a full experiment.

Sections map one-to-one onto the component configs; unknown keys are
rejected so a typo fails loudly instead of silently running defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .benchmark import BenchmarkConfig
from .editor import EditorConfig
from .surrogate import SurrogateConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainSettings:
    lr: float = 3e-3
    batch_size: int = 64
    max_steps: int = 6000
    target_accuracy: float = 0.995
    check_every: int = 200


@dataclass(frozen=True)
class AblationSettings:
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class SweepSettings:
    seeds: tuple[int, ...] = (0,)
    ranks: tuple[int, ...] = ()
    module_dims: tuple[int, ...] = ()


@dataclass(frozen=True)
class GradcheckSettings:
    batch_size: int = 2
    eps: float = 1e-5
    max_coords: int = 4
    tolerance: float = 1e-4


@dataclass(frozen=True)
class AcceptanceThresholds:
    reliability: float = 0.90
    gen_text: float = 0.85
    gen_modal: float = 0.80
    loc_text: float = 0.99
    loc_modal: float = 0.95
    max_drop: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    eval_points: tuple[int, ...] = ()
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    editor: EditorConfig = field(default_factory=EditorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)
    acceptance: AcceptanceThresholds = field(default_factory=AcceptanceThresholds)

    def resolved_eval_points(self) -> tuple[int, ...]:
        n = self.benchmark.n_eval_edits
        if self.eval_points:
            return tuple(p for p in self.eval_points if p <= n)
        return tuple(sorted({1, max(1, n // 10), n}))

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "eval_points": list(self.resolved_eval_points())}
        for name in ("surrogate", "editor", "training", "benchmark"):
            out[name] = getattr(self, name).to_dict()
        for name in ("pretrain", "ablation", "sweep", "gradcheck", "acceptance"):
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in d.items()}
        return out


_SECTIONS = {
    "surrogate": SurrogateConfig,
    "editor": EditorConfig,
    "training": TrainConfig,
    "benchmark": BenchmarkConfig,
    "pretrain": PretrainSettings,
    "ablation": AblationSettings,
    "sweep": SweepSettings,
    "gradcheck": GradcheckSettings,
    "acceptance": AcceptanceThresholds,
}

_TUPLE_FIELDS = {"seeds", "ranks", "module_dims", "eval_points"}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
              for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def run_config_from_dict(data: dict, where: str = "config") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: top level must be an object")
    known = set(_SECTIONS) | {"seed", "eval_points"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown sections {unknown}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError(f"{where}: seed must be an integer")
        kwargs["seed"] = data["seed"]
    if "eval_points" in data:
        pts = data["eval_points"]
        if (not isinstance(pts, list) or not all(isinstance(p, int) for p in pts)
                or any(p < 1 for p in pts) or pts != sorted(pts)):
            raise ConfigError(f"{where}: eval_points must be ascending positive integers")
        kwargs["eval_points"] = tuple(pts)
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], f"{where}.{name}")
    return RunConfig(**kwargs)


def load_run_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data, where=str(path))


def write_json(path: Path | str, obj) -> None:
    """Canonical JSON artifact: sorted keys, indented, trailing newline."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
