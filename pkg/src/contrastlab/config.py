"""Experiment configuration: a JSON document with one section per component.

Unknown keys are rejected anywhere in the document.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import augment, model, optim
from .augment import AuxPolicy, BasicPolicy, DEFAULT_AUX_POOL, load_autoaugment_policy
from .loss import LOSS_KINDS
from .model import EncoderConfig
from .optim import SCHEDULE_KINDS, ScheduleConfig, SgdConfig

VIEW_SCHEMES = ("three_view", "two_basic", "three_basic")
DATASET_KINDS = ("synthetic", "cifar10", "records")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    num_classes: int = 10
    per_class: int = 50
    test_per_class: int = 20
    image_size: int = 32
    seed: int = 0
    subset: int | None = None
    test_subset: int | None = None


@dataclass
class AuxConfig:
    num_ops: int = 2
    magnitude: int = 10
    op_pool: list[str] = field(default_factory=lambda: list(DEFAULT_AUX_POOL))
    crop_scale_range: list[float] = field(default_factory=lambda: [0.2, 1.0])
    policy_file: str | None = None


@dataclass
class LossConfig:
    kind: str = "gnt_xent"
    temperature: float = 0.1


@dataclass
class ScheduleSection:
    kind: str = "cosine"
    warmup_epochs: int = 0
    lr_scaling: bool = False
    step_milestones: list[float] = field(default_factory=lambda: [0.6, 0.8])
    step_gamma: float = 0.1


@dataclass
class EvalConfig:
    every: int = 10
    k: int = 200
    temperature: float = 0.1
    at_start: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    basic: BasicPolicy = field(default_factory=BasicPolicy)
    aux: AuxConfig = field(default_factory=AuxConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    view_scheme: str = "three_view"
    sgd: SgdConfig = field(default_factory=SgdConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    output_dir: str = "runs/default"
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.dataset.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.dataset.kind!r}")
        if self.dataset.kind != "synthetic" and not self.dataset.path:
            raise ConfigError(f"dataset.path is required for dataset.kind={self.dataset.kind!r}")
        if self.loss.kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}, got {self.loss.kind!r}")
        if not self.loss.temperature > 0:
            raise ConfigError("loss.temperature must be positive")
        if self.view_scheme not in VIEW_SCHEMES:
            raise ConfigError(f"view_scheme must be one of {VIEW_SCHEMES}, got {self.view_scheme!r}")
        if self.schedule.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule.kind must be one of {SCHEDULE_KINDS}, got {self.schedule.kind!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.eval.every < 0 or self.eval.k < 1 or not self.eval.temperature > 0:
            raise ConfigError("eval.every must be >= 0, eval.k >= 1 and eval.temperature > 0")
        size = self.dataset.image_size
        if self.encoder.input_size != size or self.basic.output_size != size:
            raise ConfigError(f"encoder.input_size and basic.output_size must equal dataset.image_size ({size})")
        try:
            self.schedule_config()
            self.aux_policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def schedule_config(self) -> ScheduleConfig:
        s = self.schedule
        return ScheduleConfig(total_epochs=self.epochs, warmup_epochs=s.warmup_epochs, batch_size=self.batch_size,
                              lr_scaling=s.lr_scaling, kind=s.kind,
                              step_milestones=tuple(s.step_milestones), step_gamma=s.step_gamma)

    def aux_policy(self) -> AuxPolicy | None:
        """``None`` when the scheme uses no auxiliary view."""
        if self.view_scheme != "three_view":
            return None
        a = self.aux
        subs = load_autoaugment_policy(a.policy_file) if a.policy_file else None
        return AuxPolicy(num_ops=a.num_ops, magnitude=a.magnitude, op_pool=tuple(a.op_pool),
                         crop_scale_range=tuple(a.crop_scale_range), output_size=self.dataset.image_size,
                         sub_policies=subs)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


# ---------------------------------------------------------------------------
# parsing


def _resolve_hints(cls) -> dict[str, typing.Any]:
    ns = {**vars(augment), **vars(model), **vars(optim), **globals()}
    return typing.get_type_hints(cls, globalns=ns)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = _resolve_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = _coerce(hint, value, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(hint, value, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        elem = args[0] if args else typing.Any
        items = [value_ if elem is typing.Any else _coerce(elem, value_, path) for value_ in value]
        return tuple(items) if origin is tuple else items
    return value


def _merge(base: dict, delta: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in delta.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path: str | Path, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if preset:
        data = _merge(data, ablation_preset(preset))
    if overrides:
        data = _merge(data, overrides)
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# ablation presets

PRESETS: dict[str, dict] = {
    "two_basic_views": {"view_scheme": "two_basic"},
    "three_basic_views": {"view_scheme": "three_basic"},
    "step_lr": {"schedule": {"kind": "step"}},
    "nt_xent_loss": {"loss": {"kind": "nt_xent"}},
    "randaugment_aux": {"view_scheme": "three_view",
                        "aux": {"num_ops": 2, "magnitude": 10, "policy_file": None}},
}


def ablation_preset(name: str) -> dict:
    """Config delta for one of the ablation variants."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def apply_preset(config: ExperimentConfig, name: str) -> ExperimentConfig:
    return config_from_dict(_merge(config.to_dict(), ablation_preset(name)))
