"""Immutable domain types shared across the registry, planner, offload and fedsim modules.

Task kinds are plain strings. The built-in kinds below carry input/output
modalities used to check that sequential plans form a chain; any other
non-empty identifier is a custom kind and matches every modality.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .errors import InvalidPlan, ValidationError

IMAGE_CLASSIFICATION = "image_classification"
IMAGE_CAPTIONING = "image_captioning"
VQA = "vqa"
POSE_DETECTION = "pose_detection"
POSE_TO_IMAGE = "pose_to_image"
MOOD_FROM_TRAFFIC = "mood_from_traffic"
MOOD_FROM_PHYSIO = "mood_from_physio"

# task kind -> (consumed modality, produced modality)
TASK_IO: dict[str, tuple[str, str]] = {
    IMAGE_CLASSIFICATION: ("image", "label"),
    IMAGE_CAPTIONING: ("image", "text"),
    VQA: ("image", "text"),
    POSE_DETECTION: ("image", "pose"),
    POSE_TO_IMAGE: ("pose", "image"),
    MOOD_FROM_TRAFFIC: ("traffic", "mood"),
    MOOD_FROM_PHYSIO: ("physio", "mood"),
}
BUILTIN_TASKS: tuple[str, ...] = tuple(TASK_IO)

_KIND_RE = re.compile(r"^[a-z0-9][a-z0-9_.\-]*$")

USER_DATA = "user_data"
PREVIOUS_STEP = "previous_step"
SENSOR_PREFIX = "sensor:"


def is_task_kind(kind: Any) -> bool:
    return isinstance(kind, str) and bool(_KIND_RE.match(kind))


def is_custom(kind: str) -> bool:
    return kind not in TASK_IO


def sensor(name: str) -> str:
    return SENSOR_PREFIX + name


def sensor_name(source: str) -> str | None:
    if source.startswith(SENSOR_PREFIX):
        return source[len(SENSOR_PREFIX):]
    return None


def is_input_source(source: Any) -> bool:
    if not isinstance(source, str):
        return False
    if source in (USER_DATA, PREVIOUS_STEP):
        return True
    name = sensor_name(source)
    return bool(name)


class Tier(str, enum.Enum):
    CLIENT = "client"
    EDGE = "edge"
    CLOUD = "cloud"


class Combine(str, enum.Enum):
    SINGLE = "single"
    SEQUENCE = "sequence"
    FUSE_OUTPUTS = "fuse_outputs"


@dataclass(frozen=True)
class LayerProfile:
    flops: int
    out_feature_bytes: int


@dataclass(frozen=True)
class ModelManifest:
    id: str
    task_kind: str
    layers: tuple[LayerProfile, ...]
    param_count: int
    input_bytes: int

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    @property
    def result_bytes(self) -> int:
        return self.layers[-1].out_feature_bytes

    def feature_bytes(self, split: int) -> int:
        """Bytes crossing the link when the first ``split`` layers run on the client."""
        if split == 0:
            return self.input_bytes
        return self.layers[split - 1].out_feature_bytes


@dataclass(frozen=True)
class DeviceProfile:
    id: str
    throughput: float
    tier: Tier


@dataclass(frozen=True)
class LinkProfile:
    rate: float
    propagation_delay: float = 0.0


LINK_NAMES = ("client_edge_up", "client_edge_down", "edge_cloud_up", "edge_cloud_down")


@dataclass(frozen=True)
class Links:
    client_edge_up: LinkProfile
    client_edge_down: LinkProfile
    edge_cloud_up: LinkProfile
    edge_cloud_down: LinkProfile


@dataclass(frozen=True)
class PlanStep:
    task_kind: str
    model_id: str | None = None
    input_source: str | None = None


@dataclass(frozen=True)
class TaskPlan:
    steps: tuple[PlanStep, ...]
    combine: Combine = Combine.SINGLE

    @property
    def task_kinds(self) -> tuple[str, ...]:
        return tuple(step.task_kind for step in self.steps)


def check_plan_shape(plan: TaskPlan) -> None:
    """Raise InvalidPlan unless the plan has steps and a consistent combine mode."""
    if not plan.steps:
        raise InvalidPlan("plan has no steps")
    if plan.combine is Combine.SINGLE and len(plan.steps) != 1:
        raise InvalidPlan(f"single plan with {len(plan.steps)} steps")
    if plan.combine is Combine.SEQUENCE:
        for i, (prev, step) in enumerate(zip(plan.steps, plan.steps[1:]), start=1):
            if step.input_source not in (None, PREVIOUS_STEP):
                raise InvalidPlan(f"step {i} of a sequence must consume the previous step")
            produced = TASK_IO.get(prev.task_kind, (None, None))[1]
            consumed = TASK_IO.get(step.task_kind, (None, None))[0]
            if produced and consumed and produced != consumed:
                raise InvalidPlan(
                    f"step {i} ({step.task_kind}) cannot consume {produced} "
                    f"produced by {prev.task_kind}"
                )


@dataclass(frozen=True)
class Demonstration:
    request: str
    plan: TaskPlan


@dataclass(frozen=True)
class PrefixSpec:
    sensors: tuple[str, ...] = ()
    solvable_tasks: tuple[str, ...] = ()
    demonstrations: tuple[Demonstration, ...] = ()


# -- federated learning configuration ---------------------------------------


@dataclass(frozen=True)
class SGD:
    pass


@dataclass(frozen=True)
class SGDMomentum:
    mu: float = 0.9


@dataclass(frozen=True)
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


Optimizer = SGD | SGDMomentum | Adam


@dataclass(frozen=True)
class ConstantLR:
    pass


@dataclass(frozen=True)
class StepDecay:
    factor: float
    every_rounds: int

    def __post_init__(self):
        if not 0 < self.factor <= 1:
            raise ValueError("StepDecay factor must lie in (0, 1]")
        if self.every_rounds < 1:
            raise ValueError("StepDecay every_rounds must be >= 1")


LRSchedule = ConstantLR | StepDecay


@dataclass(frozen=True)
class NoAugmentation:
    pass


@dataclass(frozen=True)
class GaussianJitter:
    sigma: float


Augmentation = NoAugmentation | GaussianJitter


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 10
    batch_size: int = 100
    local_epochs: int = 10
    global_rounds: int = 30
    lr: float = 0.05
    optimizer: Optimizer = SGD()
    lr_schedule: LRSchedule = ConstantLR()
    augmentation: Augmentation = NoAugmentation()
    model_arch: str = "mlp-32"

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0 or self.global_rounds < 1:
            raise ValueError("local_epochs must be >= 0 and global_rounds >= 1")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be finite and non-negative")

    def lr_at(self, round_index: int) -> float:
        """Learning rate used during ``round_index`` (0-based)."""
        if isinstance(self.lr_schedule, StepDecay):
            return self.lr * self.lr_schedule.factor ** (round_index // self.lr_schedule.every_rounds)
        return self.lr


PATCHABLE_FIELDS = ("model_arch", "lr", "optimizer", "lr_schedule", "augmentation")


def optimizer_to_dict(opt: Optimizer) -> dict:
    if isinstance(opt, SGDMomentum):
        return {"name": "momentum", "mu": opt.mu}
    if isinstance(opt, Adam):
        return {"name": "adam", "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    return {"name": "sgd"}


def schedule_to_dict(schedule: LRSchedule) -> dict:
    if isinstance(schedule, StepDecay):
        return {"name": "step", "factor": schedule.factor, "every_rounds": schedule.every_rounds}
    return {"name": "constant"}


def augmentation_to_dict(aug: Augmentation) -> dict:
    if isinstance(aug, GaussianJitter):
        return {"name": "jitter", "sigma": aug.sigma}
    return {"name": "none"}


def _named(value: Any, where: str) -> tuple[str, dict]:
    if isinstance(value, str):
        return value.lower(), {}
    if isinstance(value, Mapping) and isinstance(value.get("name"), str):
        return value["name"].lower(), {k: v for k, v in value.items() if k != "name"}
    raise ValidationError(where, "expected a name string or an object with a 'name' field")


def _num(params: dict, key: str, default, where: str, cast=float):
    value = params.get(key, default)
    if value is None:
        raise ValidationError(f"{where}.{key}", "missing")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}.{key}", "expected a number")
    if cast is int and float(value) != int(value):
        raise ValidationError(f"{where}.{key}", "expected an integer")
    return cast(value)


def optimizer_from(value: Any, where: str = "optimizer") -> Optimizer:
    if isinstance(value, Optimizer):
        return value
    name, params = _named(value, where)
    if name == "sgd":
        return SGD()
    if name in ("momentum", "sgd_momentum", "sgdmomentum"):
        return SGDMomentum(_num(params, "mu", 0.9, where))
    if name == "adam":
        return Adam(
            _num(params, "beta1", 0.9, where),
            _num(params, "beta2", 0.999, where),
            _num(params, "eps", 1e-8, where),
        )
    raise ValidationError(where, f"unknown optimizer {name!r}")


def schedule_from(value: Any, where: str = "lr_schedule") -> LRSchedule:
    if isinstance(value, LRSchedule):
        return value
    name, params = _named(value, where)
    if name == "constant":
        return ConstantLR()
    if name in ("step", "step_decay", "stepdecay"):
        try:
            return StepDecay(
                _num(params, "factor", None, where),
                _num(params, "every_rounds", None, where, int),
            )
        except ValueError as exc:
            raise ValidationError(where, str(exc)) from None
    raise ValidationError(where, f"unknown lr schedule {name!r}")


def augmentation_from(value: Any, where: str = "augmentation") -> Augmentation:
    if isinstance(value, Augmentation):
        return value
    name, params = _named(value, where)
    if name == "none":
        return NoAugmentation()
    if name in ("jitter", "gaussian_jitter"):
        sigma = _num(params, "sigma", None, where)
        if sigma < 0:
            raise ValidationError(f"{where}.sigma", "must be >= 0")
        return GaussianJitter(sigma)
    raise ValidationError(where, f"unknown augmentation {name!r}")


def fl_config_to_dict(cfg: FLConfig) -> dict:
    return {
        "n_clients": cfg.n_clients,
        "batch_size": cfg.batch_size,
        "local_epochs": cfg.local_epochs,
        "global_rounds": cfg.global_rounds,
        "lr": cfg.lr,
        "optimizer": optimizer_to_dict(cfg.optimizer),
        "lr_schedule": schedule_to_dict(cfg.lr_schedule),
        "augmentation": augmentation_to_dict(cfg.augmentation),
        "model_arch": cfg.model_arch,
    }


def fl_config_from_dict(data: Mapping, where: str = "fl") -> FLConfig:
    if not isinstance(data, Mapping):
        raise ValidationError(where, "expected an object")
    kwargs: dict[str, Any] = {}
    for key in ("n_clients", "batch_size", "local_epochs", "global_rounds"):
        if key in data:
            kwargs[key] = _num(data, key, None, where, int)
    if "lr" in data:
        kwargs["lr"] = _num(data, "lr", None, where)
    if "optimizer" in data:
        kwargs["optimizer"] = optimizer_from(data["optimizer"], f"{where}.optimizer")
    if "lr_schedule" in data:
        kwargs["lr_schedule"] = schedule_from(data["lr_schedule"], f"{where}.lr_schedule")
    if "augmentation" in data:
        kwargs["augmentation"] = augmentation_from(data["augmentation"], f"{where}.augmentation")
    if "model_arch" in data:
        if not isinstance(data["model_arch"], str) or not data["model_arch"]:
            raise ValidationError(f"{where}.model_arch", "expected a non-empty string")
        kwargs["model_arch"] = data["model_arch"]
    try:
        return FLConfig(**kwargs)
    except ValueError as exc:
        raise ValidationError(where, str(exc)) from None


def normalize_patch(patch: Mapping, where: str = "patch") -> dict[str, Any]:
    """Validate a hyperparameter patch, dropping keys that are not patchable."""
    out: dict[str, Any] = {}
    for key in PATCHABLE_FIELDS:
        if key not in patch:
            continue
        value = patch[key]
        if key == "lr":
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value >= 0:
                raise ValidationError(f"{where}.lr", "expected a non-negative number")
            out[key] = float(value)
        elif key == "model_arch":
            if not isinstance(value, str) or not value:
                raise ValidationError(f"{where}.model_arch", "expected a non-empty string")
            out[key] = value
        elif key == "optimizer":
            out[key] = optimizer_from(value, f"{where}.optimizer")
        elif key == "lr_schedule":
            out[key] = schedule_from(value, f"{where}.lr_schedule")
        else:
            out[key] = augmentation_from(value, f"{where}.augmentation")
    return out


def patch_to_dict(patch: Mapping[str, Any]) -> dict:
    out = {}
    for key in PATCHABLE_FIELDS:
        if key not in patch:
            continue
        value = patch[key]
        if key == "optimizer":
            value = optimizer_to_dict(value)
        elif key == "lr_schedule":
            value = schedule_to_dict(value)
        elif key == "augmentation":
            value = augmentation_to_dict(value)
        out[key] = value
    return out


def apply_patch(cfg: FLConfig, patch: Mapping[str, Any]) -> FLConfig:
    """Apply an already-normalized patch (see ``normalize_patch``)."""
    unknown = set(patch) - set(PATCHABLE_FIELDS)
    if unknown:
        raise ValidationError("patch", f"not patchable: {sorted(unknown)}")
    return replace(cfg, **dict(patch))


# -- scenario ---------------------------------------------------------------


@dataclass(frozen=True)
class Settings:
    """Scenario-wide constants of the latency and wall-clock models."""

    advisor_compute_s: float = 0.5
    request_bytes: int = 0
    reply_bytes: int = 0
    fusion_s: float = 0.1
    lossy_ratio: float = 6.6
    fl_uplink: str = "sequential"


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters of the bundled Gaussian-mixture classification dataset."""

    n_train: int = 2000
    n_test: int = 2000
    n_features: int = 8
    n_classes: int = 4
    clusters_per_class: int = 4
    cluster_std: float = 1.0
    separation: float = 2.0
    seed: int = 7


@dataclass(frozen=True)
class Scenario:
    id: str
    models: tuple[ModelManifest, ...]
    devices: tuple[DeviceProfile, ...]
    links: Links
    planner_prefix: PrefixSpec = field(default_factory=PrefixSpec)
    fl: FLConfig | None = None
    fl_data: MixtureSpec | None = None
    settings: Settings = field(default_factory=Settings)

    def model(self, model_id: str) -> ModelManifest:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    def device(self, tier: Tier) -> DeviceProfile:
        """First device of ``tier`` in declaration order."""
        for d in self.devices:
            if d.tier is tier:
                return d
        raise KeyError(tier.value)

    def has_tier(self, tier: Tier) -> bool:
        return any(d.tier is tier for d in self.devices)

    def with_link(self, name: str, link: LinkProfile) -> "Scenario":
        return replace(self, links=replace(self.links, **{name: link}))


# -- plan wire form ---------------------------------------------------------
# {"tasks": [{"task": ..., "model": ..., "input": ...}], "combine": ...}


def plan_to_dict(plan: TaskPlan) -> dict:
    tasks = []
    for step in plan.steps:
        item = {"task": step.task_kind}
        if step.model_id is not None:
            item["model"] = step.model_id
        if step.input_source is not None:
            item["input"] = step.input_source
        tasks.append(item)
    return {"tasks": tasks, "combine": plan.combine.value}


def plan_from_dict(data: Any, where: str = "plan") -> TaskPlan:
    if not isinstance(data, Mapping):
        raise ValidationError(where, "expected an object")
    tasks = data.get("tasks")
    if not isinstance(tasks, list) or not tasks:
        raise ValidationError(f"{where}.tasks", "expected a non-empty list")
    steps = []
    for i, item in enumerate(tasks):
        at = f"{where}.tasks[{i}]"
        if not isinstance(item, Mapping):
            raise ValidationError(at, "expected an object")
        kind = item.get("task")
        if not is_task_kind(kind):
            raise ValidationError(f"{at}.task", "expected a task kind identifier")
        model = item.get("model")
        if model is not None and (not isinstance(model, str) or not model):
            raise ValidationError(f"{at}.model", "expected a model id string")
        source = item.get("input")
        if source is not None and not is_input_source(source):
            raise ValidationError(f"{at}.input", f"unknown input source {source!r}")
        steps.append(PlanStep(kind, model, source))
    combine = data.get("combine")
    if combine is None:
        combine = Combine.SINGLE if len(steps) == 1 else Combine.SEQUENCE
    else:
        try:
            combine = Combine(combine)
        except ValueError:
            raise ValidationError(f"{where}.combine", f"unknown combine mode {combine!r}") from None
    return TaskPlan(tuple(steps), combine)
