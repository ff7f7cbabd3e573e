"""Scenario files: loading, validation, reserialization and model lookup.

Scenario files are JSON documents (schema in the README). Link rates accept
either a number of bytes per second or a string with a decimal unit such as
``"250 KB/s"``; ``KB`` always means 1000 bytes.
"""

from __future__ import annotations

import json
import math
import re
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .domain import (
    LINK_NAMES,
    Demonstration,
    DeviceProfile,
    LayerProfile,
    LinkProfile,
    Links,
    MixtureSpec,
    ModelManifest,
    PrefixSpec,
    Scenario,
    Settings,
    Tier,
    check_plan_shape,
    fl_config_from_dict,
    fl_config_to_dict,
    is_task_kind,
    plan_from_dict,
    plan_to_dict,
    sensor_name,
)
from .errors import InvalidPlan, ParseError, ScenarioFileNotFound, ValidationError

_UNITS = {
    "": 1, "b": 1,
    "k": 1e3, "kb": 1e3, "kib": 1024,
    "m": 1e6, "mb": 1e6, "mib": 1024**2,
    "g": 1e9, "gb": 1e9, "gib": 1024**3,
}
_RATE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([a-zA-Z]*)\s*(?:/\s*s)?\s*$")


def bundled_path(name: str) -> Path:
    """Path of a data file shipped inside the package (e.g. ``default_scenario.json``)."""
    return Path(str(resources.files("edgeplan") / "data" / name))


def parse_quantity(value: Any, where: str) -> float:
    """Number or unit string (``"250 KB/s"``, ``"1.5MB"``, ``"250k"``) in base units."""
    if isinstance(value, bool):
        raise ValidationError(where, "expected a number")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _RATE_RE.match(value)
        if m and m.group(2).lower() in _UNITS:
            return float(m.group(1)) * _UNITS[m.group(2).lower()]
        raise ValidationError(where, f"cannot parse quantity {value!r}")
    raise ValidationError(where, "expected a number or unit string")


def _obj(data: Any, where: str) -> Mapping:
    if not isinstance(data, Mapping):
        raise ValidationError(where, "expected an object")
    return data


def _list(data: Mapping, key: str, where: str, required: bool = True) -> list:
    if key not in data:
        if required:
            raise ValidationError(f"{where}{key}", "missing")
        return []
    value = data[key]
    if not isinstance(value, list):
        raise ValidationError(f"{where}{key}", "expected a list")
    return value


def _str(data: Mapping, key: str, where: str) -> str:
    value = data.get(key)
    if value is None:
        raise ValidationError(f"{where}.{key}", "missing")
    if not isinstance(value, str) or not value:
        raise ValidationError(f"{where}.{key}", "expected a non-empty string")
    return value


def _int(data: Mapping, key: str, where: str, minimum: int | None = None) -> int:
    if key not in data:
        raise ValidationError(f"{where}.{key}", "missing")
    value = parse_quantity(data[key], f"{where}.{key}")
    if not math.isfinite(value) or value != int(value):
        raise ValidationError(f"{where}.{key}", "expected an integer")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ValidationError(f"{where}.{key}", f"must be >= {minimum}")
    return value


def _real(data: Mapping, key: str, where: str, default: float | None = None,
          positive: bool = False) -> float:
    if key not in data:
        if default is None:
            raise ValidationError(f"{where}.{key}", "missing")
        return default
    value = parse_quantity(data[key], f"{where}.{key}")
    if not math.isfinite(value):
        raise ValidationError(f"{where}.{key}", "must be finite")
    if positive and value <= 0:
        raise ValidationError(f"{where}.{key}", "must be > 0")
    if not positive and value < 0:
        raise ValidationError(f"{where}.{key}", "must be >= 0")
    return value


def _manifest(data: Any, where: str) -> ModelManifest:
    data = _obj(data, where)
    mid = _str(data, "id", where)
    kind = data.get("task_kind")
    if not is_task_kind(kind):
        raise ValidationError(f"{where}.task_kind", "expected a task kind identifier")
    raw_layers = _list(data, "layers", where + ".")
    if not raw_layers:
        raise ValidationError(f"{where}.layers", "must be non-empty")
    layers = []
    for i, layer in enumerate(raw_layers):
        at = f"{where}.layers[{i}]"
        layer = _obj(layer, at)
        layers.append(LayerProfile(_int(layer, "flops", at, 1), _int(layer, "out_feature_bytes", at, 0)))
    if layers[-1].out_feature_bytes <= 0:
        raise ValidationError(f"{where}.layers[{len(layers) - 1}].out_feature_bytes",
                              "final result size must be > 0")
    return ModelManifest(
        id=mid,
        task_kind=kind,
        layers=tuple(layers),
        param_count=_int(data, "param_count", where, 0),
        input_bytes=_int(data, "input_bytes", where, 0),
    )


def _device(data: Any, where: str) -> DeviceProfile:
    data = _obj(data, where)
    try:
        tier = Tier(str(data.get("tier", "")).lower())
    except ValueError:
        raise ValidationError(f"{where}.tier", "expected one of client, edge, cloud") from None
    return DeviceProfile(_str(data, "id", where), _real(data, "throughput", where, positive=True), tier)


def _link(data: Any, where: str) -> LinkProfile:
    data = _obj(data, where)
    return LinkProfile(
        rate=_real(data, "rate", where, positive=True),
        propagation_delay=_real(data, "propagation_delay", where, default=0.0),
    )


def _prefix(data: Any, where: str) -> PrefixSpec:
    data = _obj(data, where)
    sensors = _list(data, "sensors", where + ".", required=False)
    if not all(isinstance(s, str) and s for s in sensors):
        raise ValidationError(f"{where}.sensors", "expected a list of names")
    tasks = _list(data, "solvable_tasks", where + ".", required=False)
    for i, kind in enumerate(tasks):
        if not is_task_kind(kind):
            raise ValidationError(f"{where}.solvable_tasks[{i}]", "expected a task kind identifier")
    demos = []
    for i, demo in enumerate(_list(data, "demonstrations", where + ".", required=False)):
        at = f"{where}.demonstrations[{i}]"
        demo = _obj(demo, at)
        request = _str(demo, "request", at)
        plan = plan_from_dict(demo.get("plan"), f"{at}.plan")
        for j, step in enumerate(plan.steps):
            if step.task_kind not in tasks:
                raise ValidationError(f"{at}.plan.tasks[{j}].task", "not a solvable task")
            name = sensor_name(step.input_source or "")
            if name is not None and name not in sensors:
                raise ValidationError(f"{at}.plan.tasks[{j}].input", f"unknown sensor {name!r}")
        try:
            check_plan_shape(plan)
        except InvalidPlan as exc:
            raise ValidationError(f"{at}.plan", exc.reason) from None
        demos.append(Demonstration(request, plan))
    return PrefixSpec(tuple(sensors), tuple(tasks), tuple(demos))


def _settings(data: Any, where: str) -> Settings:
    data = _obj(data, where)
    base = Settings()
    uplink = data.get("fl_uplink", base.fl_uplink)
    if uplink not in ("sequential", "parallel"):
        raise ValidationError(f"{where}.fl_uplink", "expected 'sequential' or 'parallel'")
    lossy = _real(data, "lossy_ratio", where, default=base.lossy_ratio)
    if lossy <= 1:
        raise ValidationError(f"{where}.lossy_ratio", "must be > 1")
    return Settings(
        advisor_compute_s=_real(data, "advisor_compute_s", where, default=base.advisor_compute_s),
        request_bytes=_int(data, "request_bytes", where, 0) if "request_bytes" in data else base.request_bytes,
        reply_bytes=_int(data, "reply_bytes", where, 0) if "reply_bytes" in data else base.reply_bytes,
        fusion_s=_real(data, "fusion_s", where, default=base.fusion_s),
        lossy_ratio=lossy,
        fl_uplink=uplink,
    )


def _mixture(data: Any, where: str) -> MixtureSpec:
    data = _obj(data, where)
    base = MixtureSpec()
    ints = {}
    for key, minimum in (("n_train", 1), ("n_test", 1), ("n_features", 1), ("n_classes", 2),
                         ("clusters_per_class", 1), ("seed", 0)):
        ints[key] = _int(data, key, where, minimum) if key in data else getattr(base, key)
    return MixtureSpec(
        **ints,
        cluster_std=_real(data, "cluster_std", where, default=base.cluster_std),
        separation=_real(data, "separation", where, default=base.separation),
    )


def scenario_from_dict(data: Any) -> Scenario:
    """Validate a decoded scenario document and build the Scenario."""
    data = _obj(data, "scenario")
    sid = data.get("id", "scenario")
    if not isinstance(sid, str) or not sid:
        raise ValidationError("id", "expected a non-empty string")

    models = tuple(_manifest(m, f"models[{i}]") for i, m in enumerate(_list(data, "models", "")))
    devices = tuple(_device(d, f"devices[{i}]") for i, d in enumerate(_list(data, "devices", "")))
    for name, items in (("models", models), ("devices", devices)):
        seen = set()
        for i, item in enumerate(items):
            if item.id in seen:
                raise ValidationError(f"{name}[{i}].id", f"duplicate id {item.id!r}")
            seen.add(item.id)
    for tier in (Tier.CLIENT, Tier.EDGE):
        if not any(d.tier is tier for d in devices):
            raise ValidationError("devices", f"needs at least one {tier.value} device")

    if "links" not in data:
        raise ValidationError("links", "missing")
    raw_links = _obj(data["links"], "links")
    links = {}
    for name in LINK_NAMES:
        if name not in raw_links:
            raise ValidationError(f"links.{name}", "missing")
        links[name] = _link(raw_links[name], f"links.{name}")

    prefix = _prefix(data.get("planner_prefix", {}), "planner_prefix")
    fl = fl_config_from_dict(data["fl"], "fl") if data.get("fl") is not None else None
    fl_data = _mixture(data["fl_data"], "fl_data") if data.get("fl_data") is not None else None
    settings = _settings(data.get("settings", {}), "settings")
    return Scenario(sid, models, devices, Links(**links), prefix, fl, fl_data, settings)


def load_scenario(path: str | Path) -> Scenario:
    """Read and validate a scenario file."""
    path = Path(path)
    if not path.is_file():
        raise ScenarioFileNotFound(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError(1, "not UTF-8 text") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    return scenario_from_dict(data)


def scenario_to_dict(scenario: Scenario) -> dict:
    out: dict[str, Any] = {
        "id": scenario.id,
        "models": [
            {
                "id": m.id,
                "task_kind": m.task_kind,
                "param_count": m.param_count,
                "input_bytes": m.input_bytes,
                "layers": [{"flops": l.flops, "out_feature_bytes": l.out_feature_bytes} for l in m.layers],
            }
            for m in scenario.models
        ],
        "devices": [{"id": d.id, "tier": d.tier.value, "throughput": d.throughput} for d in scenario.devices],
        "links": {
            name: {"rate": link.rate, "propagation_delay": link.propagation_delay}
            for name in LINK_NAMES
            for link in [getattr(scenario.links, name)]
        },
        "planner_prefix": {
            "sensors": list(scenario.planner_prefix.sensors),
            "solvable_tasks": list(scenario.planner_prefix.solvable_tasks),
            "demonstrations": [
                {"request": d.request, "plan": plan_to_dict(d.plan)}
                for d in scenario.planner_prefix.demonstrations
            ],
        },
        "settings": dict(vars(scenario.settings)),
    }
    if scenario.fl is not None:
        out["fl"] = fl_config_to_dict(scenario.fl)
    if scenario.fl_data is not None:
        out["fl_data"] = dict(vars(scenario.fl_data))
    return out


def dumps_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), indent=2) + "\n"


def dump_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(scenario), encoding="utf-8")


def candidates_for(task_kind: str, scenario: Scenario) -> list[ModelManifest]:
    """Manifests serving ``task_kind``, sorted by id."""
    return sorted((m for m in scenario.models if m.task_kind == task_kind), key=lambda m: m.id)


def default_scenario() -> Scenario:
    return load_scenario(bundled_path("default_scenario.json"))

