from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from builders import build, default_dict, minimal_dict
from edgeplan.domain import Tier
from edgeplan.errors import ParseError, ScenarioFileNotFound, ValidationError
from edgeplan.registry import (
    candidates_for,
    dump_scenario,
    dumps_scenario,
    load_scenario,
    parse_quantity,
    scenario_from_dict,
    scenario_to_dict,
)


def write(tmp_path, doc, name="s.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


def test_minimal_file_loads(tmp_path):
    s = load_scenario(write(tmp_path, minimal_dict()))
    assert len(s.models) == 1
    assert len(s.devices) == 2
    assert s.models[0].n_layers == 1
    assert s.fl is None


def test_missing_uplink_is_reported_by_field(tmp_path):
    doc = minimal_dict()
    del doc["links"]["client_edge_up"]
    with pytest.raises(ValidationError) as info:
        load_scenario(write(tmp_path, doc))
    assert (info.value.field, info.value.reason) == ("links.client_edge_up", "missing")


def test_default_scenario_values(scenario):
    assert scenario.links.client_edge_up.rate == 250_000
    assert scenario.links.client_edge_down.rate == 500_000
    fl = scenario.fl
    assert (fl.n_clients, fl.local_epochs, fl.global_rounds, fl.batch_size) == (10, 10, 30, 100)
    assert {d.tier for d in scenario.devices} == {Tier.CLIENT, Tier.EDGE, Tier.CLOUD}


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioFileNotFound):
        load_scenario(tmp_path / "nope.json")


def test_parse_error_carries_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "id": "x",\n  "models": [,]\n}\n', encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_scenario(path)
    assert info.value.line == 3


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d["devices"].pop(0), "devices"),
    (lambda d: d["devices"].append(dict(d["devices"][0])), "devices[2].id"),
    (lambda d: d["models"][0]["layers"].clear(), "models[0].layers"),
    (lambda d: d["models"][0]["layers"][0].update(flops=0), "models[0].layers[0].flops"),
    (lambda d: d["links"]["client_edge_down"].update(rate=0), "links.client_edge_down.rate"),
    (lambda d: d["links"]["edge_cloud_up"].update(propagation_delay=-1), "links.edge_cloud_up.propagation_delay"),
    (lambda d: d["devices"][0].update(tier="fog"), "devices[0].tier"),
    (lambda d: d["models"][0].update(task_kind="Not A Kind"), "models[0].task_kind"),
])
def test_validation_errors(mutate, field):
    doc = minimal_dict()
    mutate(doc)
    with pytest.raises(ValidationError) as info:
        scenario_from_dict(doc)
    assert info.value.field == field


def test_demonstration_must_use_solvable_tasks():
    doc = minimal_dict(planner_prefix={
        "sensors": [],
        "solvable_tasks": ["vqa"],
        "demonstrations": [{"request": "r", "plan": {"tasks": [{"task": "image_captioning"}]}}],
    })
    with pytest.raises(ValidationError) as info:
        scenario_from_dict(doc)
    assert info.value.field == "planner_prefix.demonstrations[0].plan.tasks[0].task"


def test_demonstration_sensor_must_exist():
    doc = minimal_dict(planner_prefix={
        "sensors": ["camera"],
        "solvable_tasks": ["mood_from_traffic"],
        "demonstrations": [{"request": "r", "plan": {"tasks": [{"task": "mood_from_traffic", "input": "sensor:wifi"}]}}],
    })
    with pytest.raises(ValidationError):
        scenario_from_dict(doc)


@pytest.mark.parametrize("text, value", [
    ("250 KB/s", 250_000.0),
    ("250KB/s", 250_000.0),
    ("250k", 250_000.0),
    ("1.5 MB", 1_500_000.0),
    ("2 KiB", 2048.0),
    (" 12 ", 12.0),
    (7, 7.0),
    (2.5, 2.5),
])
def test_parse_quantity(text, value):
    assert parse_quantity(text, "x") == value


@pytest.mark.parametrize("bad", ["fast", "10 parsecs", True, None, [1]])
def test_parse_quantity_rejects(bad):
    with pytest.raises(ValidationError):
        parse_quantity(bad, "x")


def test_unit_strings_in_file(tmp_path):
    doc = minimal_dict()
    doc["links"]["client_edge_up"]["rate"] = "250 KB/s"
    assert load_scenario(write(tmp_path, doc)).links.client_edge_up.rate == 250_000


def test_custom_task_kind_is_accepted():
    doc = minimal_dict()
    doc["models"][0]["task_kind"] = "speech_to_text"
    s = scenario_from_dict(doc)
    assert [m.id for m in candidates_for("speech_to_text", s)] == ["m"]


def test_candidates_for(scenario):
    assert [m.id for m in candidates_for("image_classification", scenario)] == ["vit-b16"]
    assert candidates_for("no_such_task", scenario) == []


def test_candidates_sorted_by_id():
    doc = minimal_dict()
    layer = [{"flops": 1, "out_feature_bytes": 1}]
    doc["models"] = [
        {"id": "b", "task_kind": "image_captioning", "param_count": 1, "input_bytes": 1, "layers": layer},
        {"id": "a", "task_kind": "image_captioning", "param_count": 1, "input_bytes": 1, "layers": layer},
    ]
    assert [m.id for m in candidates_for("image_captioning", build(doc))] == ["a", "b"]


def test_round_trip_default(tmp_path, scenario):
    path = tmp_path / "again.json"
    dump_scenario(scenario, path)
    assert load_scenario(path) == scenario
    assert dumps_scenario(load_scenario(path)) == dumps_scenario(scenario)


def test_identical_bytes_identical_scenario(tmp_path):
    doc = default_dict()
    assert load_scenario(write(tmp_path, doc, "a.json")) == load_scenario(write(tmp_path, doc, "b.json"))


KINDS = ["image_classification", "image_captioning", "vqa", "custom_kind"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(KINDS), st.integers(1, 5)), min_size=1, max_size=8, unique_by=lambda t: t),
       st.sampled_from(KINDS + ["absent"]))
def test_candidates_match_brute_force(entries, kind):
    doc = minimal_dict()
    doc["models"] = [
        {"id": f"{k}-{n}", "task_kind": k, "param_count": 1, "input_bytes": 1,
         "layers": [{"flops": n, "out_feature_bytes": 1}]}
        for k, n in entries
    ]
    s = build(doc)
    expected = sorted((m for m in s.models if m.task_kind == kind), key=lambda m: m.id)
    assert candidates_for(kind, s) == expected
    assert scenario_from_dict(scenario_to_dict(s)) == s
