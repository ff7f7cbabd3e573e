from __future__ import annotations

import json
import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from builders import build, default_dict
from edgeplan.advisor import PLAN, AdvisorReply, ScriptedAdvisor
from edgeplan.domain import Combine, Demonstration, PlanStep, PrefixSpec, TaskPlan
from edgeplan.errors import EmptyDataset, InvalidPlan, ParseError, ValidationError
from edgeplan.planner import (
    build_context,
    bundled_keyword_advisor,
    evaluate_planner,
    keyword_mock_advisor,
    load_dataset,
    load_keyword_rules,
    macro_f1,
    plan,
    resolve_plan,
)
from edgeplan.registry import bundled_path

CLASSES = ("image_classification", "image_captioning", "vqa")


def single(kind):
    return TaskPlan((PlanStep(kind),), Combine.SINGLE)


class OracleAdvisor:
    """Answers with the gold label of whichever request it is asked about."""

    def __init__(self, dataset):
        self.gold = {r: g for r, g in dataset}

    def ask(self, context, expect=PLAN):
        request = context.rsplit("### Request\n", 1)[1].strip()
        return AdvisorReply.for_plan(single(self.gold[request]))


class ConstantAdvisor:
    def __init__(self, kind):
        self.kind = kind

    def ask(self, context, expect=PLAN):
        return AdvisorReply.for_plan(single(self.kind))


class FixedPredictions:
    """Returns a preset prediction per request; None means the call fails."""

    def __init__(self, table):
        self.table = table

    def ask(self, context, expect=PLAN):
        request = context.rsplit("### Request\n", 1)[1].strip()
        kind = self.table[request]
        if kind is None:
            raise InvalidPlan("no plan")
        return AdvisorReply.for_plan(single(kind))


def test_context_without_demonstrations():
    prefix = PrefixSpec(("camera",), ("vqa",), ())
    text = build_context(prefix, "what is this?")
    assert "### Demonstrations" not in text and "### History" not in text
    assert text.index("### Sensors") < text.index("### Solvable tasks") < text.index("### Request")
    assert text.endswith("### Request\nwhat is this?\n")


def test_context_order_and_determinism(scenario):
    prefix = scenario.planner_prefix
    text = build_context(prefix, "REQ", ["first", "second"])
    d0, d1 = prefix.demonstrations
    positions = [text.index(d0.request), text.index(d1.request), text.index("- first"),
                 text.index("- second"), text.index("REQ")]
    assert positions == sorted(positions)
    assert build_context(prefix, "REQ", ["first", "second"]) == text


def test_caption_request_with_keyword_advisor(scenario):
    adv = keyword_mock_advisor([({"caption"}, single("image_captioning"))])
    p = plan("caption this photo", scenario, adv)
    assert p == TaskPlan((PlanStep("image_captioning", "blip-caption", "user_data"),), Combine.SINGLE)


def test_replace_request_gives_pose_sequence(scenario):
    adv = ScriptedAdvisor(['{"tasks": [{"task": "pose_detection"}, {"task": "pose_to_image"}], "combine": "sequence"}'])
    p = plan("replace the riding boy with a reading girl", scenario, adv)
    assert p.combine is Combine.SEQUENCE
    assert p.steps == (
        PlanStep("pose_detection", "openpose", "user_data"),
        PlanStep("pose_to_image", "controlnet", "previous_step"),
    )


def test_mood_request_gives_fused_sensor_plan(scenario):
    adv = ScriptedAdvisor(['{"tasks": [{"task": "mood_from_traffic", "input": "sensor:wifi"}, '
                           '{"task": "mood_from_physio", "input": "sensor:speaker"}], "combine": "fuse_outputs"}'])
    p = plan("monitor my emotions", scenario, adv)
    assert p.combine is Combine.FUSE_OUTPUTS
    assert [(s.task_kind, s.input_source) for s in p.steps] == [
        ("mood_from_traffic", "sensor:wifi"), ("mood_from_physio", "sensor:speaker")]


@pytest.mark.parametrize("reply", [
    '{"tasks": [{"task": "speech_to_text"}]}',                          # not solvable
    '{"tasks": [{"task": "vqa", "model": "vit-b16"}]}',                 # model serves another task
    '{"tasks": [{"task": "mood_from_traffic", "input": "sensor:radar"}]}',  # unknown sensor
    '{"tasks": [{"task": "vqa", "input": "previous_step"}]}',           # nothing to consume
    '{"tasks": [{"task": "vqa"}, {"task": "pose_to_image"}], "combine": "sequence"}',  # text cannot feed a pose input
])
def test_invalid_plans(scenario, reply):
    with pytest.raises(InvalidPlan):
        plan("req", scenario, ScriptedAdvisor([reply]))


def test_solvable_task_without_model():
    doc = default_dict()
    doc["planner_prefix"]["solvable_tasks"].append("speech_to_text")
    s = build(doc)
    with pytest.raises(InvalidPlan):
        resolve_plan(single("speech_to_text"), s)


def test_no_change_reply_is_not_a_plan(scenario):
    with pytest.raises(InvalidPlan):
        plan("req", scenario, ScriptedAdvisor(["NO_CHANGE"]))


@settings(max_examples=50)
@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz ?!", max_size=40), st.sampled_from([str.upper, str.lower, str.title]))
def test_keyword_plan_invariant_to_casing(text, case):
    s = build(default_dict())
    adv = bundled_keyword_advisor()
    request = "what color is " + text

    def outcome(r):
        try:
            return plan(r, s, adv)
        except InvalidPlan:
            return None

    assert outcome(case(request)) == outcome(request)


# -- evaluation harness -----------------------------------------------------


def dataset_26_25_31():
    return ([(f"classify item {i}", "image_classification") for i in range(26)]
            + [(f"caption item {i}", "image_captioning") for i in range(25)]
            + [(f"question item {i}?", "vqa") for i in range(31)])


def test_oracle_scores_perfectly(scenario):
    data = dataset_26_25_31()
    m = evaluate_planner(data, scenario, OracleAdvisor(data))
    assert (m.accuracy, m.macro_f1, m.n) == (1.0, 1.0, 82)
    assert m.mean_latency >= 0


def test_constant_vqa_accuracy(scenario):
    m = evaluate_planner(dataset_26_25_31(), scenario, ConstantAdvisor("vqa"))
    assert m.accuracy == 31 / 82
    # only vqa has nonzero F1: 2*31 / (2*31 + 51)
    assert m.macro_f1 == pytest.approx((62 / 113) / 3)


def test_hand_computed_confusion(scenario):
    data = [("a", "image_classification"), ("b", "image_classification"), ("c", "image_captioning"), ("d", "vqa")]
    preds = {"a": "image_classification", "b": "vqa", "c": "image_captioning", "d": "vqa"}
    m = evaluate_planner(data, scenario, FixedPredictions(preds))
    assert m.accuracy == 0.75
    # F1: classification 2/3, captioning 1, vqa 2/3
    assert m.macro_f1 == pytest.approx((2 / 3 + 1 + 2 / 3) / 3)


def test_failed_plans_count_as_wrong(scenario):
    data = [("a", "vqa"), ("b", "vqa")]
    m = evaluate_planner(data, scenario, FixedPredictions({"a": "vqa", "b": None}))
    assert m.accuracy == 0.5
    assert m.predictions == ("vqa", None)


def test_empty_dataset(scenario):
    with pytest.raises(EmptyDataset):
        evaluate_planner([], scenario, ConstantAdvisor("vqa"))


def test_strict_mode_scores_sequences(scenario):
    seq = '{"tasks": [{"task": "pose_detection"}, {"task": "pose_to_image"}], "combine": "sequence"}'
    adv = ScriptedAdvisor(lambda ctx: seq)
    data = [("r1", ("pose_detection", "pose_to_image")), ("r2", ("pose_detection",))]
    assert evaluate_planner(data, scenario, adv).accuracy == 1.0
    assert evaluate_planner(data, scenario, adv, strict=True).accuracy == 0.5


def test_concurrent_evaluation_matches_serial(scenario):
    data = dataset_26_25_31()
    lock = threading.Lock()
    seen = []

    class Recording(OracleAdvisor):
        def ask(self, context, expect=PLAN):
            with lock:
                seen.append(context)
            return super().ask(context, expect)

    serial = evaluate_planner(data, scenario, ConstantAdvisor("image_captioning"))
    parallel = evaluate_planner(data, scenario, ConstantAdvisor("image_captioning"), max_workers=8)
    assert (serial.accuracy, serial.macro_f1, serial.predictions) == (
        parallel.accuracy, parallel.macro_f1, parallel.predictions)
    assert evaluate_planner(data, scenario, Recording(data), max_workers=4).accuracy == 1.0
    assert len(seen) == 82


def brute_force(gold, pred):
    labels = sorted(set(gold))
    acc = sum(g == p for g, p in zip(gold, pred)) / len(gold)
    f1s = []
    for c in labels:
        tp = fp = fn = 0
        for g, p in zip(gold, pred):
            tp += g == c and p == c
            fp += g != c and p == c
            fn += g == c and p != c
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return acc, sum(f1s) / len(f1s)


def test_metrics_match_brute_force_100(scenario):
    rng = random.Random(5)
    for _ in range(100):
        n = rng.randint(1, 40)
        gold = [rng.choice(CLASSES) for _ in range(n)]
        pred = [rng.choice(CLASSES + (None,)) for _ in range(n)]
        data = [(f"req {i}", g) for i, g in enumerate(gold)]
        m = evaluate_planner(data, scenario, FixedPredictions({f"req {i}": p for i, p in enumerate(pred)}))
        acc, f1 = brute_force(gold, pred)
        assert m.accuracy == acc
        assert m.macro_f1 == pytest.approx(f1, abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from(CLASSES), st.sampled_from(CLASSES)), min_size=1, max_size=30))
def test_macro_f1_range_and_diagonal(pairs):
    gold, pred = zip(*pairs)
    f1 = macro_f1(gold, pred)
    assert 0.0 <= f1 <= 1.0
    assert (f1 == 1.0) == all(g == p for g, p in pairs)


def test_bundled_dataset_shape():
    data = load_dataset(bundled_path("planner_requests.jsonl"))
    assert len(data) == 60
    counts = {c: sum(1 for _, g in data if g == c) for c in CLASSES}
    assert counts == {c: 20 for c in CLASSES}
    assert len({r for r, _ in data}) == 60


def test_dataset_loader_errors(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"request": "a", "label": "vqa"}\n{oops\n', encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.line == 2
    path.write_text('{"request": "a", "label": "Not Valid"}\n', encoding="utf-8")
    with pytest.raises(ValidationError):
        load_dataset(path)
    path.write_text('# comment\n\n{"request": "a", "label": ["pose_detection", "pose_to_image"]}\n', encoding="utf-8")
    assert load_dataset(path) == [("a", ("pose_detection", "pose_to_image"))]


def test_rules_loader(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps([{"keywords": ["photo"], "plan": {"tasks": [{"task": "vqa"}]}}]), encoding="utf-8")
    [(keywords, p)] = load_keyword_rules(path)
    assert keywords == ["photo"] and p == single("vqa")
    path.write_text('{"keywords": []}', encoding="utf-8")
    with pytest.raises(ValidationError):
        load_keyword_rules(path)


def test_demonstrations_shape_of_default(scenario):
    demos = scenario.planner_prefix.demonstrations
    assert all(isinstance(d, Demonstration) for d in demos)
    assert [d.plan.combine for d in demos] == [Combine.SEQUENCE, Combine.FUSE_OUTPUTS]
