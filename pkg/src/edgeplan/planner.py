"""Request -> TaskPlan planning through an advisor, and the planner evaluation harness."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .advisor import PLAN, REQUEST_MARKER, Advisor, KeywordAdvisor, ask
from .domain import (
    PREVIOUS_STEP,
    USER_DATA,
    Combine,
    PlanStep,
    PrefixSpec,
    Scenario,
    TaskPlan,
    check_plan_shape,
    is_task_kind,
    plan_from_dict,
    plan_to_dict,
    sensor_name,
)
from .errors import AdvisorError, EmptyDataset, InvalidPlan, ParseError, ValidationError
from .registry import bundled_path, candidates_for

REPLY_INSTRUCTIONS = (
    'Answer with one JSON object {"tasks": [{"task": <task>, "model": <optional model id>, '
    '"input": <optional "user_data" | "previous_step" | "sensor:<name>">}], '
    '"combine": "single" | "sequence" | "fuse_outputs"}.'
)


def build_context(prefix: PrefixSpec, request: str, history: Sequence[str] = ()) -> str:
    """Advisor context: prefix, demonstrations in order, history oldest first, then the request."""
    lines = [
        "### Sensors",
        ", ".join(prefix.sensors) if prefix.sensors else "(none)",
        "### Solvable tasks",
        ", ".join(prefix.solvable_tasks) if prefix.solvable_tasks else "(none)",
        "### Reply format",
        REPLY_INSTRUCTIONS,
    ]
    if prefix.demonstrations:
        lines.append("### Demonstrations")
        for demo in prefix.demonstrations:
            lines.append(f"Request: {demo.request}")
            lines.append(f"Plan: {json.dumps(plan_to_dict(demo.plan))}")
    if history:
        lines.append("### History")
        lines.extend(f"- {h}" for h in history)
    lines.append(REQUEST_MARKER)
    lines.append(request)
    return "\n".join(lines) + "\n"


def resolve_plan(draft: TaskPlan, scenario: Scenario) -> TaskPlan:
    """Fill in model ids and input sources, checking everything against the scenario."""
    prefix = scenario.planner_prefix
    steps = []
    for i, step in enumerate(draft.steps):
        if step.task_kind not in prefix.solvable_tasks:
            raise InvalidPlan(f"step {i}: task {step.task_kind!r} is not solvable here")
        candidates = candidates_for(step.task_kind, scenario)
        if step.model_id is None:
            if not candidates:
                raise InvalidPlan(f"step {i}: no model serves {step.task_kind!r}")
            model_id = candidates[0].id
        elif any(m.id == step.model_id for m in candidates):
            model_id = step.model_id
        else:
            raise InvalidPlan(f"step {i}: model {step.model_id!r} does not serve {step.task_kind!r}")
        source = step.input_source
        if source is None:
            source = PREVIOUS_STEP if draft.combine is Combine.SEQUENCE and i > 0 else USER_DATA
        name = sensor_name(source)
        if name is not None and name not in prefix.sensors:
            raise InvalidPlan(f"step {i}: unknown sensor {name!r}")
        if source == PREVIOUS_STEP and (i == 0 or draft.combine is not Combine.SEQUENCE):
            raise InvalidPlan(f"step {i}: no previous step to consume")
        steps.append(PlanStep(step.task_kind, model_id, source))
    resolved = TaskPlan(tuple(steps), draft.combine)
    check_plan_shape(resolved)
    return resolved


def plan(request: str, scenario: Scenario, advisor: Advisor, history: Sequence[str] = ()) -> TaskPlan:
    context = build_context(scenario.planner_prefix, request, history)
    reply = ask(advisor, context, PLAN)
    if reply.kind != PLAN:
        raise InvalidPlan("advisor returned no plan")
    return resolve_plan(reply.plan, scenario)


def keyword_mock_advisor(rules: Iterable[tuple[Iterable[str], TaskPlan]]) -> KeywordAdvisor:
    """Deterministic keyword advisor; earlier rules take precedence."""
    compiled = tuple((frozenset(k.lower() for k in keywords), p) for keywords, p in rules)
    if not compiled:
        raise ValueError("at least one rule is required")
    for keywords, _ in compiled:
        if not keywords:
            raise ValueError("every rule needs at least one keyword")
    return KeywordAdvisor(compiled)


def load_keyword_rules(path: str | Path) -> list[tuple[list[str], TaskPlan]]:
    """Rules file: JSON list of {"keywords": [...], "plan": <plan object>}."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    if not isinstance(data, list):
        raise ValidationError("rules", "expected a list")
    rules = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or not isinstance(item.get("keywords"), list):
            raise ValidationError(f"rules[{i}].keywords", "expected a list of strings")
        rules.append((item["keywords"], plan_from_dict(item.get("plan"), f"rules[{i}].plan")))
    return rules


def bundled_keyword_advisor() -> KeywordAdvisor:
    return keyword_mock_advisor(load_keyword_rules(bundled_path("keyword_rules.json")))


# -- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class PlannerMetrics:
    accuracy: float
    macro_f1: float
    mean_latency: float
    n: int = 0
    predictions: tuple = field(default=(), compare=False, repr=False)


def load_dataset(path: str | Path) -> list[tuple[str, str | tuple[str, ...]]]:
    """JSON-lines file, one ``{"request": ..., "label": ...}`` per line.

    ``label`` is a task kind, or a list of task kinds for multi-step gold plans.
    Blank lines and lines starting with ``#`` are skipped.
    """
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            item = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, exc.msg) from None
        if not isinstance(item, dict) or not isinstance(item.get("request"), str):
            raise ValidationError(f"line {lineno}.request", "expected a string")
        label = item.get("label")
        if isinstance(label, list) and label and all(is_task_kind(k) for k in label):
            label = tuple(label)
        elif not is_task_kind(label):
            raise ValidationError(f"line {lineno}.label", "expected a task kind or list of task kinds")
        records.append((item["request"], label))
    return records


def macro_f1(gold: Sequence[Hashable], predicted: Sequence[Hashable]) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``gold``."""
    classes = sorted(set(gold), key=repr)
    scores = []
    for c in classes:
        tp = sum(1 for g, p in zip(gold, predicted) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, predicted) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, predicted) if g == c and p != c)
        scores.append(2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


def _gold_key(label, strict: bool):
    if strict:
        return label if isinstance(label, tuple) else (label,)
    return label[0] if isinstance(label, tuple) else label


def evaluate_planner(
    dataset: Sequence[tuple[str, str | tuple[str, ...]]],
    scenario: Scenario,
    advisor: Advisor,
    strict: bool = False,
    max_workers: int = 1,
    clock=time.perf_counter,
) -> PlannerMetrics:
    """Accuracy, macro-F1 and mean plan() wall time over a labeled request set.

    Non-strict mode scores the first step's task kind; strict mode requires the
    whole step sequence to match. A failed plan() is a wrong prediction.
    """
    if not dataset:
        raise EmptyDataset("dataset is empty")

    def one(request: str):
        start = clock()
        try:
            result = plan(request, scenario, advisor)
        except AdvisorError:
            result = None
        elapsed = clock() - start
        if result is None:
            return None, elapsed
        return (result.task_kinds if strict else result.task_kinds[0]), elapsed

    requests = [r for r, _ in dataset]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(one, requests))
    else:
        outcomes = [one(r) for r in requests]

    gold = [_gold_key(label, strict) for _, label in dataset]
    predicted = [p for p, _ in outcomes]
    correct = sum(1 for g, p in zip(gold, predicted) if g == p)
    return PlannerMetrics(
        accuracy=correct / len(gold),
        macro_f1=macro_f1(gold, predicted),
        mean_latency=sum(t for _, t in outcomes) / len(outcomes),
        n=len(gold),
        predictions=tuple(predicted),
    )
