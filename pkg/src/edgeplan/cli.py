"""Command-line scenario runner.

Every subcommand accepts ``--scenario``, ``--seed`` and ``--out``. With
``--out`` the tabular result is written as CSV next to a ``manifest.json``
describing the run; identical flags give byte-identical files.

Exit codes: 0 success, 2 usage error, 3 scenario or input validation,
4 advisor failure, 5 internal invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .advisor import RemoteAdvisor, ScriptedAdvisor
from .codec import SyntheticTask, make_grid, tradeoff_sweep
from .domain import (
    Combine,
    FLConfig,
    MixtureSpec,
    PlanStep,
    Scenario,
    TaskPlan,
    apply_patch,
    fl_config_to_dict,
    normalize_patch,
    plan_to_dict,
)
from .errors import AdvisorError, EdgePlanError, InvariantError, UnresolvableStep, ValidationError
from .fedsim import make_mixture, run_fl, storyline_advisor, trial_loop
from .offload import (
    ClientOnly,
    EdgeOnlyLossless,
    LatencyBreakdown,
    best_partition,
    latency_sweep,
    parse_scheme,
    planning_latency,
    scheme_latency,
)
from .planner import bundled_keyword_advisor, evaluate_planner, keyword_mock_advisor, load_dataset, load_keyword_rules, plan
from .registry import bundled_path, load_scenario, parse_quantity

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCENARIO = 3
EXIT_ADVISOR = 4
EXIT_INVARIANT = 5

LATENCY_HEADER = ("rate_bps", "scheme", "planning_s", "upload_s", "client_s", "edge_s", "cloud_s", "download_s", "total_s")
CODEC_HEADER = ("beta", "kept_dims", "n_bins", "rate_bits", "task_loss")
CURVE_HEADER = ("round", "accuracy", "wallclock_s")
TRIALS_HEADER = ("trial", "final_accuracy", "wallclock_s", "config")
PREDICTIONS_HEADER = ("request", "gold", "predicted", "correct")
PLAN_HEADER = ("step", "task", "model", "input")
DEMO_HEADER = ("step", "task", "model", "scheme", "split", "upload_s", "client_s", "edge_s", "cloud_s", "download_s", "step_s")

DEFAULT_SCHEMES = "client,edge,edge-lossy,co,cloud"
DEFAULT_RATES = "100k:500k:50k"
DEFAULT_BETAS = "geom:1e-4:0.1:20"
DEFAULT_GRID = "kept=1,2,4,8,16,32,64;bins=2,4,8,16,32"


@dataclass
class RunReport:
    scenario_id: str
    seed: int
    command: str
    rows: list[dict] = field(default_factory=list)
    exit_code: int = EXIT_OK


# -- end-to-end latency of a plan -------------------------------------------


@dataclass(frozen=True)
class StepLatency:
    step: PlanStep
    scheme: str
    split: int | None
    latency: LatencyBreakdown  # planning excluded


@dataclass(frozen=True)
class EndToEndLatency:
    steps: tuple[StepLatency, ...]
    combine: Combine
    planning: float
    fusion: float
    total: float


def _check_breakdown(latency: LatencyBreakdown) -> None:
    parts = latency.parts()
    if not all(math.isfinite(p) and p >= 0 for p in parts) or not math.isfinite(latency.total):
        raise InvariantError(f"latency parts must be finite and non-negative: {latency}")


def emit_end_to_end(plan_: TaskPlan, scenario: Scenario) -> EndToEndLatency:
    """Cheapest scheme per step, composed by the plan's combine mode.

    Each step runs under the fastest of the best co-inference split,
    client-only and edge-only. Sequence steps add up; fused steps run in
    parallel, so the slowest one counts, plus the fusion constant. Planning
    is charged once for the whole plan.
    """
    steps = []
    for i, step in enumerate(plan_.steps):
        if step.model_id is None:
            raise UnresolvableStep(f"step {i}: no model assigned")
        try:
            manifest = scenario.model(step.model_id)
        except KeyError:
            raise UnresolvableStep(f"step {i}: model {step.model_id!r} is not in the scenario") from None
        decision = best_partition(manifest, scenario)
        options = [
            (decision.latency.without_planning(), f"co_inference@{decision.split}", decision.split),
            (scheme_latency(manifest, ClientOnly(), scenario).without_planning(), ClientOnly.label, None),
            (scheme_latency(manifest, EdgeOnlyLossless(), scenario).without_planning(), EdgeOnlyLossless.label, None),
        ]
        # min is stable, so ties keep the co-inference option
        latency, label, split = min(options, key=lambda o: o[0].total)
        _check_breakdown(latency)
        steps.append(StepLatency(step, label, split, latency))

    planning = planning_latency(scenario)
    if plan_.combine is Combine.FUSE_OUTPUTS:
        fusion = scenario.settings.fusion_s
        body = max(s.latency.total for s in steps) + fusion
    else:
        fusion = 0.0
        body = 0.0
        for s in steps:
            body += s.latency.total
    return EndToEndLatency(tuple(steps), plan_.combine, planning, fusion, planning + body)


# -- argument parsing helpers ----------------------------------------------


def parse_rates(text: str) -> list[float]:
    """``start:stop:step`` (inclusive, unit suffixes allowed) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"rate range must be start:stop:step, got {text!r}")
        start, stop, step = (parse_quantity(p, "--rates") for p in parts)
        if step <= 0 or stop < start:
            raise ValueError("rate range needs step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(n)]
    return [parse_quantity(p, "--rates") for p in text.split(",") if p.strip()]


def parse_betas(text: str) -> list[float]:
    """``geom:lo:hi:n``, ``lin:lo:hi:n`` or a comma list."""
    kind, _, rest = text.partition(":")
    if kind in ("geom", "lin"):
        lo, hi, n = rest.split(":")
        fn = np.geomspace if kind == "geom" else np.linspace
        return [float(b) for b in fn(float(lo), float(hi), int(n))]
    return [float(b) for b in text.split(",") if b.strip()]


def parse_grid(text: str):
    """``kept=1,2,4;bins=2,4,8[;clip=-3,3]``."""
    fields = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, sep, values = part.partition("=")
        if not sep:
            raise ValueError(f"grid part {part!r} lacks '='")
        fields[key.strip()] = [v for v in values.split(",") if v.strip()]
    unknown = set(fields) - {"kept", "bins", "clip"}
    if unknown or "kept" not in fields or "bins" not in fields:
        raise ValueError("grid spec needs kept=... and bins=... (optionally clip=lo,hi)")
    clip = tuple(float(v) for v in fields.get("clip", ["-3", "3"]))
    if len(clip) != 2:
        raise ValueError("clip takes two values")
    return make_grid([int(v) for v in fields["kept"]], [int(v) for v in fields["bins"]], clip)


def parse_mix(text: str, scenario: Scenario) -> list[tuple[Any, float]]:
    mix = []
    for part in text.split(","):
        model_id, sep, weight = part.partition("=")
        if not sep:
            raise ValueError(f"mix entry {part!r} must be model=weight")
        mix.append((_model(scenario, model_id.strip()), float(weight)))
    return mix


def _model(scenario: Scenario, model_id: str):
    try:
        return scenario.model(model_id)
    except KeyError:
        raise ValidationError("--model", f"unknown model {model_id!r}") from None


def _load_json_arg(text: str, where: str) -> Any:
    """Inline JSON, or ``@path`` to read it from a file."""
    raw = Path(text[1:]).read_text(encoding="utf-8") if text.startswith("@") else text
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValidationError(where, f"invalid JSON: {exc.msg}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file (default: bundled scenario)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="directory for CSV outputs and the run manifest")

    remote = _Parser(add_help=False)
    remote.add_argument("--endpoint", help="base URL of a chat-completion API (remote advisor)")
    remote.add_argument("--model-name", default="gpt-3.5-turbo", help="model name sent to the remote advisor")
    remote.add_argument("--timeout", type=float, default=30.0)
    remote.add_argument("--rules", help="keyword rules JSON for the mock advisor")

    parser = _Parser(prog="edgeplan", description="Cloud-edge-client orchestration simulator.")
    parser.add_argument("--version", action="version", version=f"edgeplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", parents=[common, remote], help="turn a request into a task plan")
    p.add_argument("--request", required=True)
    p.add_argument("--advisor", choices=("mock", "remote"), default="mock")

    p = sub.add_parser("eval-planner", parents=[common, remote], help="score a planner on a labeled request set")
    p.add_argument("--dataset", help="JSON-lines request set (default: bundled synthetic set)")
    p.add_argument("--advisor", choices=("mock", "remote"), default="mock")
    p.add_argument("--strict", action="store_true", help="score the whole step sequence")
    p.add_argument("--workers", type=int, default=1, help="concurrent plan() calls")

    p = sub.add_parser("infer-latency", parents=[common], help="latency of execution schemes versus uplink rate")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", help="model id from the scenario")
    group.add_argument("--mix", help="request mix, e.g. vit-b16=0.1,blip-caption=0.4,blip-vqa=0.5")
    p.add_argument("--schemes", default=DEFAULT_SCHEMES, help="client, edge, edge-lossy[:r], co[:split], cloud")
    p.add_argument("--rates", default=DEFAULT_RATES, help="client-edge uplink rates in bytes/s")

    p = sub.add_parser("codec-sweep", parents=[common], help="Lagrangian rate/task-loss sweep")
    p.add_argument("--betas", default=DEFAULT_BETAS)
    p.add_argument("--grid-spec", default=DEFAULT_GRID)
    p.add_argument("--relevance", choices=("structure", "mi"), default="structure")

    p = sub.add_parser("fl-run", parents=[common], help="one federated training run")
    p.add_argument("--config-overrides", help="patch object as JSON, or @file")

    p = sub.add_parser("fl-auto", parents=[common, remote], help="advisor-driven FL configuration trials")
    p.add_argument("--advisor", choices=("scripted", "remote"), default="scripted")
    p.add_argument("--script", help="JSON list of raw advisor replies (default: bundled storyline)")
    p.add_argument("--max-trials", type=int, default=5)
    p.add_argument("--target-acc", type=float)

    p = sub.add_parser("demo", parents=[common, remote], help="plan a request and report its end-to-end latency")
    p.add_argument("--request", default="Caption this photo of my dog.")
    p.add_argument("--advisor", choices=("mock", "remote"), default="mock")
    return parser


# -- output -----------------------------------------------------------------


def _fmt(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def _csv_text(header: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class _Outputs:
    """Collects output files; written only when --out is given."""

    def __init__(self):
        self.files: dict[str, str] = {}

    def csv(self, name: str, header: Sequence[str], rows: Sequence[dict]) -> None:
        self.files[name] = _csv_text(header, rows)

    def json(self, name: str, obj: Any) -> None:
        self.files[name] = _json_text(obj)

    def write(self, out_dir: Path, manifest: dict) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = dict(manifest)
        manifest["outputs"] = {
            name: hashlib.sha256(text.encode("utf-8")).hexdigest() for name, text in sorted(self.files.items())
        }
        for name, text in sorted(self.files.items()):
            (out_dir / name).write_text(text, encoding="utf-8", newline="\n")
        (out_dir / "manifest.json").write_text(_json_text(manifest), encoding="utf-8", newline="\n")


def _strip_out(argv: Sequence[str]) -> list[str]:
    """argv without --out, so the manifest does not depend on the output location."""
    kept, skip = [], False
    for arg in argv:
        if skip:
            skip = False
        elif arg == "--out":
            skip = True
        elif not arg.startswith("--out="):
            kept.append(arg)
    return kept


# -- subcommands ------------------------------------------------------------


def _plan_advisor(args):
    if args.advisor == "remote":
        return _remote(args)
    if args.rules:
        return keyword_mock_advisor(load_keyword_rules(args.rules))
    return bundled_keyword_advisor()


def _remote(args) -> RemoteAdvisor:
    if not args.endpoint:
        raise _UsageError("--endpoint is required with --advisor remote")
    return RemoteAdvisor(args.endpoint, args.model_name, timeout=args.timeout)


def _plan_rows(p: TaskPlan) -> list[dict]:
    return [
        {"step": i, "task": s.task_kind, "model": s.model_id, "input": s.input_source}
        for i, s in enumerate(p.steps)
    ]


def _cmd_plan(args, scenario, out, say) -> list[dict]:
    result = plan(args.request, scenario, _plan_advisor(args))
    out.json("plan.json", plan_to_dict(result))
    rows = _plan_rows(result)
    out.csv("plan.csv", PLAN_HEADER, rows)
    say(json.dumps(plan_to_dict(result)))
    return rows


def _cmd_eval_planner(args, scenario, out, say) -> list[dict]:
    dataset = load_dataset(args.dataset or bundled_path("planner_requests.jsonl"))
    if args.workers < 1:
        raise ValueError("--workers must be >= 1")
    metrics = evaluate_planner(dataset, scenario, _plan_advisor(args), strict=args.strict, max_workers=args.workers)

    def show(label):
        if isinstance(label, tuple):
            return "+".join(label)
        return "" if label is None else label

    rows = []
    for (request, gold), predicted in zip(dataset, metrics.predictions):
        gold_key = (gold if isinstance(gold, tuple) else (gold,)) if args.strict else (
            gold[0] if isinstance(gold, tuple) else gold)
        rows.append({
            "request": request,
            "gold": show(gold_key),
            "predicted": show(predicted),
            "correct": int(gold_key == predicted),
        })
    out.csv("predictions.csv", PREDICTIONS_HEADER, rows)
    # wall-clock latency varies run to run, so it is reported on stdout only
    out.json("metrics.json", {"accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1, "n": metrics.n})
    say(f"accuracy={metrics.accuracy:.4f} macro_f1={metrics.macro_f1:.4f} n={metrics.n} "
        f"mean_latency_s={metrics.mean_latency:.6f}")
    return rows


def _cmd_infer_latency(args, scenario, out, say) -> list[dict]:
    target = _model(scenario, args.model) if args.model else parse_mix(args.mix, scenario)
    schemes = [parse_scheme(s, scenario) for s in args.schemes.split(",") if s.strip()]
    if not schemes:
        raise ValueError("no schemes given")
    rates = parse_rates(args.rates)
    sweep = latency_sweep(target, scenario, schemes, rates)
    if len(sweep) != len(rates) * len(schemes):
        raise InvariantError("sweep row count differs from rates x schemes")
    rows = []
    for r in sweep:
        _check_breakdown(r.latency)
        rows.append({
            "rate_bps": r.rate,
            "scheme": r.scheme,
            "planning_s": r.latency.planning,
            "upload_s": r.latency.upload,
            "client_s": r.latency.client_compute,
            "edge_s": r.latency.edge_compute,
            "cloud_s": r.latency.cloud_compute,
            "download_s": r.latency.download,
            "total_s": r.latency.total,
        })
    out.csv("latency.csv", LATENCY_HEADER, rows)
    for row in rows:
        say(f"{row['rate_bps']:>10.0f} B/s  {row['scheme']:<20} {row['total_s']:.4f} s")
    return rows


def _cmd_codec_sweep(args, scenario, out, say) -> list[dict]:
    task = SyntheticTask(seed=args.seed, relevance_source=args.relevance)
    points = tradeoff_sweep(task, parse_betas(args.betas), parse_grid(args.grid_spec))
    rows = [
        {"beta": p.beta, "kept_dims": p.config.kept_dims, "n_bins": p.config.n_bins,
         "rate_bits": p.rate_bits, "task_loss": p.task_loss}
        for p in points
    ]
    out.csv("codec.csv", CODEC_HEADER, rows)
    for row in rows:
        say(f"beta={row['beta']:.3g} kept={row['kept_dims']} bins={row['n_bins']} "
            f"rate={row['rate_bits']:.2f} bits loss={row['task_loss']:.4f}")
    return rows


def _fl_inputs(scenario: Scenario):
    cfg = scenario.fl or FLConfig()
    data = make_mixture(scenario.fl_data or MixtureSpec())
    return cfg, data


def _curve_rows(curve) -> list[dict]:
    return [{"round": p.round, "accuracy": p.accuracy, "wallclock_s": p.wallclock_s} for p in curve]


def _cmd_fl_run(args, scenario, out, say) -> list[dict]:
    cfg, data = _fl_inputs(scenario)
    if args.config_overrides:
        patch = _load_json_arg(args.config_overrides, "--config-overrides")
        if not isinstance(patch, dict):
            raise ValidationError("--config-overrides", "expected a JSON object")
        cfg = apply_patch(cfg, normalize_patch(patch, "--config-overrides"))
    rows = _curve_rows(run_fl(cfg, data, scenario, seed=args.seed))
    out.csv("fl_curve.csv", CURVE_HEADER, rows)
    out.json("fl_config.json", fl_config_to_dict(cfg))
    last = rows[-1]
    say(f"rounds={last['round']} final_accuracy={last['accuracy']:.4f} wallclock_s={last['wallclock_s']:.3f}")
    return rows


def _cmd_fl_auto(args, scenario, out, say) -> list[dict]:
    cfg, data = _fl_inputs(scenario)
    if args.advisor == "remote":
        advisor = _remote(args)
    elif args.script:
        replies = _load_json_arg("@" + args.script, "--script")
        if not isinstance(replies, list) or not all(isinstance(r, str) for r in replies):
            raise ValidationError("--script", "expected a JSON list of strings")
        advisor = ScriptedAdvisor(replies)
    else:
        advisor = storyline_advisor()
    records = trial_loop(advisor, cfg, data, scenario, args.max_trials, args.target_acc, seed=args.seed)
    rows = []
    for rec in records:
        out.csv(f"trial_{rec.trial_index}.csv", CURVE_HEADER, _curve_rows(rec.accuracy_curve))
        rows.append({
            "trial": rec.trial_index,
            "final_accuracy": rec.final_accuracy,
            "wallclock_s": rec.accuracy_curve[-1].wallclock_s,
            "config": json.dumps(fl_config_to_dict(rec.config), sort_keys=True),
        })
        say(f"trial {rec.trial_index}: final_accuracy={rec.final_accuracy:.4f}")
    out.csv("trials.csv", TRIALS_HEADER, rows)
    out.json("trials.json", [
        {"trial": rec.trial_index, "config": fl_config_to_dict(rec.config), "advisor_raw": rec.advisor_raw,
         "final_accuracy": rec.final_accuracy}
        for rec in records
    ])
    return rows


def _breakdown_dict(latency: LatencyBreakdown) -> dict:
    return {name: getattr(latency, name) for name in (*LatencyBreakdown.PARTS, "total")}


def _cmd_demo(args, scenario, out, say) -> list[dict]:
    result = plan(args.request, scenario, _plan_advisor(args))
    e2e = emit_end_to_end(result, scenario)
    rows = []
    say(f"plan: {json.dumps(plan_to_dict(result))}")
    for i, s in enumerate(e2e.steps):
        lat = s.latency
        rows.append({
            "step": i, "task": s.step.task_kind, "model": s.step.model_id, "scheme": s.scheme,
            "split": "" if s.split is None else s.split,
            "upload_s": lat.upload, "client_s": lat.client_compute, "edge_s": lat.edge_compute,
            "cloud_s": lat.cloud_compute, "download_s": lat.download, "step_s": lat.total,
        })
        say(f"step {i} {s.step.task_kind} on {s.step.model_id}: {s.scheme}, {lat.total:.4f} s "
            f"(upload {lat.upload:.4f}, client {lat.client_compute:.4f}, edge {lat.edge_compute:.4f}, "
            f"download {lat.download:.4f})")
    say(f"planning {e2e.planning:.4f} s, fusion {e2e.fusion:.4f} s, end-to-end {e2e.total:.4f} s")
    out.csv("demo.csv", DEMO_HEADER, rows)
    out.json("demo.json", {
        "request": args.request,
        "plan": plan_to_dict(result),
        "steps": [
            {"task": s.step.task_kind, "model": s.step.model_id, "scheme": s.scheme, "split": s.split,
             "latency": _breakdown_dict(s.latency)}
            for s in e2e.steps
        ],
        "planning_s": e2e.planning,
        "fusion_s": e2e.fusion,
        "total_s": e2e.total,
    })
    return rows


COMMANDS = {
    "plan": _cmd_plan,
    "eval-planner": _cmd_eval_planner,
    "infer-latency": _cmd_infer_latency,
    "codec-sweep": _cmd_codec_sweep,
    "fl-run": _cmd_fl_run,
    "fl-auto": _cmd_fl_auto,
    "demo": _cmd_demo,
}


def run(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> RunReport:
    """Parse ``argv``, run the subcommand and report; never raises for user errors."""
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    command = argv[0] if argv else ""
    report = RunReport(scenario_id="", seed=0, command=command)

    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help and --version
            report.exit_code = exc.code if isinstance(exc.code, int) else EXIT_OK
            return report
        report.command, report.seed = args.command, args.seed

        scenario_path = Path(args.scenario) if args.scenario else bundled_path("default_scenario.json")
        scenario = load_scenario(scenario_path)
        report.scenario_id = scenario.id

        out = _Outputs()
        report.rows = COMMANDS[args.command](args, scenario, out, lambda line: print(line, file=stdout))
        if args.out:
            out.write(Path(args.out), {
                "command": args.command,
                "argv": _strip_out(argv),
                "seed": args.seed,
                "scenario_id": scenario.id,
                "scenario_sha256": hashlib.sha256(scenario_path.read_bytes()).hexdigest(),
                "versions": {
                    "edgeplan": __version__,
                    "numpy": np.__version__,
                    "python": platform.python_version(),
                },
            })
    except _UsageError as exc:
        print(exc, file=stderr)
        report.exit_code = EXIT_USAGE
    except AdvisorError as exc:
        print(f"advisor error: {exc}", file=stderr)
        report.exit_code = EXIT_ADVISOR
    except InvariantError as exc:
        print(f"internal invariant violated: {exc}", file=stderr)
        report.exit_code = EXIT_INVARIANT
    except (EdgePlanError, OSError) as exc:
        print(f"error: {exc}", file=stderr)
        report.exit_code = EXIT_SCENARIO
    except ValueError as exc:  # malformed flag values
        print(f"usage error: {exc}", file=stderr)
        report.exit_code = EXIT_USAGE
    return report


def main(argv: Sequence[str] | None = None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
