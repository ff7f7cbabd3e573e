"""Federated averaging over small numpy models, with a deterministic wall-clock model
and an advisor-driven configuration trial loop."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .advisor import FL_PROPOSAL, NO_CHANGE, NO_CHANGE_TOKEN, REQUEST_MARKER, Advisor, ScriptedAdvisor, ask
from .domain import (
    Adam,
    FLConfig,
    GaussianJitter,
    MixtureSpec,
    PATCHABLE_FIELDS,
    SGDMomentum,
    Scenario,
    Tier,
    apply_patch,
    fl_config_to_dict,
)
from .errors import ArchMismatch, MalformedReply, UnknownArch
from .offload import compute_time, transfer_time

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4
# forward + backward cost per parameter per sample
TRAIN_FLOPS_PER_PARAM = 6

_MLP_RE = re.compile(r"^mlp((?:-[1-9][0-9]*)+)$")


# -- models -----------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    arch: str
    layer_sizes: tuple[int, ...]
    weights: np.ndarray = field(compare=False)

    @property
    def param_count(self) -> int:
        return int(self.weights.size)

    @property
    def bytes(self) -> int:
        return BYTES_PER_PARAM * self.param_count

    def with_weights(self, weights: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, self.layer_sizes, weights)

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.arch == other.arch
            and self.layer_sizes == other.layer_sizes
            and np.array_equal(self.weights, other.weights)
        )


def layer_sizes_for(arch: str, n_features: int, n_classes: int) -> tuple[int, ...]:
    if arch in ("linear", "logistic"):
        return (n_features, n_classes)
    m = _MLP_RE.match(arch)
    if m:
        hidden = tuple(int(h) for h in m.group(1)[1:].split("-"))
        return (n_features, *hidden, n_classes)
    raise UnknownArch(f"unknown architecture {arch!r}; expected linear, logistic or mlp-<h>[-<h>...]")


def count_params(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes, layer_sizes[1:]))


def init_model(arch: str, seed: int, n_features: int = 10, n_classes: int = 4) -> ModelParams:
    """Seeded init: weights ~ N(0, 1/fan_in), biases zero."""
    sizes = layer_sizes_for(arch, n_features, n_classes)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        chunks.append(rng.normal(scale=1.0 / np.sqrt(fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(arch, sizes, np.concatenate(chunks))


def _unflatten(model: ModelParams, weights: np.ndarray | None = None):
    w = model.weights if weights is None else weights
    layers, offset = [], 0
    for fan_in, fan_out in zip(model.layer_sizes, model.layer_sizes[1:]):
        W = w[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = w[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def logits(model: ModelParams, x: np.ndarray) -> np.ndarray:
    layers = _unflatten(model)
    h = x
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
    W, b = layers[-1]
    return h @ W + b


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(model, x), axis=1)


def accuracy(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(model, x) == y))


def loss_and_grad(model: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the flat weights.

    ``logistic`` uses one-vs-rest sigmoid cross-entropy; the other
    architectures use softmax cross-entropy. Hidden units are tanh.
    """
    layers = _unflatten(model)
    n = x.shape[0]
    acts = [x]
    h = x
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    z = h @ W + b
    onehot = np.zeros_like(z)
    onehot[np.arange(n), y] = 1.0

    if model.arch == "logistic":
        # log(1 + e^z) computed stably
        softplus = np.logaddexp(0.0, z)
        loss = float(np.sum(softplus - onehot * z) / n)
        dz = (1.0 / (1.0 + np.exp(-z)) - onehot) / n
    else:
        zs = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(zs).sum(axis=1, keepdims=True))
        logp = zs - logsum
        loss = float(-np.sum(onehot * logp) / n)
        dz = (np.exp(logp) - onehot) / n

    grads = []
    delta = dz
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a = acts[i]
        grads.append((a.T @ delta, delta.sum(axis=0)))
        if i:
            delta = (delta @ W.T) * (1.0 - a * a)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        flat.append(gb)
    return loss, np.concatenate(flat)


def loss_value(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return loss_and_grad(model, x, y)[0]


# -- training ---------------------------------------------------------------


def local_train(model: ModelParams, shard: tuple[np.ndarray, np.ndarray], cfg: FLConfig, seed: int,
                lr: float | None = None) -> ModelParams:
    """``cfg.local_epochs`` epochs of seeded minibatch optimization on ``shard``.

    Optimizer state starts fresh on every call. ``lr`` overrides ``cfg.lr``
    (the federated loop passes the scheduled rate).
    """
    x, y = shard
    n = x.shape[0]
    if n == 0:
        raise ValueError("shard must be non-empty")
    lr = cfg.lr if lr is None else lr
    rng = np.random.default_rng(seed)
    w = model.weights.copy()
    current = model.with_weights(w)
    opt = cfg.optimizer
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    t = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            if isinstance(cfg.augmentation, GaussianJitter) and cfg.augmentation.sigma > 0:
                xb = xb + rng.normal(scale=cfg.augmentation.sigma, size=xb.shape)
            _, g = loss_and_grad(current, xb, y[idx])
            t += 1
            if isinstance(opt, SGDMomentum):
                m = opt.mu * m + g
                step = m
            elif isinstance(opt, Adam):
                m = opt.beta1 * m + (1 - opt.beta1) * g
                v = opt.beta2 * v + (1 - opt.beta2) * g * g
                m_hat = m / (1 - opt.beta1 ** t)
                v_hat = v / (1 - opt.beta2 ** t)
                step = m_hat / (np.sqrt(v_hat) + opt.eps)
            else:
                step = g
            w -= lr * step
    return current


def fedavg_aggregate(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Parameter-wise weighted mean, weights normalized to sum to one.

    Computed as ``m0 + sum_i p_i (m_i - m0)`` so identical inputs come back bit-for-bit.
    """
    if not models or len(models) != len(weights):
        raise ValueError("need one weight per model")
    first = models[0]
    for mdl in models[1:]:
        if mdl.arch != first.arch or mdl.layer_sizes != first.layer_sizes:
            raise ArchMismatch(f"{mdl.arch}{mdl.layer_sizes} vs {first.arch}{first.layer_sizes}")
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    p = weights / weights.sum()
    base = first.weights
    delta = np.zeros_like(base)
    for p_i, mdl in zip(p, models):
        delta += p_i * (mdl.weights - base)
    return first.with_weights(base + delta)


def round_wallclock(model_bytes: int, cfg: FLConfig, scenario: Scenario, client_compute_s: Sequence[float],
                    uplink: str | None = None) -> float:
    """Broadcast + slowest local training + uploads.

    In ``sequential`` mode the clients share the uplink, so upload
    serialization times add up; ``parallel`` charges a single upload.
    """
    if len(client_compute_s) != cfg.n_clients:
        raise ValueError("need one compute time per client")
    uplink = uplink or scenario.settings.fl_uplink
    links = scenario.links
    broadcast = transfer_time(model_bytes, links.client_edge_down)
    compute = max(client_compute_s) if client_compute_s else 0.0
    n_up = cfg.n_clients if uplink == "sequential" else 1
    upload = n_up * model_bytes / links.client_edge_up.rate + links.client_edge_up.propagation_delay
    return broadcast + compute + upload


# -- data -------------------------------------------------------------------


@dataclass(frozen=True)
class FederatedData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def n_features(self) -> int:
        return int(self.x_train.shape[1])

    def describe(self) -> str:
        return (
            f"{self.x_train.shape[0]} training samples and {self.x_test.shape[0]} test samples, "
            f"feature dimension {self.n_features}, {self.n_classes} classes"
        )


def make_mixture(spec: MixtureSpec = MixtureSpec()) -> FederatedData:
    """Gaussian-mixture classification data; every class owns several clusters."""
    rng = np.random.default_rng(spec.seed)
    n_centers = spec.n_classes * spec.clusters_per_class
    centers = rng.normal(scale=spec.separation, size=(n_centers, spec.n_features))
    center_class = np.arange(n_centers) % spec.n_classes

    def draw(n):
        which = rng.integers(0, n_centers, size=n)
        x = centers[which] + rng.normal(scale=spec.cluster_std, size=(n, spec.n_features))
        return x, center_class[which]

    x_train, y_train = draw(spec.n_train)
    x_test, y_test = draw(spec.n_test)
    return FederatedData(x_train, y_train, x_test, y_test, spec.n_classes)


def partition_iid(n: int, n_clients: int, seed: int) -> list[np.ndarray]:
    """Random balanced split; each shard keeps the original sample order."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, n_clients)]


def client_seed(seed: int, round_index: int, client: int) -> int:
    return int(np.random.SeedSequence([seed, round_index, client]).generate_state(1)[0])


class CurvePoint(NamedTuple):
    round: int
    accuracy: float
    wallclock_s: float


def run_fl(cfg: FLConfig, data: FederatedData, scenario: Scenario, seed: int = 0) -> list[CurvePoint]:
    """Full-participation FedAvg; returns test accuracy and cumulative wall clock per round."""
    model = init_model(cfg.model_arch, seed, data.n_features, data.n_classes)
    shards = partition_iid(data.x_train.shape[0], cfg.n_clients, seed)
    if any(s.size == 0 for s in shards):
        raise ValueError("more clients than training samples")
    sizes = [float(s.size) for s in shards]
    client = scenario.device(Tier.CLIENT)
    compute_s = [
        compute_time(TRAIN_FLOPS_PER_PARAM * model.param_count * cfg.local_epochs * s.size, client)
        for s in shards
    ]
    per_round = round_wallclock(model.bytes, cfg, scenario, compute_s)
    curve = []
    wall = 0.0
    for r in range(cfg.global_rounds):
        lr = cfg.lr_at(r)
        local = [
            local_train(model, (data.x_train[idx], data.y_train[idx]), cfg, client_seed(seed, r, i), lr)
            for i, idx in enumerate(shards)
        ]
        model = fedavg_aggregate(local, sizes)
        wall += per_round
        curve.append(CurvePoint(r + 1, accuracy(model, data.x_test, data.y_test), wall))
    return curve


# -- trial loop -------------------------------------------------------------

DESIGN_PURPOSE = (
    "Train a classifier on the users' private data with federated averaging. "
    "Propose changes to the template configuration that improve final test accuracy."
)

PATCH_HELP = (
    "model_arch: linear | logistic | mlp-<hidden>[-<hidden>...]; lr: positive number; "
    "optimizer: sgd | momentum(mu) | adam(beta1, beta2, eps); "
    "lr_schedule: constant | step(factor, every_rounds); augmentation: none | jitter(sigma)"
)


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    config: FLConfig
    accuracy_curve: tuple[CurvePoint, ...]
    advisor_raw: str

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_curve[-1].accuracy


def trial_context(cfg: FLConfig, data: FederatedData, records: Sequence[TrialRecord]) -> str:
    lines = [
        "### Design purpose",
        DESIGN_PURPOSE,
        "### Patchable fields",
        ", ".join(PATCHABLE_FIELDS),
        PATCH_HELP,
        "### Current configuration",
        json.dumps(fl_config_to_dict(cfg), sort_keys=True),
        "### Reply format",
        'Answer with one JSON object {"patch": {<field>: <value>, ...}}, '
        f"or {NO_CHANGE_TOKEN} if no further modification helps.",
    ]
    for rec in records:
        lines.append(f"### Trial {rec.trial_index} accuracy curve")
        lines.append(f"config: {json.dumps(fl_config_to_dict(rec.config), sort_keys=True)}")
        lines.append("round,accuracy,wallclock_s")
        lines.extend(f"{p.round},{p.accuracy:.4f},{p.wallclock_s:.3f}" for p in rec.accuracy_curve)
    lines.append(REQUEST_MARKER)
    lines.append(f"Dataset: {data.describe()}; {cfg.n_clients} clients with IID shards.")
    return "\n".join(lines) + "\n"


def trial_loop(advisor: Advisor, template: FLConfig, data: FederatedData, scenario: Scenario,
               max_trials: int, target_acc: float | None = None, seed: int = 0) -> list[TrialRecord]:
    """Ask for a patch, train, feed the curve back; repeat.

    Stops when a trial reaches ``target_acc``, after ``max_trials`` trials, or
    when the advisor answers NO_CHANGE. A NO_CHANGE trial re-reports the
    current configuration (the template if nothing ran yet). Patches
    accumulate. A malformed reply ends the loop with the records so far.
    """
    if max_trials < 1:
        raise ValueError("max_trials must be >= 1")
    records: list[TrialRecord] = []
    cfg = template
    for trial in range(1, max_trials + 1):
        context = trial_context(cfg, data, records)
        try:
            reply = ask(advisor, context, FL_PROPOSAL)
        except MalformedReply as exc:
            log.warning("trial %d: malformed advisor reply, stopping: %s", trial, exc.reason)
            break
        if reply.kind == NO_CHANGE:
            # config unchanged and training is deterministic, so the last curve stands
            curve = records[-1].accuracy_curve if records else tuple(run_fl(cfg, data, scenario, seed))
            records.append(TrialRecord(trial, cfg, curve, reply.raw_text))
            break
        cfg = apply_patch(cfg, reply.patch)
        curve = tuple(run_fl(cfg, data, scenario, seed))
        records.append(TrialRecord(trial, cfg, curve, reply.raw_text))
        if target_acc is not None and curve[-1].accuracy >= target_acc:
            break
    return records


STORYLINE_REPLIES = (
    "A compact network should be enough for this dataset; fine-tune it with plain SGD.\n"
    '{"patch": {"model_arch": "mlp-16", "optimizer": {"name": "sgd"}, "lr": 0.02}}',
    "Accuracy is still climbing slowly. Switch to Adam and add mild input jitter.\n"
    '{"patch": {"optimizer": {"name": "adam"}, "augmentation": {"name": "jitter", "sigma": 0.1}, "lr": 0.5}}',
    "The curve oscillates, the learning rate is too large late in training. "
    "Decay it by 10x every 10 rounds.\n"
    '{"patch": {"lr_schedule": {"name": "step", "factor": 0.1, "every_rounds": 10}}}',
)


def storyline_advisor() -> ScriptedAdvisor:
    """Three scripted proposals (small model + SGD, then Adam, then step decay), then NO_CHANGE."""
    return ScriptedAdvisor(STORYLINE_REPLIES)
