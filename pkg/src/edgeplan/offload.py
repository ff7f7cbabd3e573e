"""Latency model for client/edge/cloud execution schemes and the partition-point search."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .domain import LinkProfile, DeviceProfile, ModelManifest, Scenario, Tier
from .errors import InvalidSplit, ValidationError


@dataclass(frozen=True)
class ClientOnly:
    label = "client_only"


@dataclass(frozen=True)
class EdgeOnlyLossless:
    label = "edge_only_lossless"


@dataclass(frozen=True)
class EdgeOnlyLossy:
    compression_ratio: float

    label = "edge_only_lossy"

    def __post_init__(self):
        if not self.compression_ratio > 1:
            raise ValueError("compression_ratio must be > 1")


@dataclass(frozen=True)
class CoInference:
    """Split after ``split`` layers; ``None`` means pick the best split."""

    split: int | None = None

    @property
    def label(self) -> str:
        return "co_inference" if self.split is None else f"co_inference@{self.split}"


@dataclass(frozen=True)
class CloudOnly:
    label = "cloud_only"


Scheme = ClientOnly | EdgeOnlyLossless | EdgeOnlyLossy | CoInference | CloudOnly


@dataclass(frozen=True)
class LatencyBreakdown:
    planning: float = 0.0
    upload: float = 0.0
    client_compute: float = 0.0
    edge_compute: float = 0.0
    cloud_compute: float = 0.0
    download: float = 0.0
    total: float = 0.0

    PARTS = ("planning", "upload", "client_compute", "edge_compute", "cloud_compute", "download")

    @classmethod
    def of(cls, **parts: float) -> "LatencyBreakdown":
        """Build a breakdown whose total is the sum of the parts in PARTS order."""
        values = {name: float(parts.get(name, 0.0)) for name in cls.PARTS}
        total = 0.0
        for name in cls.PARTS:
            total += values[name]
        return cls(**values, total=total)

    def parts(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.PARTS)

    def without_planning(self) -> "LatencyBreakdown":
        values = dict(zip(self.PARTS, self.parts()))
        values["planning"] = 0.0
        return LatencyBreakdown.of(**values)


@dataclass(frozen=True)
class PartitionDecision:
    split: int
    latency: LatencyBreakdown


def transfer_time(n_bytes: int | float, link: LinkProfile) -> float:
    """Serialization plus propagation time of ``n_bytes`` over ``link``."""
    if n_bytes < 0:
        raise ValueError("byte count must be >= 0")
    return n_bytes / link.rate + link.propagation_delay


def compute_time(flops: int | float, device: DeviceProfile) -> float:
    if flops < 0:
        raise ValueError("flop count must be >= 0")
    return flops / device.throughput


def planning_latency(scenario: Scenario) -> float:
    """Request travels client -> edge -> cloud, the advisor runs, the plan comes back."""
    s, links = scenario.settings, scenario.links
    return (
        transfer_time(s.request_bytes, links.client_edge_up)
        + transfer_time(s.request_bytes, links.edge_cloud_up)
        + s.advisor_compute_s
        + transfer_time(s.reply_bytes, links.edge_cloud_down)
        + transfer_time(s.reply_bytes, links.client_edge_down)
    )


def _cloud(scenario: Scenario) -> DeviceProfile:
    if not scenario.has_tier(Tier.CLOUD):
        raise ValidationError("devices", "cloud-only execution needs a cloud device")
    return scenario.device(Tier.CLOUD)


def scheme_latency(manifest: ModelManifest, scheme: Scheme, scenario: Scenario) -> LatencyBreakdown:
    """End-to-end latency of running ``manifest`` once under ``scheme``.

    Every scheme pays the same planning term. Results computed off the client
    come back over the client-edge downlink (and the edge-cloud downlink for
    cloud execution). ``CoInference(None)`` resolves to the best split.
    """
    links = scenario.links
    client = scenario.device(Tier.CLIENT)
    edge = scenario.device(Tier.EDGE)
    planning = planning_latency(scenario)
    result = manifest.result_bytes

    if isinstance(scheme, ClientOnly):
        return LatencyBreakdown.of(planning=planning, client_compute=compute_time(manifest.total_flops, client))
    if isinstance(scheme, EdgeOnlyLossless):
        scheme = CoInference(0)
    if isinstance(scheme, EdgeOnlyLossy):
        return LatencyBreakdown.of(
            planning=planning,
            upload=transfer_time(manifest.input_bytes / scheme.compression_ratio, links.client_edge_up),
            edge_compute=compute_time(manifest.total_flops, edge),
            download=transfer_time(result, links.client_edge_down),
        )
    if isinstance(scheme, CoInference):
        if scheme.split is None:
            return best_partition(manifest, scenario).latency
        split = scheme.split
        if isinstance(split, bool) or not isinstance(split, int) or not 0 <= split <= manifest.n_layers:
            raise InvalidSplit(f"split {split!r} outside [0, {manifest.n_layers}]")
        head = sum(layer.flops for layer in manifest.layers[:split])
        tail = sum(layer.flops for layer in manifest.layers[split:])
        return LatencyBreakdown.of(
            planning=planning,
            upload=transfer_time(manifest.feature_bytes(split), links.client_edge_up),
            client_compute=compute_time(head, client),
            edge_compute=compute_time(tail, edge),
            # at split == L the result was produced on the client
            download=transfer_time(result, links.client_edge_down) if split < manifest.n_layers else 0.0,
        )
    if isinstance(scheme, CloudOnly):
        return LatencyBreakdown.of(
            planning=planning,
            upload=transfer_time(manifest.input_bytes, links.client_edge_up)
            + transfer_time(manifest.input_bytes, links.edge_cloud_up),
            cloud_compute=compute_time(manifest.total_flops, _cloud(scenario)),
            download=transfer_time(result, links.edge_cloud_down)
            + transfer_time(result, links.client_edge_down),
        )
    raise TypeError(f"not a scheme: {scheme!r}")


def best_partition(manifest: ModelManifest, scenario: Scenario) -> PartitionDecision:
    """Exhaustive search over splits 0..L; ties go to the smallest split."""
    best = None
    for split in range(manifest.n_layers + 1):
        latency = scheme_latency(manifest, CoInference(split), scenario)
        if best is None or latency.total < best.latency.total:
            best = PartitionDecision(split, latency)
    return best


@dataclass(frozen=True)
class SweepRow:
    rate: float
    scheme: str
    latency: LatencyBreakdown
    split: int | None = None


def weighted_breakdown(items: Iterable[tuple[LatencyBreakdown, float]]) -> LatencyBreakdown:
    """Request-mix average of several breakdowns; weights are normalized."""
    items = list(items)
    total_w = sum(w for _, w in items)
    if total_w <= 0:
        raise ValueError("mix weights must sum to a positive value")
    parts = {name: 0.0 for name in LatencyBreakdown.PARTS}
    for latency, w in items:
        for name in LatencyBreakdown.PARTS:
            parts[name] += w / total_w * getattr(latency, name)
    return LatencyBreakdown.of(**parts)


def _check_rates(rates: Sequence[float]) -> None:
    if not rates:
        raise ValueError("at least one rate is required")
    if any(r <= 0 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError("rates must be positive and strictly ascending")


def latency_sweep(
    manifest: ModelManifest | Sequence[tuple[ModelManifest, float]],
    scenario: Scenario,
    schemes: Sequence[Scheme],
    rates: Sequence[float],
) -> list[SweepRow]:
    """Evaluate each scheme at each client->edge uplink rate.

    ``manifest`` may also be a request mix, a sequence of (manifest, weight)
    pairs; rows then hold the weighted average breakdown. Rows come out in
    (rate, scheme) order.
    """
    _check_rates(rates)
    mix = [(manifest, 1.0)] if isinstance(manifest, ModelManifest) else list(manifest)
    rows = []
    for rate in rates:
        link = replace(scenario.links.client_edge_up, rate=float(rate))
        at_rate = scenario.with_link("client_edge_up", link)
        for scheme in schemes:
            split = scheme.split if isinstance(scheme, CoInference) else None
            per_model = []
            for m, w in mix:
                if isinstance(scheme, CoInference) and scheme.split is None:
                    decision = best_partition(m, at_rate)
                    per_model.append((decision.latency, w))
                    if len(mix) == 1:
                        split = decision.split
                else:
                    per_model.append((scheme_latency(m, scheme, at_rate), w))
            latency = per_model[0][0] if len(mix) == 1 else weighted_breakdown(per_model)
            rows.append(SweepRow(float(rate), scheme.label, latency, split))
    return rows


def parse_scheme(text: str, scenario: Scenario | None = None) -> Scheme:
    """CLI scheme names: client, edge, edge-lossy[:ratio], co[:split], cloud."""
    name, _, arg = text.strip().lower().partition(":")
    name = name.replace("_", "-")
    if name in ("client", "client-only"):
        return ClientOnly()
    if name in ("edge", "edge-only", "edge-lossless", "edge-only-lossless"):
        return EdgeOnlyLossless()
    if name in ("edge-lossy", "edge-only-lossy"):
        ratio = float(arg) if arg else (scenario.settings.lossy_ratio if scenario else 6.6)
        return EdgeOnlyLossy(ratio)
    if name in ("co", "co-inference", "coinference"):
        return CoInference(int(arg) if arg else None)
    if name in ("cloud", "cloud-only"):
        return CloudOnly()
    raise ValueError(f"unknown scheme {text!r}")
