"""Task-oriented feature compression.

Pipeline: keep the ``k`` most task-relevant feature dimensions, quantize them
with a uniform mid-rise quantizer, and entropy-code the symbols with a static
arithmetic coder. ``tradeoff_sweep`` picks, for each multiplier beta, the codec
configuration minimizing ``task_loss + beta * rate_bits``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, UnknownSymbol


@dataclass(frozen=True)
class CodecConfig:
    kept_dims: int
    n_bins: int
    clip_range: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        lo, hi = self.clip_range
        if self.kept_dims < 1:
            raise ValueError("kept_dims must be >= 1")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if not lo < hi:
            raise ValueError("clip_range needs lo < hi")

    @property
    def cell_width(self) -> float:
        lo, hi = self.clip_range
        return (hi - lo) / self.n_bins


# -- quantizer --------------------------------------------------------------


def quantize(values, cfg: CodecConfig) -> np.ndarray:
    """Cell index of each value after clipping to ``cfg.clip_range``."""
    lo, hi = cfg.clip_range
    v = np.clip(np.asarray(values, dtype=float), lo, hi)
    idx = np.floor((v - lo) / cfg.cell_width).astype(np.int64)
    return np.clip(idx, 0, cfg.n_bins - 1)


def dequantize(symbols, cfg: CodecConfig) -> np.ndarray:
    """Cell centers."""
    lo, _ = cfg.clip_range
    return lo + (np.asarray(symbols, dtype=float) + 0.5) * cfg.cell_width


def empirical_entropy(symbols) -> float:
    """Plug-in Shannon entropy of the observed symbol frequencies, bits/symbol."""
    symbols = np.asarray(symbols).ravel()
    if symbols.size == 0:
        raise EmptyInput("entropy of an empty sequence")
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    h = float(-(p * np.log2(p)).sum())
    return h if h > 0 else 0.0


# -- arithmetic coder -------------------------------------------------------

_PRECISION = 32
_FULL = 1 << _PRECISION
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2
_MAX_TOTAL = _QUARTER


class FrequencyTable:
    """Static symbol model over the alphabet ``0 .. len(counts) - 1``."""

    def __init__(self, counts: Sequence[int]):
        counts = [int(c) for c in counts]
        if not counts or any(c < 0 for c in counts) or sum(counts) == 0:
            raise ValueError("counts must be non-negative with a positive total")
        total = sum(counts)
        if total > _MAX_TOTAL:
            scale = _MAX_TOTAL / total
            counts = [max(1, int(c * scale)) if c else 0 for c in counts]
            while sum(counts) > _MAX_TOTAL:
                i = counts.index(max(counts))
                counts[i] -= 1
        self.counts = tuple(counts)
        cum = [0]
        for c in self.counts:
            cum.append(cum[-1] + c)
        self.cumulative = tuple(cum)
        self.total = cum[-1]

    @classmethod
    def fit(cls, symbols, alphabet_size: int, smoothing: int = 1) -> "FrequencyTable":
        """Observed counts plus ``smoothing`` for every symbol of the alphabet."""
        symbols = np.asarray(symbols, dtype=np.int64).ravel()
        if symbols.size and (symbols.min() < 0 or symbols.max() >= alphabet_size):
            raise UnknownSymbol("symbol outside the alphabet")
        counts = np.bincount(symbols, minlength=alphabet_size) + smoothing
        return cls(counts.tolist())

    @property
    def alphabet_size(self) -> int:
        return len(self.counts)

    def entropy(self) -> float:
        p = np.asarray(self.counts, dtype=float) / self.total
        p = p[p > 0]
        return float(-(p * np.log2(p)).sum())

    def code_length(self, symbols) -> float:
        """Ideal code length of ``symbols`` under this model, in bits."""
        q = np.asarray(self.counts, dtype=float) / self.total
        return float(-np.log2(q[np.asarray(symbols, dtype=np.int64)]).sum())

    def __eq__(self, other):
        return isinstance(other, FrequencyTable) and self.counts == other.counts

    def __repr__(self):
        return f"FrequencyTable({list(self.counts)})"


def _pack_bits(bits: list[int]) -> bytes:
    if not bits:
        return b""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def entropy_encode(symbols: Iterable[int], model: FrequencyTable) -> bytes:
    """Arithmetic-code ``symbols``; the empty sequence encodes to ``b""``."""
    cum, total = model.cumulative, model.total
    n_symbols = len(model.counts)
    low, high, pending = 0, _FULL - 1, 0
    bits: list[int] = []
    emit = bits.append
    n = 0
    for s in symbols:
        s = int(s)
        if not 0 <= s < n_symbols or cum[s + 1] == cum[s]:
            raise UnknownSymbol(s)
        n += 1
        span = high - low + 1
        high = low + span * cum[s + 1] // total - 1
        low = low + span * cum[s] // total
        while True:
            if high < _HALF:
                emit(0)
                bits.extend([1] * pending)
                pending = 0
            elif low >= _HALF:
                emit(1)
                bits.extend([0] * pending)
                pending = 0
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
    if n == 0:
        return b""
    pending += 1
    if low < _QUARTER:
        emit(0)
        bits.extend([1] * pending)
    else:
        emit(1)
        bits.extend([0] * pending)
    return _pack_bits(bits)


def entropy_decode(bitstream: bytes, model: FrequencyTable, n: int) -> list[int]:
    """Inverse of ``entropy_encode`` for a stream of ``n`` symbols."""
    if n == 0:
        return []
    cum, total = model.cumulative, model.total
    bits = np.unpackbits(np.frombuffer(bitstream, dtype=np.uint8)).tolist()
    n_bits = len(bits)
    pos = 0
    value = 0
    for _ in range(_PRECISION):
        value = (value << 1) | (bits[pos] if pos < n_bits else 0)
        pos += 1
    low, high = 0, _FULL - 1
    out = []
    n_symbols = len(model.counts)
    for _ in range(n):
        span = high - low + 1
        target = ((value - low + 1) * total - 1) // span
        # largest s with cum[s] <= target
        lo_s, hi_s = 0, n_symbols
        while hi_s - lo_s > 1:
            mid = (lo_s + hi_s) // 2
            if cum[mid] <= target:
                lo_s = mid
            else:
                hi_s = mid
        s = lo_s
        out.append(s)
        high = low + span * cum[s + 1] // total - 1
        low = low + span * cum[s] // total
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                value -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                low -= _QUARTER
                high -= _QUARTER
                value -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
            value = (value << 1) | (bits[pos] if pos < n_bits else 0)
            pos += 1
    return out


_HEADER = struct.Struct(">IH")


def pack_stream(symbols: Sequence[int], model: FrequencyTable) -> bytes:
    """Self-contained bitstream: symbol count, alphabet size, counts, then payload."""
    symbols = list(symbols)
    header = _HEADER.pack(len(symbols), model.alphabet_size)
    header += struct.pack(f">{model.alphabet_size}I", *model.counts)
    return header + entropy_encode(symbols, model)


def unpack_stream(blob: bytes) -> tuple[list[int], FrequencyTable]:
    n, k = _HEADER.unpack_from(blob)
    offset = _HEADER.size
    counts = struct.unpack_from(f">{k}I", blob, offset)
    offset += 4 * k
    model = FrequencyTable(counts)
    return entropy_decode(blob[offset:], model, n), model


def header_bits(model: FrequencyTable) -> int:
    return 8 * (_HEADER.size + 4 * model.alphabet_size)


# -- relevance selection ----------------------------------------------------


def select_relevant(v, relevance, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (ascending) of the ``k`` highest relevance scores and the matching values.

    Equal scores prefer the smaller index.
    """
    v = np.asarray(v, dtype=float)
    relevance = np.asarray(relevance, dtype=float)
    if relevance.shape[-1] != v.shape[-1]:
        raise ValueError("relevance must have one score per dimension")
    if not 1 <= k <= v.shape[-1]:
        raise ValueError(f"k must lie in [1, {v.shape[-1]}]")
    order = np.lexsort((np.arange(relevance.size), -relevance))
    idx = np.sort(order[:k])
    return idx, v[..., idx]


def mutual_information_scores(x, y, n_bins: int = 16) -> np.ndarray:
    """Histogram estimate of I(x_j; y) in bits for every column j of ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    labels, y_idx = np.unique(y, return_inverse=True)
    scores = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        edges = np.quantile(x[:, j], np.linspace(0, 1, n_bins + 1)[1:-1])
        xb = np.searchsorted(edges, x[:, j])
        joint = np.zeros((n_bins, labels.size))
        np.add.at(joint, (xb, y_idx), 1)
        joint /= joint.sum()
        px = joint.sum(axis=1, keepdims=True)
        py = joint.sum(axis=0, keepdims=True)
        nz = joint > 0
        scores[j] = float((joint[nz] * np.log2(joint[nz] / (px @ py)[nz])).sum())
    return scores


# -- synthetic task and the trade-off sweep --------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Binary linear task: the label depends on ``n_relevant`` of ``n_features`` dims.

    Features are i.i.d. standard normal. A seeded subset of dimensions gets
    random weights (scaled so the clean score has unit variance); the label is
    ``score + noise * eps > 0``. The server-side predictor is the known linear
    rule applied to reconstructed features, with dropped dimensions set to 0.
    """

    n_features: int = 64
    n_relevant: int = 8
    n_train: int = 2000
    n_test: int = 2000
    noise: float = 0.3
    seed: int = 0
    relevance_source: str = "structure"

    @cached_property
    def _data(self):
        rng = np.random.default_rng(self.seed)
        relevant = np.sort(rng.choice(self.n_features, self.n_relevant, replace=False))
        w = np.zeros(self.n_features)
        w[relevant] = rng.normal(size=self.n_relevant)
        w /= np.linalg.norm(w)
        x_train = rng.normal(size=(self.n_train, self.n_features))
        x_test = rng.normal(size=(self.n_test, self.n_features))
        y_train = (x_train @ w + self.noise * rng.normal(size=self.n_train)) > 0
        y_test = (x_test @ w + self.noise * rng.normal(size=self.n_test)) > 0
        return relevant, w, x_train, y_train, x_test, y_test

    @property
    def relevant_dims(self) -> np.ndarray:
        return self._data[0]

    @property
    def weights(self) -> np.ndarray:
        return self._data[1]

    @property
    def train(self):
        return self._data[2], self._data[3]

    @property
    def test(self):
        return self._data[4], self._data[5]

    def relevance(self) -> np.ndarray:
        if self.relevance_source == "mi":
            return mutual_information_scores(*self.train)
        if self.relevance_source == "structure":
            return np.abs(self.weights)
        raise ValueError(f"unknown relevance source {self.relevance_source!r}")

    def predict(self, features) -> np.ndarray:
        return np.asarray(features) @ self.weights > 0


@dataclass(frozen=True)
class CodecEvaluation:
    config: CodecConfig
    rate_bits: float
    task_loss: float
    indices: tuple[int, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class TradeoffPoint:
    beta: float
    rate_bits: float
    task_loss: float
    config: CodecConfig


def evaluate_config(task: SyntheticTask, cfg: CodecConfig, relevance=None) -> CodecEvaluation:
    """Measured bits per held-out example and error rate after reconstruct-and-predict.

    The frequency model is fit on training features and assumed known to both
    ends, so only the payload is charged.
    """
    if cfg.kept_dims > task.n_features:
        raise ValueError("kept_dims exceeds the feature dimension")
    if relevance is None:
        relevance = task.relevance()
    x_train, _ = task.train
    x_test, y_test = task.test
    idx, kept_train = select_relevant(x_train, relevance, cfg.kept_dims)
    model = FrequencyTable.fit(quantize(kept_train, cfg), cfg.n_bins)
    symbols = quantize(x_test[:, idx], cfg)
    payload = entropy_encode(symbols.ravel().tolist(), model)
    rate_bits = 8 * len(payload) / task.n_test

    # the coder is lossless, so decoded symbols equal ``symbols``
    recon = np.zeros_like(x_test)
    recon[:, idx] = dequantize(symbols, cfg)
    task_loss = float(np.mean(task.predict(recon) != y_test))
    return CodecEvaluation(cfg, rate_bits, task_loss, tuple(int(i) for i in idx))


def select_lagrangian(evaluations: Sequence[CodecEvaluation], beta: float) -> CodecEvaluation:
    """Minimizer of ``task_loss + beta * rate_bits``; ties go to the lower rate, then grid order."""
    best = None
    best_key = None
    for ev in evaluations:
        key = (ev.task_loss + beta * ev.rate_bits, ev.rate_bits)
        if best is None or key < best_key:
            best, best_key = ev, key
    return best


def tradeoff_sweep(task: SyntheticTask, betas: Sequence[float], grid: Sequence[CodecConfig]) -> list[TradeoffPoint]:
    if not grid:
        raise ValueError("grid must be non-empty")
    if any(b < 0 for b in betas) or any(b2 < b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError("betas must be non-negative and ascending")
    relevance = task.relevance()
    evaluations = [evaluate_config(task, cfg, relevance) for cfg in grid]
    points = []
    for beta in betas:
        ev = select_lagrangian(evaluations, beta)
        points.append(TradeoffPoint(float(beta), ev.rate_bits, ev.task_loss, ev.config))
    return points


def make_grid(kept: Sequence[int], bins: Sequence[int], clip_range=(-3.0, 3.0)) -> list[CodecConfig]:
    return [CodecConfig(k, b, tuple(clip_range)) for k in kept for b in bins]
