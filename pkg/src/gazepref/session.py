"""Scoring a stimulus session: frame sampling, per-frame classification, reports."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .cascade import CascadeModel, FaceEyeParams, detect_face_then_eyes
from .cnn import NetworkState, predict
from .composer import PAIR_SIZE, compose_pair, quality_gate
from .imaging import GrayImage, RgbImage, to_grayscale


@dataclass(frozen=True)
class SamplerConfig:
    skip: int = 300
    stride: int = 15

    def __post_init__(self):
        if self.skip < 0 or self.stride < 1:
            raise ValueError("skip must be >= 0 and stride >= 1")

    def keeps(self, i: int) -> bool:
        return i >= self.skip and (i - self.skip) % self.stride == 0


def sample_frames(total_frames: int, cfg: SamplerConfig = SamplerConfig()) -> list[int]:
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    return list(range(cfg.skip, total_frames, cfg.stride))


@dataclass(frozen=True)
class FrameRecord:
    index: int
    accepted: bool
    reason: str | None = None
    label: int | None = None
    probs: tuple[float, ...] | None = None
    latency_ms: float = 0.0

    def __post_init__(self):
        if self.accepted != (self.label is not None):
            raise ValueError("a frame has a class iff it passed the gate")

    def to_dict(self) -> dict:
        d = {"frame": self.index, "accepted": self.accepted,
             "latency_ms": round(self.latency_ms, 3)}
        if self.accepted:
            d["class"] = self.label
            d["probs"] = [round(p, 6) for p in self.probs]
        else:
            d["reason"] = self.reason
        return d


class FrameDecodeError(ValueError):
    """A frame in the stream could not be decoded; carries the records so far."""

    def __init__(self, frame: int, cause: Exception, records: list[FrameRecord]):
        super().__init__(f"frame {frame}: {cause}")
        self.frame = frame
        self.records = records


def classify_frame(face_model: CascadeModel, eye_model: CascadeModel, state: NetworkState,
                   frame, index: int = 0,
                   params: FaceEyeParams = FaceEyeParams()) -> FrameRecord:
    t0 = time.perf_counter()
    gray = frame if isinstance(frame, GrayImage) else to_grayscale(frame)
    found = detect_face_then_eyes(face_model, eye_model, gray, params)
    gate = quality_gate(found)
    if not gate.accepted:
        return FrameRecord(index, False, gate.reason,
                           latency_ms=(time.perf_counter() - t0) * 1e3)
    pair = compose_pair(gray, found, frame_id=str(index))
    label, probs = predict(state, pair.pixels)
    return FrameRecord(index, True, None, label, tuple(float(p) for p in probs),
                       (time.perf_counter() - t0) * 1e3)


def classify_stream(face_model: CascadeModel, eye_model: CascadeModel, state: NetworkState,
                    frames: Iterable[GrayImage | RgbImage],
                    cfg: SamplerConfig = SamplerConfig(),
                    params: FaceEyeParams = FaceEyeParams()) -> list[FrameRecord]:
    """Classify every sampled frame of a stream, in stream order.

    Unsampled frames are still decoded (the stream is sequential) but not
    processed.  Gate rejections are recorded, never raised.
    """
    records: list[FrameRecord] = []
    it: Iterator = iter(frames)
    i = 0
    while True:
        try:
            frame = next(it)
        except StopIteration:
            break
        except Exception as e:
            raise FrameDecodeError(i, e, records) from e
        if cfg.keeps(i):
            records.append(classify_frame(face_model, eye_model, state, frame, i, params))
        i += 1
    return records


@dataclass(frozen=True)
class LatencySummary:
    median_ms: float
    p95_ms: float
    samples: tuple[float, ...] = ()

    @classmethod
    def of(cls, samples_ms) -> LatencySummary:
        s = np.asarray(samples_ms, dtype=np.float64)
        if s.size == 0:
            return cls(float("nan"), float("nan"))
        return cls(float(np.median(s)), float(np.percentile(s, 95)),
                   tuple(float(v) for v in s))

    def to_dict(self, with_samples: bool = False) -> dict:
        d = {"median_ms": round(self.median_ms, 3), "p95_ms": round(self.p95_ms, 3),
             "n": len(self.samples)}
        if with_samples:
            d["samples_ms"] = [round(v, 4) for v in self.samples]
        return d


@dataclass
class SessionReport:
    sampled: int
    counts: dict[int, int]
    proportions: dict[int, float]
    preference_ratio: float | None
    ratio_reason: str | None
    rejected: dict[str, int]
    latency: LatencySummary
    records: list[FrameRecord] = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return sum(self.counts.values())

    def to_dict(self, with_records: bool = True) -> dict:
        d = {"sampled": self.sampled,
             "accepted": self.accepted,
             "counts": {str(k): v for k, v in self.counts.items()},
             "proportions": {str(k): round(v, 6) for k, v in self.proportions.items()},
             "preference_ratio": self.preference_ratio,
             "rejected": dict(sorted(self.rejected.items())),
             "latency": self.latency.to_dict()}
        if self.preference_ratio is None:
            d["preference_ratio_reason"] = self.ratio_reason
        if with_records:
            d["frames"] = [r.to_dict() for r in self.records]
        return d

    def to_json(self, with_records: bool = True) -> str:
        return json.dumps(self.to_dict(with_records), indent=2)

    def to_text(self) -> str:
        lines = [f"frames sampled      {self.sampled}",
                 f"frames accepted     {self.accepted}",
                 f"frames rejected     {self.sampled - self.accepted}"]
        for reason, n in sorted(self.rejected.items()):
            lines.append(f"  {reason:<17} {n}")
        names = {0: "right", 1: "left", 2: "undetermined"}
        for c in sorted(self.counts):
            lines.append(f"class {c} ({names.get(c, '?'):<12}) {self.counts[c]:>5}  "
                         f"{100 * self.proportions[c]:6.2f}%")
        if self.preference_ratio is None:
            lines.append(f"preference ratio    n/a ({self.ratio_reason})")
        else:
            lines.append(f"preference ratio    {self.preference_ratio:.4f}  "
                         "(class 1 / (class 0 + class 1))")
        lines.append(f"latency per frame   median {self.latency.median_ms:.2f} ms, "
                     f"p95 {self.latency.p95_ms:.2f} ms")
        return "\n".join(lines) + "\n"


def summarize(records: list[FrameRecord], classes: int = 3) -> SessionReport:
    counts = {c: 0 for c in range(classes)}
    rejected: dict[str, int] = {}
    for r in records:
        if r.accepted:
            counts[r.label] = counts.get(r.label, 0) + 1
        else:
            rejected[r.reason] = rejected.get(r.reason, 0) + 1
    accepted = sum(counts.values())
    proportions = {c: (n / accepted if accepted else 0.0) for c, n in counts.items()}
    lr = counts.get(0, 0) + counts.get(1, 0)
    if lr:
        ratio, reason = counts.get(1, 0) / lr, None
    else:
        ratio = None
        reason = "no accepted frames" if not accepted else "no class 0 or class 1 frames"
    return SessionReport(len(records), counts, proportions, ratio, reason, rejected,
                         LatencySummary.of([r.latency_ms for r in records]), list(records))


WARMUP = 5


def benchmark(state: NetworkState, repetitions: int = 100, seed: int = 0) -> LatencySummary:
    """Time the infer-mode forward pass on a fixed random 72x72 input."""
    if repetitions < 30:
        raise ValueError("repetitions must be >= 30")
    img = np.random.default_rng(seed).integers(0, 256, (PAIR_SIZE, PAIR_SIZE), dtype=np.uint8)
    for _ in range(WARMUP):
        predict(state, img)
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        predict(state, img)
        samples.append((time.perf_counter() - t0) * 1e3)
    return LatencySummary.of(samples)


def benchmark_pipeline(face_model: CascadeModel, eye_model: CascadeModel, state: NetworkState,
                       frame, repetitions: int = 30,
                       params: FaceEyeParams = FaceEyeParams()) -> LatencySummary:
    """Time the whole per-frame path (grayscale through classification)."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    for _ in range(min(WARMUP, repetitions)):
        classify_frame(face_model, eye_model, state, frame, 0, params)
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        classify_frame(face_model, eye_model, state, frame, 0, params)
        samples.append((time.perf_counter() - t0) * 1e3)
    return LatencySummary.of(samples)
