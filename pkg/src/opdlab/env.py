"""Toy temporal-grounding world.

A "video" is a sequence of feature symbols; the query is one symbol and the
ground truth is the single contiguous run of that symbol. Policies answer by
emitting ``start SEP end EOS`` in base-10 digit tokens, with positions measured
in time bins and both endpoints inclusive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_DIGITS = 10
SEP = 10
EOS = 11
VOCAB_SIZE = 12
TOKEN_NAMES = tuple(str(i) for i in range(N_DIGITS)) + ("SEP", "EOS")

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


class ConfigError(ValueError):
    """Raised for inconsistent or out-of-range configuration values."""


@dataclass(frozen=True, order=True)
class Interval:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid interval [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class DecodeFailure:
    """A rollout that does not parse to a valid interval. Scores as IoU 0."""

    reason: str = ""


@dataclass(frozen=True)
class EnvConfig:
    video_length: int = 20
    n_symbols: int = 4
    min_span: int = 3
    max_span: int = 6
    max_digits: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.video_length < 1:
            raise ConfigError("video_length must be >= 1")
        if self.n_symbols < 2:
            raise ConfigError("n_symbols must be >= 2")
        if self.min_span < 1:
            raise ConfigError("min_span must be >= 1")
        if self.max_span < self.min_span:
            raise ConfigError("max_span must be >= min_span")
        if self.max_span > self.video_length:
            raise ConfigError(
                f"max_span={self.max_span} exceeds video_length={self.video_length}")
        if self.max_digits < 1:
            raise ConfigError("max_digits must be >= 1")
        if len(str(self.video_length - 1)) > self.max_digits:
            raise ConfigError(
                f"video_length={self.video_length} needs more than "
                f"max_digits={self.max_digits} digits per boundary")


@dataclass(frozen=True)
class GroundingInstance:
    id: str
    context: tuple[int, ...]
    query: int
    gt: Interval
    video_length: int
    # run location cached for the policy feature map
    run: Interval = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(int(c) for c in self.context))
        if len(self.context) != self.video_length:
            raise ValueError("context length must equal video_length")
        if self.gt.end > self.video_length - 1:
            raise ValueError("gt outside the video")
        object.__setattr__(self, "run", locate_run(self.context, self.query))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "context": list(self.context),
            "query": int(self.query),
            "gt_start": int(self.gt.start),
            "gt_end": int(self.gt.end),
            "video_length": int(self.video_length),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GroundingInstance":
        return cls(
            id=str(rec["id"]),
            context=tuple(rec["context"]),
            query=int(rec["query"]),
            gt=Interval(int(rec["gt_start"]), int(rec["gt_end"])),
            video_length=int(rec["video_length"]),
        )


def locate_run(context: Sequence[int], query: int) -> Interval:
    """First maximal run of ``query`` in ``context``."""
    hits = [i for i, c in enumerate(context) if c == query]
    if not hits:
        raise ValueError("query symbol does not occur in context")
    start = hits[0]
    end = start
    while end + 1 < len(context) and context[end + 1] == query:
        end += 1
    return Interval(start, end)


def generate_instance(seed, cfg: EnvConfig, instance_id: str | None = None) -> GroundingInstance:
    """Deterministic instance for ``seed`` (an int or a sequence of ints)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    L = cfg.video_length
    span = int(rng.integers(cfg.min_span, cfg.max_span + 1))
    start = int(rng.integers(0, L - span + 1))
    query = int(rng.integers(cfg.n_symbols))
    # non-query symbols only, so the gt run is the sole occurrence of the query
    others = np.array([s for s in range(cfg.n_symbols) if s != query])
    context = others[rng.integers(len(others), size=L)]
    context[start:start + span] = query
    if instance_id is None:
        instance_id = f"inst-{seed}" if np.isscalar(seed) else "inst-" + "-".join(map(str, seed))
    return GroundingInstance(
        id=instance_id,
        context=tuple(int(c) for c in context),
        query=query,
        gt=Interval(start, start + span - 1),
        video_length=L,
    )


def generate_pool(seed: int, n: int, cfg: EnvConfig, split: str = "train") -> list[GroundingInstance]:
    tag = _split_tag(split)
    return [generate_instance([seed, tag, i], cfg, instance_id=f"{split}-{seed}-{i:05d}")
            for i in range(n)]


def _split_tag(split: str) -> int:
    return int.from_bytes(split.encode()[:8].ljust(8, b"\0"), "little") % (2 ** 31)


# --- digit grammar ---------------------------------------------------------

def encode_number(x: int) -> list[int]:
    return [int(ch) for ch in str(int(x))]


def encode_interval(interval: Interval, max_digits: int = 2) -> list[int]:
    """Canonical tokens ``start SEP end EOS`` (no leading zeros)."""
    s, e = encode_number(interval.start), encode_number(interval.end)
    if len(s) > max_digits or len(e) > max_digits:
        raise ValueError(f"{interval} does not fit in {max_digits} digits")
    return s + [SEP] + e + [EOS]


def decode_trajectory(tokens: Sequence[int], video_length: int,
                      max_digits: int = 2) -> Interval | DecodeFailure:
    """Parse ``D+ SEP D+ EOS``; any violation is returned as a DecodeFailure."""
    toks = [int(t) for t in tokens]
    if not toks or toks[-1] != EOS:
        return DecodeFailure("missing EOS")
    body = toks[:-1]
    if EOS in body:
        return DecodeFailure("tokens after EOS")
    if body.count(SEP) != 1:
        return DecodeFailure("expected exactly one SEP")
    k = body.index(SEP)
    left, right = body[:k], body[k + 1:]
    for part in (left, right):
        if not 1 <= len(part) <= max_digits:
            return DecodeFailure("bad digit count")
    start = int("".join(map(str, left)))
    end = int("".join(map(str, right)))
    if start > end:
        return DecodeFailure("start > end")
    if end >= video_length:
        return DecodeFailure("end outside video")
    return Interval(start, end)


# --- metrics ---------------------------------------------------------------

def iou(a: Interval, b: Interval) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start) + 1
    return inter / union


def timestamp_aware_iou(pred: Interval, gt: Interval, video_length: int) -> float:
    """IoU scaled down by the normalized boundary deviation."""
    dev = abs(pred.start - gt.start) + abs(pred.end - gt.end)
    factor = 1.0 - dev / (2.0 * video_length)
    return float(min(1.0, max(0.0, iou(pred, gt) * factor)))


def prediction_iou(pred: Interval | DecodeFailure, gt: Interval) -> float:
    if isinstance(pred, DecodeFailure):
        return 0.0
    return iou(pred, gt)


def reward(pred: Interval | DecodeFailure, gt: Interval, video_length: int,
           kind: str = "timestamp_aware_iou") -> float:
    if isinstance(pred, DecodeFailure):
        return 0.0
    if kind == "iou":
        return iou(pred, gt)
    if kind == "timestamp_aware_iou":
        return timestamp_aware_iou(pred, gt, video_length)
    raise ConfigError(f"unknown reward kind {kind!r}")


@dataclass
class EvalReport:
    recall_at: dict[float, float]
    mean_iou: float
    n_instances: int

    def to_dict(self) -> dict:
        return {
            "recall_at": {f"{k:g}": v for k, v in sorted(self.recall_at.items())},
            "mean_iou": self.mean_iou,
            "n_instances": self.n_instances,
        }

    def table(self) -> str:
        heads = [f"R@{k:g}" for k in sorted(self.recall_at)] + ["mIoU", "n"]
        vals = [f"{100 * self.recall_at[k]:.1f}" for k in sorted(self.recall_at)]
        vals += [f"{100 * self.mean_iou:.1f}", str(self.n_instances)]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        row = lambda xs: " | ".join(x.rjust(w) for x, w in zip(xs, widths))
        return "\n".join([row(heads), "-+-".join("-" * w for w in widths), row(vals)])


def evaluate(predictions: Sequence[Interval | DecodeFailure], gts: Sequence[Interval],
             thresholds: Iterable[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    if len(predictions) != len(gts):
        raise ValueError("predictions and gts differ in length")
    if not gts:
        raise ValueError("cannot evaluate an empty set")
    ious = np.array([prediction_iou(p, g) for p, g in zip(predictions, gts)])
    recall = {float(th): float(np.mean(ious >= th)) for th in thresholds}
    return EvalReport(recall_at=recall, mean_iou=float(ious.mean()), n_instances=len(gts))


# --- persistence -----------------------------------------------------------

def save_pool(path, instances: Iterable[GroundingInstance], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header is not None:
            f.write(json.dumps({"_header": header}) + "\n")
        for inst in instances:
            f.write(json.dumps(inst.to_record()) + "\n")


def load_pool(path) -> list[GroundingInstance]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "_header" in rec:
            continue
        out.append(GroundingInstance.from_record(rec))
    return out
