"""Rule-based rewards and group-relative advantage batches."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .engine.trace import EpisodeTrace
from .metrics import _check_bindings, concurrency_ratio
from .tasks.countdown import CountdownInstance, count_correct


@dataclass(frozen=True)
class RewardConfig:
    tau: float = 0.5
    lam: float = 0.5
    r_fe: float = -1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.r_fe > 0:
            raise ValueError("r_fe must be <= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "lambda": self.lam, "r_fe": self.r_fe, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        return cls(
            tau=float(d.get("tau", 0.5)),
            lam=float(d.get("lambda", d.get("lam", 0.5))),
            r_fe=float(d.get("r_fe", -1.0)),
            epsilon=float(d.get("epsilon", 1e-6)),
        )


@dataclass(frozen=True)
class EpisodeReward:
    accuracy: float
    concurrency: float
    has_format_error: bool
    combined: float
    error_class: str | None = None

    def to_dict(self) -> dict:
        return {"R_A": self.accuracy, "R_eta": self.concurrency, "R_i": self.combined, "error_class": self.error_class}


def _as_fraction(text: str) -> Fraction | None:
    s = text.strip().replace(" ", "")
    if s.startswith("\\boxed{") and s.endswith("}"):
        s = s[7:-1]
    s = s.strip("$")
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def accuracy_binary(predicted: str | None, gold: str) -> float:
    """1.0 when the answers agree, comparing as exact rationals when both parse."""
    if predicted is None:
        return 0.0
    p, g = _as_fraction(predicted), _as_fraction(gold)
    if p is not None and g is not None:
        return float(p == g)
    return float(predicted.strip() == gold.strip())


def accuracy_multi(predicted: Iterable[str], instance: CountdownInstance, n_s: int | None = None, *, strict: bool = False) -> float:
    """min(n_c, n_s) / n_s with n_c the count of valid, mutually distinct solutions."""
    n_s = instance.n_s if n_s is None else n_s
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    n_c = count_correct(predicted, instance, strict=strict)
    return min(n_c, n_s) / n_s


def concurrency_reward(rho: float, config: RewardConfig = RewardConfig()) -> float:
    return min(rho, config.tau) / config.tau


def combine(accuracy: float, concurrency: float, has_format_error: bool, config: RewardConfig = RewardConfig()) -> float:
    if has_format_error:
        return config.r_fe
    return accuracy + config.lam * concurrency


def score_episode(trace: EpisodeTrace, accuracy: float, config: RewardConfig = RewardConfig()) -> EpisodeReward:
    """Combine a precomputed accuracy with the trace's concurrency and format status."""
    broken = trace.format_error is not None or trace.aborted
    r_eta = 0.0
    if trace.activity.T:
        r_eta = concurrency_reward(concurrency_ratio(trace.activity, trace.config.capacity)[1], config)
    err = trace.format_error.error_class.value if trace.format_error else ("aborted" if trace.aborted else None)
    return EpisodeReward(accuracy, r_eta, broken, combine(accuracy, r_eta, broken, config), err)


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-6) -> list[float]:
    """(R - mean) / (std + epsilon) with population std; all zeros when std <= epsilon."""
    if len(rewards) < 2:
        raise ValueError("a group needs at least two rewards")
    r = np.asarray(rewards, dtype=np.float64)
    std = float(r.std())
    if not math.isfinite(std) or std <= epsilon:
        return [0.0] * len(r)
    return ((r - r.mean()) / (std + epsilon)).tolist()


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    include: bool

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "include": self.include}


@dataclass(frozen=True)
class TraceRecord:
    role: str  # "organizer" or "worker"
    slot: int | None
    text: str
    spans: tuple[Span, ...]
    advantage: float = 0.0

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "slot": self.slot,
            "text": self.text,
            "spans": [s.to_dict() for s in self.spans],
            "advantage": self.advantage,
        }


@dataclass(frozen=True)
class AdvantageBatch:
    episode_id: str
    group_id: str
    records: tuple[TraceRecord, ...]

    def with_advantage(self, value: float) -> "AdvantageBatch":
        recs = tuple(TraceRecord(r.role, r.slot, r.text, r.spans, value) for r in self.records)
        return AdvantageBatch(self.episode_id, self.group_id, recs)


def token_masks(trace: EpisodeTrace, advantage: float = 0.0) -> AdvantageBatch:
    """Loss-mask spans: merged payloads and their join-close tags are excluded.

    Offsets are character positions in each record's text; the organizer text
    is the full context after the prompt.
    """
    _check_bindings(trace, allow_failed_join=True)
    text = trace.organizer_text
    spans = []
    cursor = 0
    for b in trace.bindings:
        if b.splice_start > cursor:
            spans.append(Span(cursor, b.splice_start, True))
        spans.append(Span(b.splice_start, b.splice_end, False))
        cursor = b.splice_end
    if cursor < len(text):
        spans.append(Span(cursor, len(text), True))
    records = [TraceRecord("organizer", None, text, tuple(spans), advantage)]
    for w in trace.workers:
        wspans = (Span(0, len(w.text), True),) if w.text else ()
        records.append(TraceRecord("worker", w.slot, w.text, wspans, advantage))
    return AdvantageBatch(trace.episode_id, trace.group_id, tuple(records))
