"""Episode records and their JSONL form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from ..backends.prompts import GENERIC_INSTRUCTION
from ..protocol import EventKind, FormatError, ProtocolEvent, TagSyntax, scan_stream, tokenize

SCHEMA = "asyncthink-trace/1"

RUNNING, FINISHED, TRUNCATED = "Running", "Finished", "Truncated"


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class EpisodeConfig:
    capacity: int = 2
    worker_budget: int = 512
    organizer_segment_budget: int = 512
    max_total_steps: int = 8192
    syntax: TagSyntax = field(default_factory=TagSyntax)
    seed: int = 0
    weigher: str = "pieces"
    instruction: str = GENERIC_INSTRUCTION

    def __post_init__(self):
        if self.capacity < 2:
            raise ValueError("capacity must be >= 2")
        for name in ("worker_budget", "organizer_segment_budget", "max_total_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_total_steps < self.organizer_segment_budget:
            raise ValueError("max_total_steps must be >= organizer_segment_budget")
        tokenize("", self.weigher)

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "worker_budget": self.worker_budget,
            "organizer_segment_budget": self.organizer_segment_budget,
            "max_total_steps": self.max_total_steps,
            "syntax": self.syntax.to_dict(),
            "seed": self.seed,
            "weigher": self.weigher,
            "instruction": self.instruction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        kw = dict(d)
        kw["syntax"] = TagSyntax.from_dict(d["syntax"]) if "syntax" in d else TagSyntax()
        return cls(**kw)


@dataclass(frozen=True)
class TraceEvent:
    """Organizer event with the logical tick at which its last character exists."""

    kind: EventKind
    id: int | None
    text: str
    pos: int
    step: int

    @property
    def event(self) -> ProtocolEvent:
        return ProtocolEvent(self.kind, self.id, self.text, self.pos)

    @property
    def end(self) -> int:
        return self.pos + len(self.text)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "id": self.id, "text": self.text, "pos": self.pos, "step": self.step}

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        return cls(EventKind(d["kind"]), d["id"], d["text"], d["pos"], d["step"])


@dataclass
class WorkerSlot:
    slot: int  # dispatch ordinal, unique per episode even when ids are reused
    sub_query_id: int
    sub_query: str
    text: str = ""
    state: str = RUNNING
    start_step: int = 0
    end_step: int = 0
    payload: str = ""

    @property
    def steps(self) -> int:
        return self.end_step - self.start_step + 1

    def output_events(self, syntax: TagSyntax | None = None) -> list[ProtocolEvent]:
        return scan_stream([self.text], "worker", syntax)[0]

    def to_dict(self) -> dict:
        return {
            "slot": self.slot,
            "id": self.sub_query_id,
            "sub_query": self.sub_query,
            "text": self.text,
            "state": self.state,
            "start_step": self.start_step,
            "end_step": self.end_step,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkerSlot":
        return cls(d["slot"], d["id"], d["sub_query"], d["text"], d["state"], d["start_step"], d["end_step"], d["payload"])


@dataclass(frozen=True)
class JoinBinding:
    join: int  # 1-based join index i
    pos: int  # character offset of the JoinRequest tag
    fragment: int  # fragment j holding the bound fork
    sub_query_id: int
    slot: int
    merge_step: int
    splice_start: int
    splice_end: int

    def to_dict(self) -> dict:
        return {
            "join": self.join,
            "pos": self.pos,
            "fragment": self.fragment,
            "id": self.sub_query_id,
            "slot": self.slot,
            "merge_step": self.merge_step,
            "splice": [self.splice_start, self.splice_end],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JoinBinding":
        a, b = d["splice"]
        return cls(d["join"], d["pos"], d["fragment"], d["id"], d["slot"], d["merge_step"], a, b)


@dataclass(frozen=True)
class ActivityTimeline:
    counts: tuple[int, ...]

    @property
    def T(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def rle(self) -> list[list[int]]:
        out: list[list[int]] = []
        for a in self.counts:
            if out and out[-1][0] == a:
                out[-1][1] += 1
            else:
                out.append([a, 1])
        return out

    @classmethod
    def from_rle(cls, runs) -> "ActivityTimeline":
        counts: list[int] = []
        for value, n in runs:
            counts.extend([int(value)] * int(n))
        return cls(tuple(counts))


@dataclass
class EpisodeTrace:
    query: str
    config: EpisodeConfig
    segments: list[str] = field(default_factory=list)
    segment_starts: list[int] = field(default_factory=list)
    events: list[TraceEvent] = field(default_factory=list)
    workers: list[WorkerSlot] = field(default_factory=list)
    bindings: list[JoinBinding] = field(default_factory=list)
    final_answer: str | None = None
    format_error: FormatError | None = None
    aborted: bool = False
    T: int = 0
    activity: ActivityTimeline = ActivityTimeline(())
    episode_id: str = ""
    group_id: str = ""
    retries: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def organizer_text(self) -> str:
        """Full organizer context after the prompt: decoded segments with merged payloads."""
        parts = []
        splices = {b.join - 1: b for b in self.bindings}
        for i, seg in enumerate(self.segments):
            parts.append(seg)
            b = splices.get(i)
            if b is not None:
                parts.append(self.splice_text(b))
        return "".join(parts)

    def splice_text(self, binding: JoinBinding) -> str:
        worker = self.workers[binding.slot]
        return worker.payload + self.config.syntax.render(EventKind.JOIN_MERGE_END, binding.sub_query_id)

    @property
    def organizer_steps(self) -> int:
        return sum(len(tokenize(s, self.config.weigher)) for s in self.segments)

    @property
    def protocol_events(self) -> list[ProtocolEvent]:
        return [e.event for e in self.events]

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "episode_id": self.episode_id,
            "group_id": self.group_id,
            "query": self.query,
            "config": self.config.to_dict(),
            "organizer": {
                "segments": list(self.segments),
                "segment_starts": list(self.segment_starts),
                "events": [e.to_dict() for e in self.events],
            },
            "workers": [w.to_dict() for w in self.workers],
            "bindings": [b.to_dict() for b in self.bindings],
            "answer": self.final_answer,
            "error": self.format_error.to_dict() if self.format_error else None,
            "aborted": self.aborted,
            "T": self.T,
            "activity": self.activity.rle(),
            "retries": self.retries,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeTrace":
        if d.get("schema") != SCHEMA:
            raise SchemaError(f"unsupported schema {d.get('schema')!r}")
        org = d["organizer"]
        return cls(
            query=d["query"],
            config=EpisodeConfig.from_dict(d["config"]),
            segments=list(org["segments"]),
            segment_starts=list(org["segment_starts"]),
            events=[TraceEvent.from_dict(e) for e in org["events"]],
            workers=[WorkerSlot.from_dict(w) for w in d["workers"]],
            bindings=[JoinBinding.from_dict(b) for b in d["bindings"]],
            final_answer=d["answer"],
            format_error=FormatError.from_dict(d["error"]) if d["error"] else None,
            aborted=d["aborted"],
            T=d["T"],
            activity=ActivityTimeline.from_rle(d["activity"]),
            episode_id=d.get("episode_id", ""),
            group_id=d.get("group_id", ""),
            retries=d.get("retries", 0),
            meta=d.get("meta", {}),
        )

    @classmethod
    def from_json(cls, line: str) -> "EpisodeTrace":
        return cls.from_dict(json.loads(line))


def load_traces(path) -> list[EpisodeTrace]:
    """Read a JSONL trace file; malformed lines raise SchemaError naming the line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EpisodeTrace.from_json(line))
            except SchemaError as exc:
                raise SchemaError(str(exc), lineno) from None
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise SchemaError(f"{type(exc).__name__}: {exc}", lineno) from None
    return out


def write_traces(path, traces, mode: str = "w") -> None:
    with open(path, mode, encoding="utf-8") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
