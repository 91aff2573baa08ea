"""Critical-path latency, its simulation oracle, and concurrency ratios."""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field

from .engine.trace import ActivityTimeline, EpisodeTrace
from .protocol import ErrorClass, EventKind, StreamScanner, step_ends, tokenize

K = EventKind


class UnboundJoin(ValueError):
    pass


class MissingWorkerSteps(KeyError):
    pass


class Deadlock(RuntimeError):
    pass


class LatencyMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ForkMark:
    slot: int
    sub_query_id: int
    steps: int  # organizer steps from fragment start through the ForkClose tag


@dataclass(frozen=True)
class Fragment:
    index: int
    steps: int
    fork_marks: tuple[ForkMark, ...] = ()


@dataclass(frozen=True)
class JoinLink:
    index: int
    fragment: int
    sub_query_id: int
    slot: int


@dataclass(frozen=True)
class FragmentDecomposition:
    fragments: tuple[Fragment, ...]
    joins: tuple[JoinLink, ...]

    @property
    def n_J(self) -> int:
        return len(self.joins)

    @property
    def total_steps(self) -> int:
        return sum(f.steps for f in self.fragments)

    def mark(self, fragment: int, slot: int) -> ForkMark:
        for m in self.fragments[fragment - 1].fork_marks:
            if m.slot == slot:
                return m
        raise UnboundJoin(f"no fork of slot {slot} in fragment {fragment}")


@dataclass(frozen=True)
class LatencyResult:
    l: tuple[int, ...]
    total: int
    per_join_wait: tuple[int, ...] = field(default=())


def _segment_offsets(trace: EpisodeTrace) -> list[int]:
    offsets = [0]
    for b in trace.bindings[: len(trace.segments) - 1]:
        offsets.append(b.splice_end)
    return offsets


def _check_bindings(trace: EpisodeTrace, allow_failed_join: bool) -> None:
    joins = sum(1 for e in trace.events if e.kind is K.JOIN_REQUEST)
    failed = trace.format_error is not None and trace.format_error.error_class is ErrorClass.JOIN_NONEXISTENT
    if failed and not allow_failed_join:
        raise UnboundJoin("trace ends at a join of a nonexistent sub-query")
    if joins - int(failed) != len(trace.bindings):
        raise UnboundJoin(f"{joins} joins but {len(trace.bindings)} bindings")


def decompose(trace: EpisodeTrace) -> FragmentDecomposition:
    """Split the organizer stream at its joins into n_J + 1 fragments."""
    _check_bindings(trace, allow_failed_join=False)
    weigher = trace.config.weigher
    offsets = _segment_offsets(trace)
    seg_ends = [step_ends(s, weigher) for s in trace.segments]
    marks: list[list[ForkMark]] = [[] for _ in range(len(trace.bindings) + 1)]
    slot = 0
    for ev in trace.events:
        if ev.kind is not K.FORK_CLOSE:
            continue
        # decoded events lie inside exactly one segment
        seg = bisect_left(offsets, ev.pos + 1) - 1
        local = bisect_left(seg_ends[seg], ev.end - offsets[seg]) + 1
        marks[seg].append(ForkMark(slot, ev.id, local))
        slot += 1
    fragments = []
    for i in range(len(trace.bindings) + 1):
        steps = len(seg_ends[i]) if i < len(seg_ends) else 0
        fragments.append(Fragment(i + 1, steps, tuple(marks[i])))
    joins = tuple(JoinLink(b.join, b.fragment, b.sub_query_id, b.slot) for b in trace.bindings)
    return FragmentDecomposition(tuple(fragments), joins)


def worker_steps(trace: EpisodeTrace) -> dict[int, int]:
    """Decoded steps per worker slot, counted from the worker's own text."""
    return {w.slot: len(tokenize(w.text, trace.config.weigher)) for w in trace.workers}


def critical_path_latency(decomp: FragmentDecomposition, steps: dict[int, int]) -> LatencyResult:
    l = [0]
    waits = []
    for i, join in enumerate(decomp.joins, 1):
        if join.slot not in steps:
            raise MissingWorkerSteps(join.slot)
        own = l[i - 1] + decomp.fragments[i - 1].steps
        mark = decomp.mark(join.fragment, join.slot)
        dep = l[join.fragment - 1] + mark.steps + steps[join.slot]
        l.append(max(own, dep))
        waits.append(max(0, dep - own))
    l.append(l[-1] + decomp.fragments[-1].steps)
    return LatencyResult(tuple(l), l[-1], tuple(waits))


def trace_latency(trace: EpisodeTrace) -> LatencyResult:
    return critical_path_latency(decompose(trace), worker_steps(trace))


def simulate_latency(trace: EpisodeTrace) -> int:
    """Tick-by-tick replay of the fork/join schedule; returns the organizer's completion tick.

    Works from the raw segment and worker text only, independently of the
    stored stamps and bindings.
    """
    weigher = trace.config.weigher
    durations = [len(tokenize(w.text, weigher)) for w in trace.workers]
    forks: dict[int, list[int]] = {}
    joins: dict[int, int] = {}
    scanner = StreamScanner("organizer", trace.config.syntax)
    n_steps = 0
    slot = 0
    id_slot: dict[int, int] = {}
    for seg in trace.segments:
        ends = step_ends(seg, weigher)
        base = scanner.offset + len(scanner.buffer)
        for ev in scanner.feed(seg):
            step = n_steps + bisect_left(ends, ev.end - base)
            if ev.kind is K.FORK_CLOSE:
                forks.setdefault(step, []).append(slot)
                id_slot[ev.id] = slot
                slot += 1
            elif ev.kind is K.JOIN_REQUEST:
                if ev.id not in id_slot:
                    raise Deadlock(f"join of unknown sub-query {ev.id}")
                joins[step] = id_slot.pop(ev.id)
        n_steps += len(ends)
        # spliced text between segments is not decoded and not scanned
        scanner = StreamScanner("organizer", trace.config.syntax, offset=scanner.offset + len(scanner.buffer))

    t = 0
    pos = 0
    last = 0
    waiting: int | None = None
    running: dict[int, int] = {}
    done_at: dict[int, int] = {}
    while True:
        if waiting is not None and waiting in done_at:
            last = max(last, done_at[waiting])
            waiting = None
        if waiting is None and pos == n_steps:
            return last
        if waiting is not None and not running:
            raise Deadlock(f"organizer waits on slot {waiting}, which never runs")
        t += 1
        decoding = waiting is None
        if decoding:
            step = pos
            pos += 1
            last = t
        for s in list(running):
            running[s] -= 1
            if running[s] == 0:
                done_at[s] = t
                del running[s]
        if decoding:
            for s in forks.get(step, ()):
                if s >= len(durations):
                    raise Deadlock(f"fork slot {s} has no worker record")
                if durations[s]:
                    running[s] = durations[s]
                else:
                    done_at[s] = t
            if step in joins:
                waiting = joins[step]


def concurrency_ratio(timeline: ActivityTimeline, capacity: int) -> tuple[float, float]:
    if timeline.T < 1:
        raise ValueError("timeline is empty")
    eta = timeline.total / timeline.T
    return eta, eta / capacity


CSV_COLUMNS = ("episode_id", "total_latency", "simulated_latency", "eta", "rho", "n_J", "n_forks", "format_error")


def analyze_trace(trace: EpisodeTrace) -> dict:
    """One CSV row; latency columns stay empty when joins are unbound."""
    err = trace.format_error.error_class.value if trace.format_error else ""
    row = {
        "episode_id": trace.episode_id,
        "total_latency": "",
        "simulated_latency": "",
        "eta": "",
        "rho": "",
        "n_J": len(trace.bindings),
        "n_forks": len(trace.workers),
        "format_error": "aborted" if trace.aborted else err,
    }
    if trace.activity.T:
        eta, rho = concurrency_ratio(trace.activity, trace.config.capacity)
        row["eta"], row["rho"] = round(eta, 12), round(rho, 12)
    if trace.aborted:
        return row
    try:
        dp = trace_latency(trace).total
    except UnboundJoin:
        return row
    sim = simulate_latency(trace)
    if dp != sim:
        raise LatencyMismatch(f"episode {trace.episode_id!r}: DP latency {dp} != simulated {sim}")
    row["total_latency"], row["simulated_latency"] = dp, sim
    return row


def to_dot(trace: EpisodeTrace) -> str:
    """Fork/join DAG: fragments and workers as nodes, edges labeled with step counts."""
    decomp = decompose(trace)
    steps = worker_steps(trace)
    lat = critical_path_latency(decomp, steps)
    name = trace.episode_id or "episode"
    lines = [f'digraph "{name}" {{', "  rankdir=LR;"]
    for frag in decomp.fragments:
        lines.append(f'  F{frag.index} [shape=box,label="fragment {frag.index}\\nf={frag.steps}\\nl={lat.l[frag.index]}"];')
    for w in trace.workers:
        lines.append(f'  W{w.slot} [shape=ellipse,label="worker {w.sub_query_id} (slot {w.slot})\\n{steps[w.slot]} steps"];')
    for frag in decomp.fragments[:-1]:
        lines.append(f'  F{frag.index} -> F{frag.index + 1} [label="{frag.steps}"];')
    for frag in decomp.fragments:
        for m in frag.fork_marks:
            lines.append(f'  F{frag.index} -> W{m.slot} [style=dashed,label="fork @{m.steps}"];')
    for join, wait in zip(decomp.joins, lat.per_join_wait):
        lines.append(f'  W{join.slot} -> F{join.index + 1} [label="join {join.index}, wait {wait}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
