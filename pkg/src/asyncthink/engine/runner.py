"""Episode execution under the logical clock, replay and activity accounting.

Clock rules: every decoding agent advances one step per tick.  A worker
starts on the tick after its ForkClose is decoded.  At a Join the organizer
stops decoding; the payload is merged at ``max(join tick, worker end tick)``
for free and the organizer resumes on the following tick.
"""

from __future__ import annotations

from bisect import bisect_left
from concurrent.futures import Future, ThreadPoolExecutor

from .. import kernels
from ..backends.base import (
    ORGANIZER_STOPS,
    WORKER_STOPS,
    Backend,
    BackendFailure,
    GenerationRequest,
)
from ..backends.prompts import organizer_prompt, worker_prompt
from ..protocol import (
    ErrorClass,
    EventKind,
    FormatError,
    FormatValidator,
    ProtocolEvent,
    StreamScanner,
    clip,
    scan_stream,
    step_ends,
    tokenize,
)
from .trace import (
    FINISHED,
    TRUNCATED,
    ActivityTimeline,
    EpisodeConfig,
    EpisodeTrace,
    JoinBinding,
    TraceEvent,
    WorkerSlot,
)

K = EventKind


class ReplayDivergence(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"replay diverges at step {step}: {detail}")
        self.step = step
        self.detail = detail


class _Done(Future):
    def __init__(self, fn, *args):
        super().__init__()
        try:
            self.set_result(fn(*args))
        except BaseException as exc:  # surfaced at .result()
            self.set_exception(exc)


def _return_payload(text: str, syntax) -> tuple[str, bool]:
    events = scan_stream([text], "worker", syntax)[0]
    opened = None
    for ev in events:
        if ev.kind is K.RETURN_OPEN and opened is None:
            opened = ev
        elif ev.kind is K.RETURN_CLOSE and opened is not None:
            return text[opened.end : ev.position], True
    return "", False


class _Episode:
    def __init__(self, backend: Backend, query: str, config: EpisodeConfig, episode_id: str, group_id: str):
        self.backend = backend
        self.cfg = config
        self.syntax = config.syntax
        self.prompt = organizer_prompt(config.instruction, query, config.capacity, config.syntax)
        self.trace = EpisodeTrace(query, config, episode_id=episode_id, group_id=group_id)
        self.scanner = StreamScanner("organizer", config.syntax)
        self.validator = FormatValidator(config.capacity)
        self.context = ""
        self.tick = 0
        self.fragment = 1
        self.handle = None
        self.active: dict[int, int] = {}  # sub-query id -> slot
        self.fork_fragment: dict[int, int] = {}
        self.futures: dict[int, Future] = {}
        self.pool = ThreadPoolExecutor(config.capacity - 1) if getattr(backend, "concurrent", False) else None
        self.open_fork: ProtocolEvent | None = None
        self.open_answer: ProtocolEvent | None = None

    # workers ---------------------------------------------------------------

    def _generate_worker(self, request: GenerationRequest):
        return self.backend.generate(request)

    def _dispatch(self, fork_close: ProtocolEvent, close_tick: int):
        sub_query = self.context[self.open_fork.end : fork_close.position]
        slot = len(self.trace.workers)
        self.trace.workers.append(WorkerSlot(slot, fork_close.id, sub_query, start_step=close_tick + 1))
        self.active[fork_close.id] = slot
        self.fork_fragment[slot] = self.fragment
        request = GenerationRequest(
            role="worker",
            prompt=worker_prompt(self.cfg.instruction, sub_query if sub_query.strip() else "(empty)", self.syntax),
            max_steps=self.cfg.worker_budget,
            stop_conditions=WORKER_STOPS,
            slot=slot,
            seed=self.cfg.seed,
            capacity=self.cfg.capacity,
            syntax=self.syntax,
            weigher=self.cfg.weigher,
        )
        if self.pool is not None:
            self.futures[slot] = self.pool.submit(self._generate_worker, request)
        else:
            self.futures[slot] = _Done(self._generate_worker, request)

    def _settle(self, slot: int) -> WorkerSlot:
        worker = self.trace.workers[slot]
        fut = self.futures.pop(slot, None)
        if fut is None:
            return worker
        result = fut.result()
        self.trace.retries += result.retries
        text, _ = clip(result.text, "worker", WORKER_STOPS, self.cfg.worker_budget, self.syntax, self.cfg.weigher)
        payload, complete = _return_payload(text, self.syntax)
        worker.text = text
        worker.payload = payload
        worker.state = FINISHED if complete else TRUNCATED
        worker.end_step = worker.start_step + len(tokenize(text, self.cfg.weigher)) - 1
        return worker

    # organizer -------------------------------------------------------------

    def _stamp(self, ev: ProtocolEvent, seg_pos: int, ends: list[int], first_tick: int) -> int:
        return first_tick + bisect_left(ends, ev.end - seg_pos)

    def _fail(self, err: FormatError):
        self.trace.format_error = err

    def run(self) -> EpisodeTrace:
        try:
            self._loop()
            for slot in list(self.futures):
                self._settle(slot)
        except BackendFailure as exc:
            self.trace.aborted = True
            for slot in list(self.futures):
                try:
                    self._settle(slot)
                except BackendFailure:
                    self.futures.pop(slot, None)
            self._close()
            exc.trace = self.trace
            raise
        finally:
            if self.pool is not None:
                self.pool.shutdown(wait=True, cancel_futures=True)
        self._close()
        return self.trace

    def _close(self):
        t = self.trace
        t.T = self.tick
        t.activity = activity_timeline(t)

    def _loop(self):
        cfg = self.cfg
        while True:
            budget = min(cfg.organizer_segment_budget, cfg.max_total_steps - self.tick)
            if budget < 1:
                self._fail(FormatError(ErrorClass.MISSING_FINAL_ANSWER, len(self.context), "global step budget exhausted"))
                return
            request = GenerationRequest(
                role="organizer",
                prompt=self.prompt,
                max_steps=budget,
                stop_conditions=ORGANIZER_STOPS,
                context=self.context,
                stream_handle=self.handle,
                seed=cfg.seed,
                capacity=cfg.capacity,
                syntax=self.syntax,
                weigher=cfg.weigher,
            )
            result = self.backend.generate(request)
            self.handle = result.stream_handle
            self.trace.retries += result.retries
            seg, _ = clip(result.text, "organizer", ORGANIZER_STOPS, budget, self.syntax, cfg.weigher)
            if self._segment(seg):
                return

    def _segment(self, seg: str) -> bool:
        """Consume one organizer segment; True when the episode is over."""
        seg_pos = len(self.context)
        events = self.scanner.feed(seg)
        stopped = bool(events) and events[-1].kind in ORGANIZER_STOPS and events[-1].end == seg_pos + len(seg)
        if not stopped:
            events += self.scanner.finish()

        err = None
        for n, ev in enumerate(events):
            err = self.validator.push(ev)
            if err is not None:
                events = events[: n + 1]
                seg = seg[: ev.end - seg_pos]
                break

        ends = step_ends(seg, self.cfg.weigher)
        first_tick = self.tick + 1
        self.trace.segments.append(seg)
        self.trace.segment_starts.append(first_tick)
        self.context += seg
        if ends:
            self.tick += len(ends)

        for ev in events:
            step = self._stamp(ev, seg_pos, ends, first_tick)
            self.trace.events.append(TraceEvent(ev.kind, ev.id, ev.text, ev.position, step))
            if ev is events[-1] and err is not None:
                break
            if ev.kind is K.FORK_OPEN:
                self.open_fork = ev
            elif ev.kind is K.FORK_CLOSE:
                self._dispatch(ev, step)
                self.open_fork = None
            elif ev.kind is K.ANSWER_OPEN:
                self.open_answer = ev
            elif ev.kind is K.ANSWER_CLOSE:
                self.trace.final_answer = self.context[self.open_answer.end : ev.position]
                return True
            elif ev.kind is K.JOIN_REQUEST:
                self._merge(ev, step)

        if err is not None:
            self._fail(err)
            return True
        if not stopped:
            self._fail(self.validator.finish())
            return True
        return False

    def _merge(self, ev: ProtocolEvent, join_tick: int):
        slot = self.active.pop(ev.id)
        worker = self._settle(slot)
        merge_tick = max(join_tick, worker.end_step)
        close_tag = self.syntax.render(K.JOIN_MERGE_END, ev.id)
        start = len(self.context)
        if worker.payload:
            payload_ev = ProtocolEvent(K.THINK, None, worker.payload, start)
            self.trace.events.append(TraceEvent(K.THINK, None, worker.payload, start, merge_tick))
            self.validator.push(payload_ev)
        end_ev = ProtocolEvent(K.JOIN_MERGE_END, ev.id, close_tag, start + len(worker.payload))
        self.trace.events.append(TraceEvent(K.JOIN_MERGE_END, ev.id, close_tag, end_ev.position, merge_tick))
        self.validator.push(end_ev)
        self.context += worker.payload + close_tag
        self.scanner.offset += len(worker.payload) + len(close_tag)
        self.trace.bindings.append(
            JoinBinding(
                join=len(self.trace.bindings) + 1,
                pos=ev.position,
                fragment=self.fork_fragment[slot],
                sub_query_id=ev.id,
                slot=slot,
                merge_step=merge_tick,
                splice_start=start,
                splice_end=len(self.context),
            )
        )
        self.fragment += 1
        self.tick = merge_tick


def run_episode(
    backend: Backend,
    query: str,
    config: EpisodeConfig | None = None,
    *,
    episode_id: str = "",
    group_id: str = "",
) -> EpisodeTrace:
    """Run one organizer/worker episode and return its complete trace.

    Raises BackendFailure (with ``.trace`` holding the partial, aborted
    record) when the backend cannot produce text.
    """
    if not query or not query.strip():
        raise ValueError("query must be nonempty")
    return _Episode(backend, query, config or EpisodeConfig(), episode_id, group_id).run()


def activity_timeline(trace: EpisodeTrace, *, include_organizer: bool = True) -> ActivityTimeline:
    """a_t for t = 1..T: decoding organizer (optional) plus running workers."""
    starts, ends = [], []
    if include_organizer:
        for seg, first in zip(trace.segments, trace.segment_starts):
            n = len(tokenize(seg, trace.config.weigher))
            if n:
                starts.append(first)
                ends.append(first + n - 1)
    for w in trace.workers:
        starts.append(w.start_step)
        ends.append(w.end_step)
    counts = kernels.interval_counts(starts, ends, trace.T)
    return ActivityTimeline(tuple(int(a) for a in counts))


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def _first_divergence(a: EpisodeTrace, b: EpisodeTrace) -> tuple[int, str] | None:
    found: list[tuple[int, str]] = []
    for n, (x, y) in enumerate(zip(a.events, b.events)):
        if x != y:
            found.append((min(x.step, y.step), f"organizer event {n}: {x} != {y}"))
            break
    if len(a.events) != len(b.events):
        n = min(len(a.events), len(b.events))
        tail = (a.events[n:] or b.events[n:])[0]
        found.append((tail.step, f"organizer event count {len(a.events)} != {len(b.events)}"))
    for x, y in zip(a.workers, b.workers):
        if x.start_step != y.start_step:
            found.append((min(x.start_step, y.start_step), f"worker slot {x.slot} start"))
        elif x.end_step != y.end_step:
            found.append((min(x.end_step, y.end_step) + 1, f"worker slot {x.slot} end"))
        elif x != y:
            found.append((x.start_step, f"worker slot {x.slot} output"))
    if len(a.workers) != len(b.workers):
        found.append((0, f"worker count {len(a.workers)} != {len(b.workers)}"))
    for t, (x, y) in enumerate(zip(a.activity.counts, b.activity.counts), 1):
        if x != y:
            found.append((t, f"activity a_{t}: {x} != {y}"))
            break
    if a.T != b.T:
        found.append((min(a.T, b.T) + 1, f"T {a.T} != {b.T}"))
    if not found and a.to_json() != b.to_json():
        found.append((0, "record fields differ"))
    return min(found) if found else None


def replay(trace: EpisodeTrace) -> EpisodeTrace:
    """Re-run ``trace`` from its recorded outputs; raise ReplayDivergence on any mismatch."""
    from ..backends.scripted import scripted_backend

    backend = scripted_backend(trace)
    try:
        again = run_episode(backend, trace.query, trace.config, episode_id=trace.episode_id, group_id=trace.group_id)
    except BackendFailure as exc:
        partial = exc.trace
        if trace.aborted and partial is not None:
            partial.retries = trace.retries
            partial.meta = dict(trace.meta)
            diff = _first_divergence(trace, partial)
            if diff is None:
                return partial
        raise ReplayDivergence(partial.T + 1 if partial else 0, f"backend failure: {exc}") from exc
    again.retries = trace.retries
    again.meta = dict(trace.meta)
    diff = _first_divergence(trace, again)
    if diff is not None:
        raise ReplayDivergence(*diff)
    return again
