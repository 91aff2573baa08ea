"""Backend that plays back recorded organizer and worker text."""

from __future__ import annotations

from typing import Mapping, Sequence

from .base import ExhaustedScript, GenerationRequest, GenerationResult, finalize


class ScriptedBackend:
    """Replays fixed outputs.

    ``organizer`` is either one string consumed by a cursor (each request
    returns text up to the next stop tag) or a list of per-segment strings.
    Workers are looked up by dispatch slot.  All position state travels in the
    stream handle, so one instance can serve many episodes.
    """

    concurrent = False

    def __init__(self, organizer: str | Sequence[str], workers: Sequence[str] | Mapping[int, str] = ()):
        self.organizer = organizer
        self.workers = dict(enumerate(workers)) if not isinstance(workers, Mapping) else dict(workers)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        if request.role == "worker":
            if request.slot not in self.workers:
                raise ExhaustedScript(f"no recorded output for worker slot {request.slot}")
            return finalize(self.workers[request.slot], request)
        pos = request.stream_handle or 0
        if isinstance(self.organizer, str):
            if pos >= len(self.organizer) and (pos or not self.organizer):
                raise ExhaustedScript(f"organizer script exhausted at offset {pos}")
            res = finalize(self.organizer[pos:], request)
            return GenerationResult(res.text, pos + len(res.text), res.stopped)
        if pos >= len(self.organizer):
            raise ExhaustedScript(f"no recorded organizer segment {pos}")
        res = finalize(self.organizer[pos], request)
        return GenerationResult(res.text, pos + 1, res.stopped)


def scripted_backend(trace) -> ScriptedBackend:
    """Backend reproducing ``trace`` (an EpisodeTrace) segment by segment."""
    return ScriptedBackend(list(trace.segments), [w.text for w in trace.workers])
