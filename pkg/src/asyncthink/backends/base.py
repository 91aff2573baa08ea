"""Generation interface shared by every backend."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol

from ..protocol import EventKind, TagSyntax, clip

ORGANIZER_STOPS = (EventKind.JOIN_REQUEST, EventKind.ANSWER_CLOSE)
WORKER_STOPS = (EventKind.RETURN_CLOSE,)


class BackendFailure(RuntimeError):
    """Transport or generation fault; the episode cannot continue."""

    def __init__(self, message: str, *, retries: int = 0):
        super().__init__(message)
        self.retries = retries
        self.trace = None  # partial EpisodeTrace, attached by the engine


class AuthError(BackendFailure):
    pass


class ExhaustedScript(BackendFailure):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    role: str
    prompt: str
    max_steps: int
    stop_conditions: tuple[EventKind, ...] = ()
    context: str = ""
    stream_handle: Any = None
    slot: int | None = None
    seed: int = 0
    capacity: int = 2
    syntax: TagSyntax = field(default_factory=TagSyntax)
    weigher: str = "pieces"

    def __post_init__(self):
        if self.role not in ("organizer", "worker"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.role == "organizer" and not self.stop_conditions:
            raise ValueError("organizer segments need stop conditions")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    stream_handle: Any = None
    stopped: bool = False
    retries: int = 0


class Backend(Protocol):
    concurrent: bool

    def generate(self, request: GenerationRequest) -> GenerationResult: ...


def finalize(text: str, request: GenerationRequest, handle: Any = None, retries: int = 0) -> GenerationResult:
    """Apply the request's stop tags and step budget to raw model text."""
    kept, stop = clip(text, request.role, request.stop_conditions, request.max_steps, request.syntax, request.weigher)
    return GenerationResult(kept, handle, stop is not None, retries)
