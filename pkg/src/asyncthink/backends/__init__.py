from .base import (
    ORGANIZER_STOPS,
    WORKER_STOPS,
    AuthError,
    Backend,
    BackendFailure,
    ExhaustedScript,
    GenerationRequest,
    GenerationResult,
)
from .http import HttpBackend
from .mock import MockBackend, MockPolicy
from .prompts import MissingSlot, PromptTemplate, assemble_prompt
from .scripted import ScriptedBackend, scripted_backend

__all__ = [
    "ORGANIZER_STOPS",
    "WORKER_STOPS",
    "AuthError",
    "Backend",
    "BackendFailure",
    "ExhaustedScript",
    "GenerationRequest",
    "GenerationResult",
    "HttpBackend",
    "MissingSlot",
    "MockBackend",
    "MockPolicy",
    "PromptTemplate",
    "ScriptedBackend",
    "assemble_prompt",
    "scripted_backend",
]
