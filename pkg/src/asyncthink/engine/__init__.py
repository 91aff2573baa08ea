from .runner import ReplayDivergence, activity_timeline, replay, run_episode
from .trace import (
    SCHEMA,
    ActivityTimeline,
    EpisodeConfig,
    EpisodeTrace,
    JoinBinding,
    SchemaError,
    TraceEvent,
    WorkerSlot,
    load_traces,
    write_traces,
)

__all__ = [
    "SCHEMA",
    "ActivityTimeline",
    "EpisodeConfig",
    "EpisodeTrace",
    "JoinBinding",
    "ReplayDivergence",
    "SchemaError",
    "TraceEvent",
    "WorkerSlot",
    "activity_timeline",
    "load_traces",
    "replay",
    "run_episode",
    "write_traces",
]
