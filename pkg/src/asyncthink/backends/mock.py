"""Seeded synthetic policy emitting protocol-valid (or deliberately broken) text."""

from __future__ import annotations

import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

from ..protocol import Action, ErrorClass, sample_structure
from ..protocol import EventKind as K
from .base import GenerationRequest, GenerationResult, finalize

WORDS = (
    "let", "me", "check", "the", "sum", "first", "then", "try", "products", "maybe", "split",
    "into", "cases", "so", "we", "get", "a", "value", "close", "to", "target", "hmm", "ok",
    "now", "combine", "results", "compare", "differences", "next", "option",
)

ERROR_MODES = tuple(e.value for e in ErrorClass)

AnswerFn = Callable[[str, random.Random], str]


def _filler(rng: random.Random, lo: int, hi: int) -> str:
    return "".join(rng.choice(WORDS) + " " for _ in range(rng.randint(lo, hi)))


def number_answer(prompt: str, rng: random.Random) -> str:
    return str(rng.randint(0, 99))


@lru_cache(maxsize=256)
def _witnesses(target: int, numbers: tuple[int, ...]) -> tuple[str, ...]:
    from ..tasks.countdown import CountdownInstance, enumerate_solutions

    return tuple(enumerate_solutions(CountdownInstance(target, numbers)).values())


def mcd_answer(prompt: str, rng: random.Random) -> str:
    """Some correct countdown expressions, occasionally a duplicate or a wrong one."""
    from ..tasks.countdown import instance_from_query

    inst = instance_from_query(prompt)
    if inst is None:
        return number_answer(prompt, rng)
    pool = list(_witnesses(inst.target, inst.numbers))
    lines = rng.sample(pool, min(len(pool), rng.randint(0, inst.n_s + 1)))
    if lines and rng.random() < 0.3:
        lines.append(lines[0])
    if rng.random() < 0.3:
        lines.append(" + ".join(str(n) for n in inst.numbers[:3]))
    rng.shuffle(lines)
    return "\n".join(lines)


@dataclass(frozen=True)
class MockPolicy:
    fork_prob: float = 0.5  # chance of each further fork, up to max_forks
    max_forks: int = 6
    n_forks: int | None = None  # fixed fork count, overrides fork_prob
    think_len: tuple[int, int] = (0, 8)
    subquery_len: tuple[int, int] = (2, 8)
    worker_len: tuple[int, int] = (1, 30)
    missing_return_prob: float = 0.0
    reuse_ids: bool = False  # label forks with the smallest free id
    error_mode: str | None = None  # an ErrorClass value or "random"
    error_rate: float = 1.0
    answer_fn: AnswerFn = number_answer

    def __post_init__(self):
        if self.error_mode not in (None, "random", *ERROR_MODES):
            raise ValueError(f"unknown error mode {self.error_mode!r}")
        if not 0.0 <= self.fork_prob <= 1.0:
            raise ValueError("fork_prob must be in [0, 1]")


def _relabel(actions: list[Action]) -> list[Action]:
    label: dict[int, int] = {}
    used: set[int] = set()
    out = []
    for act in actions:
        if act.kind == "fork":
            new = 1
            while new in used:
                new += 1
            label[act.id] = new
            used.add(new)
            out.append(Action("fork", new))
        elif act.kind == "join":
            new = label[act.id]
            used.discard(new)
            out.append(Action("join", new))
        else:
            out.append(act)
    return out


def _inject(actions: list[Action], mode: str, capacity: int, rng: random.Random) -> list[Action]:
    body = [a for a in actions if a.kind != "answer"]
    fresh = max([a.id for a in body if a.id is not None], default=0) + 1
    forks = [n for n, a in enumerate(body) if a.kind == "fork"]
    if mode == ErrorClass.DUPLICATE_SUB_QUERY_INDEX.value:
        if not forks:
            body, forks = [Action("fork", 1), Action("join", 1)], [0]
        at = rng.choice(forks)
        body.insert(at + 1, body[at])
    elif mode == ErrorClass.AGENT_POOL_OVERFLOW.value:
        at = rng.randint(0, len(body))
        body[at:at] = [Action("fork", fresh + n) for n in range(capacity)]
    elif mode == ErrorClass.JOIN_NONEXISTENT.value:
        body.insert(rng.randint(0, len(body)), Action("join", fresh))
    elif mode == ErrorClass.MISSING_FINAL_ANSWER.value:
        return body
    return body + [Action("answer")]


class MockBackend:
    """Deterministic given (seed, episode seed, prompt); safe for concurrent use."""

    def __init__(self, policy: MockPolicy | None = None, seed: int = 0, *, concurrent: bool = False):
        self.policy = policy or MockPolicy()
        self.seed = seed
        self.concurrent = concurrent

    def _rng(self, request: GenerationRequest, *extra) -> random.Random:
        return random.Random("|".join(map(str, (self.seed, request.seed, *extra, request.prompt))))

    def organizer_script(self, request: GenerationRequest) -> str:
        p = self.policy
        rng = self._rng(request, "organizer")
        if p.n_forks is not None:
            n = p.n_forks
        else:
            n = 0
            while n < p.max_forks and rng.random() < p.fork_prob:
                n += 1
        actions = list(sample_structure(request.capacity, n, rng, max_id=request.syntax.max_id))
        if p.reuse_ids:
            actions = _relabel(actions)
        if p.error_mode and rng.random() < p.error_rate:
            mode = rng.choice(ERROR_MODES) if p.error_mode == "random" else p.error_mode
            actions = _inject(actions, mode, request.capacity, rng)
        syn = request.syntax
        parts = []
        for act in actions:
            parts.append(_filler(rng, *p.think_len))
            if act.kind == "fork":
                sub = _filler(rng, *p.subquery_len).strip() or "explore"
                parts.append(f"{syn.render(K.FORK_OPEN, act.id)}{sub}{syn.render(K.FORK_CLOSE, act.id)} ")
            elif act.kind == "join":
                parts.append(syn.render(K.JOIN_REQUEST, act.id))
            else:
                answer = p.answer_fn(request.prompt, rng)
                parts.append(f"{syn.render(K.ANSWER_OPEN)}{answer}{syn.render(K.ANSWER_CLOSE)}")
        return "".join(parts)

    def worker_text(self, request: GenerationRequest) -> str:
        p = self.policy
        rng = self._rng(request, "worker", request.slot)
        body = _filler(rng, *p.worker_len)
        if rng.random() < p.missing_return_prob:
            return body
        summary = _filler(rng, 1, 5).strip()
        syn = request.syntax
        return f"{body}{syn.render(K.RETURN_OPEN)}{summary}{syn.render(K.RETURN_CLOSE)}"

    def generate(self, request: GenerationRequest) -> GenerationResult:
        if request.role == "worker":
            return finalize(self.worker_text(request), request)
        pos = request.stream_handle or 0
        script = self.organizer_script(request)
        res = finalize(script[pos:], request)
        return GenerationResult(res.text, pos + len(res.text), res.stopped)
