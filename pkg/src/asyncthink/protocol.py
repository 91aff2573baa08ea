"""Tag grammar, streaming scanner, format validation and structure sampling.

An organizer stream is free text interleaved with action tags::

    ... <FORK-1>sub-query</FORK-1> ... <JOIN-1> ... <ANSWER>...</ANSWER>

and a worker stream ends its useful output with ``<RETURN>...</RETURN>``.
The scanner is incremental: tags may straddle chunk boundaries, and feeding
any chunking of a text yields exactly the events of scanning it whole.
"""

from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_MAX_ID = 64


class EventKind(str, enum.Enum):
    THINK = "Think"
    FORK_OPEN = "ForkOpen"
    FORK_CLOSE = "ForkClose"
    JOIN_REQUEST = "JoinRequest"
    JOIN_MERGE_END = "JoinMergeEnd"
    RETURN_OPEN = "ReturnOpen"
    RETURN_CLOSE = "ReturnClose"
    ANSWER_OPEN = "AnswerOpen"
    ANSWER_CLOSE = "AnswerClose"


class ErrorClass(str, enum.Enum):
    DUPLICATE_SUB_QUERY_INDEX = "DuplicateSubQueryIndex"
    AGENT_POOL_OVERFLOW = "AgentPoolOverflow"
    JOIN_NONEXISTENT = "JoinNonexistent"
    MISSING_FINAL_ANSWER = "MissingFinalAnswer"


K = EventKind

_ID_KINDS = {K.FORK_OPEN, K.FORK_CLOSE, K.JOIN_REQUEST, K.JOIN_MERGE_END}

# syntax field name for each tag kind
_FIELDS = {
    K.FORK_OPEN: "fork_open",
    K.FORK_CLOSE: "fork_close",
    K.JOIN_REQUEST: "join_open",
    K.JOIN_MERGE_END: "join_close",
    K.RETURN_OPEN: "return_open",
    K.RETURN_CLOSE: "return_close",
    K.ANSWER_OPEN: "answer_open",
    K.ANSWER_CLOSE: "answer_close",
}


@dataclass(frozen=True)
class ProtocolEvent:
    kind: EventKind
    id: int | None
    text: str
    position: int

    @property
    def end(self) -> int:
        return self.position + len(self.text)


@dataclass(frozen=True)
class FormatError:
    error_class: ErrorClass
    position: int
    detail: str = ""

    def to_dict(self) -> dict:
        return {"class": self.error_class.value, "position": self.position, "detail": self.detail}

    @classmethod
    def from_dict(cls, d: dict) -> "FormatError":
        return cls(ErrorClass(d["class"]), int(d["position"]), d.get("detail", ""))


class SyntaxConfigError(ValueError):
    pass


@dataclass(frozen=True)
class _Template:
    prefix: str
    suffix: str
    has_id: bool

    @classmethod
    def parse(cls, text: str) -> "_Template":
        if not (text.startswith("<") and text.endswith(">")):
            raise SyntaxConfigError(f"tag template must look like <...>: {text!r}")
        inner = text[1:-1].replace("{i}", "")
        if any(ch in "<>" or ch.isspace() for ch in inner):
            raise SyntaxConfigError(f"tag template may not contain '<', '>' or whitespace inside: {text!r}")
        if text.count("{i}") > 1:
            raise SyntaxConfigError(f"at most one id slot allowed: {text!r}")
        if "{i}" in text:
            pre, post = text.split("{i}")
            return cls(pre, post, True)
        return cls(text, "", False)

    def render(self, i: int | None) -> str:
        return f"{self.prefix}{i}{self.suffix}" if self.has_id else self.prefix


@dataclass(frozen=True)
class TagSyntax:
    """Literal tag templates; ``{i}`` marks the decimal sub-query id slot."""

    fork_open: str = "<FORK-{i}>"
    fork_close: str = "</FORK-{i}>"
    join_open: str = "<JOIN-{i}>"
    join_close: str = "</JOIN-{i}>"
    return_open: str = "<RETURN>"
    return_close: str = "</RETURN>"
    answer_open: str = "<ANSWER>"
    answer_close: str = "</ANSWER>"
    aliases: tuple[tuple[str, str], ...] = (
        ("fork_open", "<FORK{i}>"),
        ("fork_close", "</FORK{i}>"),
        ("join_open", "<JOIN{i}>"),
        ("join_close", "</JOIN{i}>"),
        # worker examples sometimes close a return block with a second open tag
        ("return_close", "<RETURN>"),
    )
    max_id: int = DEFAULT_MAX_ID

    def __post_init__(self):
        canon = [getattr(self, f) for f in _FIELDS.values()]
        if len(set(canon)) != len(canon):
            raise SyntaxConfigError("canonical tag templates must be distinct")
        for kind, name in _FIELDS.items():
            tpl = _Template.parse(getattr(self, name))
            if tpl.has_id != (kind in _ID_KINDS):
                raise SyntaxConfigError(f"{name} {'needs' if kind in _ID_KINDS else 'must not have'} an id slot")
        for name, text in self.aliases:
            if name not in _FIELDS.values():
                raise SyntaxConfigError(f"unknown alias field {name!r}")
            _Template.parse(text)
        if self.max_id < 1:
            raise SyntaxConfigError("max_id must be >= 1")

    def templates(self, kind: EventKind) -> list[_Template]:
        name = _FIELDS[kind]
        out = [_Template.parse(getattr(self, name))]
        out += [_Template.parse(t) for n, t in self.aliases if n == name]
        return out

    def render(self, kind: EventKind, i: int | None = None) -> str:
        return _Template.parse(getattr(self, _FIELDS[kind])).render(i)

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in _FIELDS.values()}
        d["aliases"] = [list(a) for a in self.aliases]
        d["max_id"] = self.max_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TagSyntax":
        kw = {name: d[name] for name in _FIELDS.values() if name in d}
        if "aliases" in d:
            kw["aliases"] = tuple((str(a), str(b)) for a, b in d["aliases"])
        if "max_id" in d:
            kw["max_id"] = int(d["max_id"])
        return cls(**kw)


def load_syntax(path: str | Path) -> TagSyntax:
    """Read a UTF-8 ``key = value`` file.

    Keys are the template field names, ``max_id``, and ``alias.<field>``
    (repeatable; each occurrence adds an alias).  ``#`` starts a comment line.
    A file with any ``alias.`` line replaces the default alias table.
    """
    kw: dict = {}
    aliases: list[tuple[str, str]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SyntaxConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("alias."):
            aliases.append((key[len("alias."):], value))
        elif key == "max_id":
            kw["max_id"] = int(value)
        elif key in _FIELDS.values():
            kw[key] = value
        else:
            raise SyntaxConfigError(f"{path}:{lineno}: unknown key {key!r}")
    if aliases:
        kw["aliases"] = tuple(aliases)
    return TagSyntax(**kw)


# ---------------------------------------------------------------------------
# streaming scanner
# ---------------------------------------------------------------------------

_TOP, _IN_FORK, _IN_ANSWER, _IN_RETURN = range(4)

_ALLOWED = {
    ("organizer", _TOP): (K.FORK_OPEN, K.JOIN_REQUEST, K.JOIN_MERGE_END, K.ANSWER_OPEN),
    ("organizer", _IN_FORK): (K.FORK_CLOSE,),
    ("organizer", _IN_ANSWER): (K.ANSWER_CLOSE,),
    ("worker", _TOP): (K.RETURN_OPEN,),
    ("worker", _IN_RETURN): (K.RETURN_CLOSE,),
}


class _Matcher:
    """Exact and prefix matching of candidate tags against templates."""

    def __init__(self, syntax: TagSyntax, kinds: Sequence[EventKind]):
        self.max_id = syntax.max_id
        self.id_digits = len(str(syntax.max_id))
        self.entries = [(kind, tpl) for kind in kinds for tpl in syntax.templates(kind)]
        self.max_len = max(len(t.prefix) + len(t.suffix) + (self.id_digits if t.has_id else 0) for _, t in self.entries)

    def _id(self, digits: str) -> int | None:
        if not digits.isdigit() or not digits.isascii() or digits[0] == "0" or len(digits) > self.id_digits:
            return None
        value = int(digits)
        return value if value <= self.max_id else None

    def full(self, cand: str):
        for kind, tpl in self.entries:
            if not tpl.has_id:
                if cand == tpl.prefix:
                    return kind, None
                continue
            if cand.startswith(tpl.prefix) and cand.endswith(tpl.suffix) and len(cand) > len(tpl.prefix) + len(tpl.suffix):
                i = self._id(cand[len(tpl.prefix) : len(cand) - len(tpl.suffix)])
                if i is not None:
                    return kind, i
        return None

    def viable(self, partial: str) -> bool:
        for _, tpl in self.entries:
            if len(partial) <= len(tpl.prefix):
                if tpl.prefix.startswith(partial):
                    return True
                continue
            if not tpl.has_id:
                continue
            if not partial.startswith(tpl.prefix):
                continue
            rest = partial[len(tpl.prefix) :]
            n = 0
            while n < len(rest) and rest[n] in "0123456789":
                n += 1
            digits, tail = rest[:n], rest[n:]
            if not digits:
                continue
            if self._id(digits) is None:
                continue
            if tpl.suffix.startswith(tail) and len(tail) < len(tpl.suffix):
                return True
        return False


@dataclass
class StreamScanner:
    """Incremental tag scanner for one organizer or worker stream.

    ``feed`` returns the events that became unambiguous; ``finish`` flushes the
    rest.  Think text is coalesced, so a Think event is emitted only once the
    following tag (or the end of the stream) is known.
    """

    role: str = "organizer"
    syntax: TagSyntax = field(default_factory=TagSyntax)
    offset: int = 0
    buffer: str = ""
    think: str = ""
    think_pos: int = 0
    state: int = _TOP
    fork_id: int | None = None

    def __post_init__(self):
        if self.role not in ("organizer", "worker"):
            raise ValueError(f"role must be organizer or worker, not {self.role!r}")
        self._matchers: dict[int, _Matcher] = {}

    @property
    def residual(self) -> str:
        return self.think + self.buffer

    def _matcher(self) -> _Matcher:
        m = self._matchers.get(self.state)
        if m is None:
            m = self._matchers[self.state] = _Matcher(self.syntax, _ALLOWED[(self.role, self.state)])
        return m

    def _add_think(self, text: str, pos: int):
        if not text:
            return
        if not self.think:
            self.think_pos = pos
        self.think += text

    def _flush_think(self, out: list):
        if self.think:
            out.append(ProtocolEvent(K.THINK, None, self.think, self.think_pos))
            self.think = ""

    def _accept(self, kind: EventKind, i: int | None) -> bool:
        if kind is K.FORK_CLOSE and i != self.fork_id:
            return False
        return True

    def _transition(self, kind: EventKind, i: int | None):
        if kind is K.FORK_OPEN:
            self.state, self.fork_id = _IN_FORK, i
        elif kind is K.FORK_CLOSE:
            self.state, self.fork_id = _TOP, None
        elif kind is K.ANSWER_OPEN:
            self.state = _IN_ANSWER
        elif kind is K.RETURN_OPEN:
            self.state = _IN_RETURN
        elif kind in (K.ANSWER_CLOSE, K.RETURN_CLOSE):
            self.state = _TOP

    def _scan(self, final: bool) -> list[ProtocolEvent]:
        out: list[ProtocolEvent] = []
        buf = self.buffer
        base = self.offset
        pos = 0
        while pos < len(buf):
            lt = buf.find("<", pos)
            if lt < 0:
                self._add_think(buf[pos:], base + pos)
                pos = len(buf)
                break
            self._add_think(buf[pos:lt], base + pos)
            matcher = self._matcher()
            window = buf[lt : lt + matcher.max_len]
            gt = window.find(">")
            if gt >= 0:
                cand = window[: gt + 1]
                hit = matcher.full(cand)
                if hit is not None and self._accept(*hit):
                    self._flush_think(out)
                    out.append(ProtocolEvent(hit[0], hit[1], cand, base + lt))
                    self._transition(*hit)
                    pos = lt + len(cand)
                    continue
            elif not final and len(buf) - lt < matcher.max_len and matcher.viable(buf[lt:]):
                pos = lt
                break
            self._add_think("<", base + lt)
            pos = lt + 1
        self.buffer = buf[pos:]
        self.offset = base + pos
        if final:
            self._flush_think(out)
        return out

    def feed(self, chunk: str) -> list[ProtocolEvent]:
        self.buffer += chunk
        return self._scan(final=False)

    def finish(self) -> list[ProtocolEvent]:
        return self._scan(final=True)


def scan_stream(
    chunks: Iterable[str],
    role: str = "organizer",
    syntax: TagSyntax | None = None,
    *,
    final: bool = True,
) -> tuple[list[ProtocolEvent], str]:
    """Scan ``chunks`` in order and return ``(events, residual)``.

    With ``final=False`` the residual holds pending Think text and any
    trailing prefix that could still become a tag.
    """
    scanner = StreamScanner(role, syntax or TagSyntax())
    events: list[ProtocolEvent] = []
    for chunk in chunks:
        events.extend(scanner.feed(chunk))
    if final:
        events.extend(scanner.finish())
    return events, scanner.residual


# ---------------------------------------------------------------------------
# format validation
# ---------------------------------------------------------------------------


class FormatValidator:
    """Stateful organizer-stream checker; ``push`` returns the first error."""

    def __init__(self, capacity: int):
        if capacity < 2:
            raise ValueError("capacity must be >= 2")
        self.capacity = capacity
        self.active: set[int] = set()
        self.dispatched: set[int] = set()
        self.answered = False
        self.last_end = 0

    def push(self, ev: ProtocolEvent) -> FormatError | None:
        self.last_end = max(self.last_end, ev.end)
        if self.answered:
            return None
        if ev.kind is K.FORK_OPEN:
            if ev.id in self.active:
                return FormatError(ErrorClass.DUPLICATE_SUB_QUERY_INDEX, ev.position, f"sub-query {ev.id} is still active")
            if len(self.active) >= self.capacity - 1:
                return FormatError(
                    ErrorClass.AGENT_POOL_OVERFLOW,
                    ev.position,
                    f"fork {ev.id} with {len(self.active)} workers already active (capacity {self.capacity})",
                )
            self.active.add(ev.id)
        elif ev.kind is K.FORK_CLOSE:
            self.dispatched.add(ev.id)
        elif ev.kind is K.JOIN_REQUEST:
            if ev.id not in self.dispatched:
                return FormatError(ErrorClass.JOIN_NONEXISTENT, ev.position, f"no active sub-query {ev.id}")
            self.dispatched.discard(ev.id)
            self.active.discard(ev.id)
        elif ev.kind is K.ANSWER_CLOSE:
            self.answered = True
        return None

    def finish(self) -> FormatError | None:
        if self.answered:
            return None
        return FormatError(ErrorClass.MISSING_FINAL_ANSWER, self.last_end, "stream ended without a final answer")


def validate_trace(events: Iterable[ProtocolEvent], capacity: int) -> FormatError | None:
    """First format error in a complete organizer stream, or None."""
    validator = FormatValidator(capacity)
    for ev in events:
        err = validator.push(ev)
        if err is not None:
            return err
    return validator.finish()


# ---------------------------------------------------------------------------
# random thinking structures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    kind: str  # "fork", "join" or "answer"
    id: int | None = None

    def __str__(self) -> str:
        return {"fork": "F", "join": "J"}.get(self.kind, "A") + (str(self.id) if self.id is not None else "")

    @classmethod
    def parse(cls, text: str) -> "Action":
        if text == "A":
            return cls("answer")
        kind = {"F": "fork", "J": "join"}.get(text[:1])
        if kind is None or not text[1:].isdigit():
            raise ValueError(f"bad action {text!r}")
        return cls(kind, int(text[1:]))


ActionStructure = tuple[Action, ...]


def _completions(capacity: int, n_forks: int) -> list[list[int]]:
    """table[r][a]: valid completions with r forks left and a workers active."""
    width = capacity  # active counts 0..capacity-1
    table = [[0] * width for _ in range(n_forks + 1)]
    for r in range(n_forks + 1):
        for a in range(width):
            if r == 0 and a == 0:
                table[r][a] = 1
                continue
            total = 0
            if r > 0 and a < capacity - 1:
                total += table[r - 1][a + 1]
            if a > 0:
                total += a * table[r][a - 1]
            table[r][a] = total
    return table


def count_structures(capacity: int, n_forks: int) -> int:
    return _completions(capacity, n_forks)[n_forks][0]


def sample_structure(capacity: int, n_forks: int, rng_seed=None, *, max_id: int = DEFAULT_MAX_ID) -> ActionStructure:
    """Uniform random action sequence with ``n_forks`` forks, all joined, valid under ``capacity``.

    Forks take ids 1..n_forks in order; every join names a currently active
    fork.  ``rng_seed`` may be an int, a string or a :class:`random.Random`.
    """
    if capacity < 2:
        raise ValueError("capacity must be >= 2")
    if n_forks < 0:
        raise ValueError("n_forks must be >= 0")
    if n_forks > max_id:
        raise ValueError(f"n_forks={n_forks} exceeds the sub-query id bound {max_id}")
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    table = _completions(capacity, n_forks)
    actions: list[Action] = []
    active: list[int] = []
    remaining = n_forks
    next_id = 1
    while remaining or active:
        a = len(active)
        via_fork = table[remaining - 1][a + 1] if remaining and a < capacity - 1 else 0
        pick = rng.randrange(table[remaining][a])
        if pick < via_fork:
            actions.append(Action("fork", next_id))
            active.append(next_id)
            next_id += 1
            remaining -= 1
        else:
            j = (pick - via_fork) // table[remaining][a - 1]
            actions.append(Action("join", active.pop(j)))
    actions.append(Action("answer"))
    return tuple(actions)


def structure_events(structure: Sequence[Action], syntax: TagSyntax | None = None) -> list[ProtocolEvent]:
    """Bare tag events for ``structure`` (used to validate sampled structures)."""
    return scan_stream([render_structure(structure, syntax)], "organizer", syntax)[0]


def render_structure(structure: Sequence[Action], syntax: TagSyntax | None = None) -> str:
    """Skeleton text for a prompt, e.g. ``<FORK-1>…</FORK-1> … <JOIN-1> … <ANSWER>…</ANSWER>``."""
    syntax = syntax or TagSyntax()
    parts = []
    for act in structure:
        if act.kind == "fork":
            parts.append(f"{syntax.render(K.FORK_OPEN, act.id)}…{syntax.render(K.FORK_CLOSE, act.id)}")
        elif act.kind == "join":
            parts.append(syntax.render(K.JOIN_REQUEST, act.id))
        else:
            parts.append(f"{syntax.render(K.ANSWER_OPEN)}…{syntax.render(K.ANSWER_CLOSE)}")
    return " … ".join(parts)


def actions_from_events(events: Iterable[ProtocolEvent]) -> ActionStructure:
    out = []
    for ev in events:
        if ev.kind is K.FORK_OPEN:
            out.append(Action("fork", ev.id))
        elif ev.kind is K.JOIN_REQUEST:
            out.append(Action("join", ev.id))
        elif ev.kind is K.ANSWER_OPEN:
            out.append(Action("answer"))
    return tuple(out)


# ---------------------------------------------------------------------------
# logical-clock tokenization
# ---------------------------------------------------------------------------

# tag-like runs, words and lone '<' each take trailing whitespace; leading
# whitespace at the very start is its own piece
_PIECE_RE = re.compile(r"(?:<[^<>\s]{1,40}>|[^\s<]+|<)\s*|\s+")


def tokenize(text: str, weigher: str = "pieces") -> list[str]:
    """Split ``text`` into decode steps; ``"".join`` of the result is ``text``."""
    if weigher == "pieces":
        return _PIECE_RE.findall(text)
    if weigher == "chars":
        return list(text)
    raise ValueError(f"unknown weigher {weigher!r}")


def step_ends(text: str, weigher: str = "pieces") -> list[int]:
    """Exclusive character end offset of each step of ``text``."""
    ends = []
    total = 0
    for tok in tokenize(text, weigher):
        total += len(tok)
        ends.append(total)
    return ends


def truncate_steps(text: str, max_steps: int, weigher: str = "pieces") -> str:
    toks = tokenize(text, weigher)
    return text if len(toks) <= max_steps else "".join(toks[:max_steps])


def clip(
    text: str,
    role: str,
    stop_kinds: Iterable[EventKind],
    max_steps: int,
    syntax: TagSyntax | None = None,
    weigher: str = "pieces",
) -> tuple[str, ProtocolEvent | None]:
    """Cut ``text`` after the first stop tag, then to ``max_steps`` steps.

    Returns the kept text and the stop event if it survived the step cut.
    """
    stops = set(stop_kinds)
    stop = None
    scanner = StreamScanner(role, syntax or TagSyntax())
    for ev in scanner.feed(text) + scanner.finish():
        if ev.kind in stops:
            stop = ev
            text = text[: ev.end]
            break
    cut = truncate_steps(text, max_steps, weigher)
    if stop is not None and len(cut) < stop.end:
        stop = None
    return cut, stop
