"""Multi-solution countdown: expressions, verification, enumeration, generation.

Two solutions are the same when they use the same numbers and each operator
the same number of times; :class:`DistinctnessKey` captures exactly that.
All arithmetic is exact (:class:`fractions.Fraction` or reduced int64 pairs).
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple

import numpy as np

from .. import kernels

OPERATORS = "+-*/"
_OP_ALIASES = {"+": "+", "-": "-", "−": "-", "*": "*", "×": "*", "x": "*", "/": "/", "÷": "/"}
_PAIR_SYMBOL = ["+", "-", "-", "*", "/", "/"]
_INT64_HEADROOM = 2**62
# opcode seen from the other operand's side: a-b <-> b-a, a/b <-> b/a
_SWAPPED = np.array([0, 2, 1, 3, 5, 4], np.int8)


class ExpressionError(ValueError):
    pass


class ParseError(ExpressionError):
    pass


class DivisionByZero(ExpressionError):
    pass


class CapExceeded(RuntimeError):
    pass


class GenerationBudgetExceeded(RuntimeError):
    pass


class DistinctnessKey(NamedTuple):
    numbers: tuple[int, ...]
    op_counts: tuple[int, int, int, int]


@dataclass(frozen=True)
class Solution:
    expression: str
    numbers: tuple[int, ...]
    op_counts: tuple[int, int, int, int]
    value: Fraction
    stated_target: int | None = None
    integral_steps: bool = True

    @property
    def key(self) -> DistinctnessKey:
        return DistinctnessKey(tuple(sorted(self.numbers)), self.op_counts)


@dataclass(frozen=True)
class CountdownInstance:
    target: int
    numbers: tuple[int, ...]
    n_s: int = 4
    min_use: int = 3
    max_use: int = 6

    def __post_init__(self):
        nums = tuple(sorted(int(n) for n in self.numbers))
        if len(set(nums)) != len(nums):
            raise ValueError(f"instance numbers must be distinct: {nums}")
        if any(n <= 0 for n in nums):
            raise ValueError("instance numbers must be positive")
        if not 1 <= self.min_use <= self.max_use:
            raise ValueError("need 1 <= min_use <= max_use")
        if self.max_use > 15:
            raise ValueError("max_use above 15 overflows the packed operator counts")
        object.__setattr__(self, "numbers", nums)

    def query_text(self) -> str:
        return f"Target: {self.target}\nNumbers: {', '.join(map(str, self.numbers))}"

    def to_record(self, certified: int | None = None) -> dict:
        rec = {"target": self.target, "numbers": list(self.numbers), "n_s": self.n_s}
        if certified is not None:
            rec["certified_solution_count"] = certified
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "CountdownInstance":
        return cls(int(rec["target"]), tuple(rec["numbers"]), int(rec.get("n_s", 4)))


_QUERY_RE = re.compile(r"Target:\s*(\d+)\s*\n\s*Numbers:\s*([\d,\s]+)")


def instance_from_query(text: str, n_s: int = 4) -> CountdownInstance | None:
    m = _QUERY_RE.search(text)
    if not m:
        return None
    nums = tuple(int(x) for x in re.findall(r"\d+", m.group(2)))
    return CountdownInstance(int(m.group(1)), nums, n_s)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s*(?:(\d+)|(.))")


def _lex(text: str) -> list[str]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m.group(0).strip() == "":
            break
        pos = m.end()
        if m.group(1) is not None:
            toks.append(m.group(1))
            continue
        ch = m.group(2)
        if ch in _OP_ALIASES:
            toks.append(_OP_ALIASES[ch])
        elif ch in "()=":
            toks.append(ch)
        else:
            raise ParseError(f"unknown token {ch!r}")
    return toks


class _Parser:
    def __init__(self, toks: list[str]):
        self.toks = toks
        self.i = 0
        self.numbers: list[int] = []
        self.ops = [0, 0, 0, 0]
        self.integral = True

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self):
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of expression")
        self.i += 1
        return tok

    def expr(self):
        value, text = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs, rtext = self.term()
            value = value + rhs if op == "+" else value - rhs
            self.ops[OPERATORS.index(op)] += 1
            text = f"{text}{op}{rtext}"
            self._note(value)
        return value, text

    def term(self):
        value, text = self.factor()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs, rtext = self.factor()
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0:
                    raise DivisionByZero("division by zero")
                value = value / rhs
            self.ops[OPERATORS.index(op)] += 1
            text = f"{text}{op}{rtext}"
            self._note(value)
        return value, text

    def factor(self):
        tok = self.take()
        if tok == "(":
            value, text = self.expr()
            if self.take() != ")":
                raise ParseError("expected ')'")
            return value, f"({text})"
        if tok.isdigit():
            self.numbers.append(int(tok))
            return Fraction(int(tok)), tok
        raise ParseError(f"unexpected token {tok!r}")

    def _note(self, value: Fraction):
        if value.denominator != 1:
            self.integral = False


def parse_expression(text: str) -> Solution:
    """Parse an infix expression, optionally written as ``expr = target``.

    >>> parse_expression("5×4/2").value
    Fraction(10, 1)
    """
    toks = _lex(text)
    stated = None
    if "=" in toks:
        eq = toks.index("=")
        rest = toks[eq + 1 :]
        if len(rest) != 1 or not rest[0].isdigit():
            raise ParseError("expected a single integer after '='")
        stated = int(rest[0])
        toks = toks[:eq]
    if not toks:
        raise ParseError("empty expression")
    parser = _Parser(toks)
    value, canon = parser.expr()
    if parser.i != len(toks):
        raise ParseError(f"unexpected token {toks[parser.i]!r}")
    return Solution(
        expression=canon,
        numbers=tuple(parser.numbers),
        op_counts=tuple(parser.ops),
        value=value,
        stated_target=stated,
        integral_steps=parser.integral,
    )


def verify_solution(solution: Solution, instance: CountdownInstance, *, strict: bool = False):
    """Return ``(True, "")`` or ``(False, reason)``."""
    available = set(instance.numbers)
    seen: set[int] = set()
    for n in solution.numbers:
        if n not in available:
            return False, f"number {n} is not in the instance"
        if n in seen:
            return False, f"number {n} used more than once"
        seen.add(n)
    k = len(solution.numbers)
    if not instance.min_use <= k <= instance.max_use:
        return False, f"uses {k} numbers; need {instance.min_use} to {instance.max_use}"
    if solution.value != instance.target:
        return False, f"value {solution.value} != target {instance.target}"
    if solution.stated_target is not None and solution.stated_target != instance.target:
        return False, f"stated result {solution.stated_target} != target {instance.target}"
    if strict and not solution.integral_steps:
        return False, "non-integer intermediate value"
    return True, ""


# ---------------------------------------------------------------------------
# exhaustive enumeration
# ---------------------------------------------------------------------------


@dataclass
class _ValueSet:
    num: np.ndarray
    den: np.ndarray
    ops: np.ndarray
    # back-pointers: left sub-mask, index into left set, index into right set, opcode
    left: np.ndarray
    ia: np.ndarray
    ib: np.ndarray
    code: np.ndarray


@dataclass
class _Enumeration:
    numbers: tuple[int, ...]
    sets: dict[int, _ValueSet] = field(default_factory=dict)
    work: int = 0

    def render(self, mask: int, idx: int, outer: bool = False) -> str:
        if mask & (mask - 1) == 0:
            return str(self.numbers[mask.bit_length() - 1])
        vs = self.sets[mask]
        left = int(vs.left[idx])
        return self._render_pair(mask, left, int(vs.ia[idx]), int(vs.ib[idx]), int(vs.code[idx]), outer)

    def _render_pair(self, mask, left, ia, ib, code, outer):
        a = self.render(left, ia)
        b = self.render(mask ^ left, ib)
        if code in (kernels.OP_RSUB, kernels.OP_RDIV):
            a, b = b, a
        body = f"{a}{_PAIR_SYMBOL[code]}{b}"
        return body if outer else f"({body})"


def _splits(mask: int):
    """Unordered splits of ``mask`` into two nonempty parts; the left part keeps the low bit."""
    low = mask & -mask
    rest = mask ^ low
    sub = rest
    while True:
        left = low | sub
        if left != mask:
            yield left, mask ^ left
        if sub == 0:
            break
        sub = (sub - 1) & rest


def _dedup(parts: list[tuple], packable: bool) -> _ValueSet:
    num = np.concatenate([p[0] for p in parts])
    den = np.concatenate([p[1] for p in parts])
    ops = np.concatenate([p[2] for p in parts])
    left = np.concatenate([np.full(p[0].shape[0], p[6], np.int64) for p in parts])
    ia = np.concatenate([p[3] for p in parts])
    ib = np.concatenate([p[4] for p in parts])
    code = np.concatenate([p[5] for p in parts])
    if packable:
        # den < 2**46 and ops < 2**16: one int64 orders (den, ops)
        inner = np.argsort((den << 16) | ops)
        order = inner[np.argsort(num[inner], kind="stable")]
    else:
        order = np.lexsort((ops, den, num))
    num, den, ops = num[order], den[order], ops[order]
    first = np.ones(num.shape[0], bool)
    first[1:] = (num[1:] != num[:-1]) | (den[1:] != den[:-1]) | (ops[1:] != ops[:-1])
    keep = order[first]
    return _ValueSet(num[first], den[first], ops[first], left[keep], ia[keep], ib[keep], code[keep])


def _magnitude_bound(numbers, size: int) -> int:
    # |num| and den of any value built from `size` operands stay below this
    biggest = sorted(numbers, reverse=True)[:size]
    bound = 2 ** max(len(biggest) - 1, 0)
    for n in biggest:
        bound *= n
    return bound


def _check_headroom(instance: CountdownInstance) -> bool:
    """Raise if int64 could overflow; return whether stored sets fit the packed sort key."""
    if _magnitude_bound(instance.numbers, instance.max_use) >= _INT64_HEADROOM:
        raise CapExceeded("operands too large for exact int64 enumeration")
    return _magnitude_bound(instance.numbers, instance.max_use - 1) < 2**46


def enumerate_solutions(
    instance: CountdownInstance,
    cap: int = 10**7,
    *,
    strict: bool = False,
) -> dict[DistinctnessKey, str]:
    """Every distinct solution of ``instance`` with one witness expression each.

    Exhaustive over operand subsets of size ``min_use..max_use``, all operator
    assignments and all bracketings.  ``cap`` bounds the pairwise evaluations
    performed (full products below the top size, one probe per operator and
    smaller-side value at the top size); exceeding it raises :class:`CapExceeded`.
    ``strict`` restricts every intermediate value to an integer.
    """
    packable = _check_headroom(instance)
    numbers = instance.numbers
    n = len(numbers)
    top = min(instance.max_use, n)
    state = _Enumeration(numbers)
    found: dict[DistinctnessKey, str] = {}
    target = instance.target

    for bit, value in enumerate(numbers):
        one = np.array([value], np.int64)
        state.sets[1 << bit] = _ValueSet(
            one, np.ones(1, np.int64), np.zeros(1, np.int64),
            np.zeros(1, np.int64), np.zeros(1, np.int32), np.zeros(1, np.int32), np.zeros(1, np.int8),
        )
        if instance.min_use <= 1 and value == target:
            found.setdefault(DistinctnessKey((value,), (0, 0, 0, 0)), str(value))

    for size in range(2, top + 1):
        for combo in itertools.combinations(range(n), size):
            mask = sum(1 << b for b in combo)
            subset = tuple(numbers[b] for b in combo)
            full = size < top
            parts = []
            for left, right in _splits(mask):
                a, b = state.sets[left], state.sets[right]
                na, nb = a.num.shape[0], b.num.shape[0]
                # at the top size only the smaller side is probed against the other
                state.work += (na * nb if full else min(na, nb)) * kernels.N_PAIR_OPS
                if state.work > cap:
                    raise CapExceeded(f"enumeration exceeded cap of {cap} combinations")
                if full:
                    res = kernels.combine_pairs(a.num, a.den, a.ops, b.num, b.den, b.ops, strict)
                    parts.append((*res, left))
                elif size >= instance.min_use:
                    if a.num.shape[0] <= b.num.shape[0]:
                        ops, ia, ib, code = kernels.target_pairs(a.num, a.den, a.ops, b.num, b.den, b.ops, target)
                    else:
                        ops, ib, ia, code = kernels.target_pairs(b.num, b.den, b.ops, a.num, a.den, a.ops, target)
                        code = _SWAPPED[code]
                    for m in range(ops.shape[0]):
                        key = DistinctnessKey(subset, kernels.unpack_ops(int(ops[m])))
                        if key not in found:
                            found[key] = state._render_pair(mask, left, int(ia[m]), int(ib[m]), int(code[m]), True)
            if not full:
                continue
            vs = _dedup(parts, packable)
            state.sets[mask] = vs
            if size >= instance.min_use:
                for idx in np.flatnonzero((vs.num == target) & (vs.den == 1)):
                    key = DistinctnessKey(subset, kernels.unpack_ops(int(vs.ops[idx])))
                    if key not in found:
                        found[key] = state.render(mask, int(idx), outer=True)
    return found


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenParams:
    target_range: tuple[int, int] = (1, 1000)
    number_range: tuple[int, int] = (1, 100)
    set_size: int | tuple[int, int] = 6
    n_s: int = 4
    exclude_targets: frozenset[int] = frozenset()
    max_attempts: int = 200
    cap: int = 10**7
    strict: bool = False


def gen_countdown(rng_seed, params: GenParams = GenParams()) -> tuple[CountdownInstance, int]:
    """Rejection-sample an instance with at least ``n_s`` distinct solutions.

    Returns the instance and its certified distinct-solution count.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = params.target_range
    targets = [t for t in range(lo, hi + 1) if t not in params.exclude_targets]
    if not targets:
        raise GenerationBudgetExceeded("every target in range is excluded")
    nlo, nhi = params.number_range
    for _ in range(params.max_attempts):
        if isinstance(params.set_size, tuple):
            size = int(rng.integers(params.set_size[0], params.set_size[1] + 1))
        else:
            size = params.set_size
        target = int(targets[int(rng.integers(len(targets)))])
        numbers = tuple(int(x) for x in rng.choice(np.arange(nlo, nhi + 1), size=size, replace=False))
        inst = CountdownInstance(target, numbers, params.n_s)
        try:
            count = len(enumerate_solutions(inst, params.cap, strict=params.strict))
        except CapExceeded:
            continue
        if count >= params.n_s:
            return inst, count
    raise GenerationBudgetExceeded(f"no certified instance after {params.max_attempts} attempts")


# ---------------------------------------------------------------------------
# scoring answers
# ---------------------------------------------------------------------------

_LIST_MARKER = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")
_SPLIT = re.compile(r"[\n;,]")


def split_candidates(answer_text: str) -> list[str]:
    out = []
    for piece in _SPLIT.split(answer_text or ""):
        piece = _LIST_MARKER.sub("", piece).strip()
        if piece:
            out.append(piece)
    return out


def count_correct(candidates: Iterable[str], instance: CountdownInstance, *, strict: bool = False) -> int:
    """Number of valid candidates that are pairwise distinct by key."""
    keys = set()
    for text in candidates:
        try:
            sol = parse_expression(text)
        except ExpressionError:
            continue
        ok, _ = verify_solution(sol, instance, strict=strict)
        if ok:
            keys.add(sol.key)
    return len(keys)


def mcd_accuracy(answer_text: str, instance: CountdownInstance, *, strict: bool = False) -> tuple[int, float]:
    """``(n_c, R_A)`` for a final answer holding one expression per line."""
    n_c = count_correct(split_candidates(answer_text), instance, strict=strict)
    return n_c, min(n_c, instance.n_s) / instance.n_s
