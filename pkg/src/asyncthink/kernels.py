"""Hot numeric loops, each with a numba path and a pure-numpy fallback.

The numba path is used when numba is importable and the environment variable
``ASYNCTHINK_DISABLE_NUMBA`` is unset (or ``0``).  Both paths return identical
arrays in identical order; ``tests/test_kernels.py`` holds them to that and
``benchmarks/bench_kernels.py`` times them against each other.

Fractions are carried as reduced ``(num, den)`` int64 pairs with ``den > 0``.
Operator usage is packed into one int64, one base-16 digit per operator.
"""

from __future__ import annotations

import functools
import os

import numpy as np

ENV_FLAG = "ASYNCTHINK_DISABLE_NUMBA"

# pair opcodes: a+b, a-b, b-a, a*b, a/b, b/a
OP_ADD, OP_SUB, OP_RSUB, OP_MUL, OP_DIV, OP_RDIV = range(6)
N_PAIR_OPS = 6
# packed operator-count increment for each opcode (+, -, *, / digits)
OP_UNIT = np.array([1, 16, 16, 256, 4096, 4096], dtype=np.int64)


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def use_numba() -> bool:
    """True when the numba path is active for this call."""
    if os.environ.get(ENV_FLAG, "").strip() not in ("", "0"):
        return False
    return numba_available()


def active_path() -> str:
    return "numba" if use_numba() else "numpy"


_needed_nb = _lower_nb = None  # jitted helpers, filled in by _jitted("target")


@functools.lru_cache(maxsize=None)
def _jitted(name: str):
    from numba import njit

    if name == "target":
        # the target loop calls these as globals; bind them before it compiles
        globals()["_needed_nb"] = _jitted("needed")
        globals()["_lower_nb"] = _jitted("lower")
    return njit(cache=True, nogil=True)(_LOOP_IMPLS[name])


def unpack_ops(packed: int) -> tuple[int, int, int, int]:
    return (packed & 15, (packed >> 4) & 15, (packed >> 8) & 15, (packed >> 12) & 15)


def pack_ops(counts) -> int:
    add, sub, mul, div = counts
    return add | (sub << 4) | (mul << 8) | (div << 12)


# ---------------------------------------------------------------------------
# pairwise combination of two value sets
# ---------------------------------------------------------------------------


def _combine_loops(an, ad, ao, bn, bd, bo, strict, unit):
    na = an.shape[0]
    nb = bn.shape[0]
    size = na * nb * 6
    on = np.empty(size, np.int64)
    od = np.empty(size, np.int64)
    oo = np.empty(size, np.int64)
    oa = np.empty(size, np.int32)
    ob = np.empty(size, np.int32)
    oc = np.empty(size, np.int8)
    k = 0
    for i in range(na):
        p = an[i]
        q = ad[i]
        for j in range(nb):
            r = bn[j]
            s = bd[j]
            base = ao[i] + bo[j]
            for op in range(6):
                if op == 0:
                    n = p * s + r * q
                    d = q * s
                elif op == 1:
                    n = p * s - r * q
                    d = q * s
                elif op == 2:
                    n = r * q - p * s
                    d = q * s
                elif op == 3:
                    n = p * r
                    d = q * s
                elif op == 4:
                    n = p * s
                    d = q * r
                else:
                    n = r * q
                    d = s * p
                if d == 0:
                    continue
                if d < 0:
                    n = -n
                    d = -d
                a = n if n >= 0 else -n
                b = d
                while b:
                    a, b = b, a % b
                n //= a
                d //= a
                if strict and d != 1:
                    continue
                on[k] = n
                od[k] = d
                oo[k] = base + unit[op]
                oa[k] = i
                ob[k] = j
                oc[k] = op
                k += 1
    return on[:k], od[:k], oo[:k], oa[:k], ob[:k], oc[:k]


def _pair_grid(an, ad, bn, bd):
    p = an[:, None, None]
    q = ad[:, None, None]
    r = bn[None, :, None]
    s = bd[None, :, None]
    ps = p * s
    rq = r * q
    qs = q * s
    shape = (an.shape[0], bn.shape[0], N_PAIR_OPS)
    num = np.empty(shape, np.int64)
    den = np.empty(shape, np.int64)
    num[..., 0:1] = ps + rq
    num[..., 1:2] = ps - rq
    num[..., 2:3] = rq - ps
    num[..., 3:4] = p * r
    num[..., 4:5] = ps
    num[..., 5:6] = rq
    den[..., 0:4] = qs
    den[..., 4:5] = q * r
    den[..., 5:6] = s * p
    return num.reshape(-1), den.reshape(-1)


def _reduce(num, den):
    keep = den != 0
    num = num[keep]
    den = den[keep]
    neg = den < 0
    num = np.where(neg, -num, num)
    den = np.where(neg, -den, den)
    g = np.gcd(num, den)
    return keep, num // g, den // g


def _combine_numpy(an, ad, ao, bn, bd, bo, strict, unit):
    na, nb = an.shape[0], bn.shape[0]
    num, den = _pair_grid(an, ad, bn, bd)
    keep, num, den = _reduce(num, den)
    flat = np.flatnonzero(keep)
    if strict:
        integral = den == 1
        num, den, flat = num[integral], den[integral], flat[integral]
    ia, ib, op = np.unravel_index(flat, (na, nb, N_PAIR_OPS))
    ops = ao[ia] + bo[ib] + unit[op]
    return (
        num,
        den,
        ops.astype(np.int64),
        ia.astype(np.int32),
        ib.astype(np.int32),
        op.astype(np.int8),
    )


def combine_pairs(an, ad, ao, bn, bd, bo, strict=False):
    """All six pairwise results between value sets A and B.

    Returns ``(num, den, ops, ia, ib, opcode)`` in (i, j, opcode) order.
    Divisions by zero are dropped; ``strict`` also drops non-integers.
    """
    if use_numba():
        return _jitted("combine")(an, ad, ao, bn, bd, bo, bool(strict), OP_UNIT)
    return _combine_numpy(an, ad, ao, bn, bd, bo, bool(strict), OP_UNIT)


# ---------------------------------------------------------------------------
# pairwise combination filtered to a single integer target
# ---------------------------------------------------------------------------
#
# Meet in the middle: for each value a of A and each opcode, solve for the b
# that would hit the target, then binary-search B.  B must be sorted by
# (num, den), which the deduplicated value sets are.


def _needed(p, q, t, op):
    # b such that (a op b) == t for a = p/q; (0, 0) when no b exists
    if op == 0:
        n, d = t * q - p, q
    elif op == 1:
        n, d = p - t * q, q
    elif op == 2:
        n, d = t * q + p, q
    elif op == 3:
        if p == 0:
            return 0, 0
        n, d = t * q, p
    elif op == 4:
        if p == 0 or t == 0:
            return 0, 0
        n, d = p, q * t
    else:
        if p == 0:
            return 0, 0
        n, d = t * p, q
    if d < 0:
        n = -n
        d = -d
    a = n if n >= 0 else -n
    b = d
    while b:
        a, b = b, a % b
    return n // a, d // a


def _lower(bn, bd, n, d):
    lo = 0
    hi = bn.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if bn[mid] < n or (bn[mid] == n and bd[mid] < d):
            lo = mid + 1
        else:
            hi = mid
    return lo


def _target_loops(an, ad, ao, bn, bd, bo, target, unit):
    na = an.shape[0]
    nb = bn.shape[0]
    cap = 64
    oo = np.empty(cap, np.int64)
    oa = np.empty(cap, np.int32)
    ob = np.empty(cap, np.int32)
    oc = np.empty(cap, np.int8)
    k = 0
    for i in range(na):
        for op in range(6):
            n, d = _needed_nb(an[i], ad[i], target, op)
            if d == 0:
                continue
            j = _lower_nb(bn, bd, n, d)
            while j < nb and bn[j] == n and bd[j] == d:
                if k == cap:
                    cap *= 2
                    oo2 = np.empty(cap, np.int64)
                    oa2 = np.empty(cap, np.int32)
                    ob2 = np.empty(cap, np.int32)
                    oc2 = np.empty(cap, np.int8)
                    oo2[:k] = oo[:k]
                    oa2[:k] = oa[:k]
                    ob2[:k] = ob[:k]
                    oc2[:k] = oc[:k]
                    oo, oa, ob, oc = oo2, oa2, ob2, oc2
                oo[k] = ao[i] + bo[j] + unit[op]
                oa[k] = i
                ob[k] = j
                oc[k] = op
                k += 1
                j += 1
    return oo[:k], oa[:k], ob[:k], oc[:k]


def _needed_numpy(an, ad, t):
    p = an[:, None]
    q = ad[:, None]
    shape = (an.shape[0], N_PAIR_OPS)
    num = np.empty(shape, np.int64)
    den = np.empty(shape, np.int64)
    num[:, 0:1] = t * q - p
    num[:, 1:2] = p - t * q
    num[:, 2:3] = t * q + p
    num[:, 3:4] = t * q
    num[:, 4:5] = p
    num[:, 5:6] = t * p
    den[:, 0:3] = q
    den[:, 3:4] = p
    den[:, 4:5] = q * t
    den[:, 5:6] = q
    # a == 0 makes a/b and b/a impossible (b would have to be 0 too)
    den[:, 4:6] *= p != 0
    num, den = num.reshape(-1), den.reshape(-1)
    neg = den < 0
    num = np.where(neg, -num, num)
    den = np.where(neg, -den, den)
    g = np.gcd(num, den)
    g[g == 0] = 1
    return num // g, den // g


def _target_numpy(an, ad, ao, bn, bd, bo, target, unit):
    na = an.shape[0]
    qn, qd = _needed_numpy(an, ad, target)
    valid = qd != 0
    # rank-compress (num, den) so one sorted int64 key orders B lexicographically
    un = np.unique(bn)
    ud = np.unique(bd)
    width = np.int64(ud.shape[0] + 1)
    bkey = np.searchsorted(un, bn) * width + np.searchsorted(ud, bd)
    rn = np.minimum(np.searchsorted(un, qn), max(un.shape[0] - 1, 0))
    rd = np.minimum(np.searchsorted(ud, qd), max(ud.shape[0] - 1, 0))
    present = valid & (un[rn] == qn) & (ud[rd] == qd) if un.shape[0] else np.zeros_like(valid)
    qkey = rn * width + rd
    lo = np.searchsorted(bkey, qkey, "left")
    hi = np.searchsorted(bkey, qkey, "right")
    counts = np.where(present, hi - lo, 0)
    rows = np.repeat(np.arange(qn.shape[0]), counts)
    starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
    ib = starts + np.arange(rows.shape[0])
    ia, op = np.divmod(rows, N_PAIR_OPS)
    ops = ao[ia] + bo[ib] + unit[op]
    return ops.astype(np.int64), ia.astype(np.int32), ib.astype(np.int32), op.astype(np.int8)


def target_pairs(an, ad, ao, bn, bd, bo, target):
    """Pairwise results between A and B that equal the integer ``target``.

    B must be sorted by (num, den) and ``target`` must be nonzero.  Returns
    ``(ops, ia, ib, opcode)`` in (i, opcode, j) order.
    """
    if target == 0:
        raise ValueError("target_pairs needs a nonzero target")
    if use_numba():
        return _jitted("target")(an, ad, ao, bn, bd, bo, np.int64(target), OP_UNIT)
    return _target_numpy(an, ad, ao, bn, bd, bo, np.int64(target), OP_UNIT)


# ---------------------------------------------------------------------------
# interval overlap counts (activity timeline)
# ---------------------------------------------------------------------------


def _interval_loops(starts, ends, horizon):
    diff = np.zeros(horizon + 2, np.int64)
    for m in range(starts.shape[0]):
        s = starts[m]
        e = ends[m]
        if e > horizon:
            e = horizon
        if s < 1:
            s = 1
        if e < s:
            continue
        diff[s] += 1
        diff[e + 1] -= 1
    out = np.empty(horizon, np.int64)
    acc = 0
    for t in range(1, horizon + 1):
        acc += diff[t]
        out[t - 1] = acc
    return out


def _interval_numpy(starts, ends, horizon):
    s = np.maximum(starts, 1)
    e = np.minimum(ends, horizon)
    ok = e >= s
    diff = np.zeros(horizon + 2, np.int64)
    np.add.at(diff, s[ok], 1)
    np.add.at(diff, e[ok] + 1, -1)
    return np.cumsum(diff[1 : horizon + 1])


def interval_counts(starts, ends, horizon: int) -> np.ndarray:
    """Number of closed intervals ``[start, end]`` covering each tick 1..horizon."""
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    if horizon <= 0:
        return np.zeros(0, np.int64)
    if use_numba():
        return _jitted("intervals")(starts, ends, np.int64(horizon))
    return _interval_numpy(starts, ends, horizon)


_LOOP_IMPLS = {
    "combine": _combine_loops,
    "target": _target_loops,
    "needed": _needed,
    "lower": _lower,
    "intervals": _interval_loops,
}
