import pytest
from conftest import fork_join_script, words
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncthink.backends import MockBackend, MockPolicy, ScriptedBackend
from asyncthink.engine import ActivityTimeline, EpisodeConfig, run_episode
from asyncthink.metrics import (
    CSV_COLUMNS,
    ForkMark,
    Fragment,
    FragmentDecomposition,
    JoinLink,
    MissingWorkerSteps,
    UnboundJoin,
    analyze_trace,
    concurrency_ratio,
    critical_path_latency,
    decompose,
    simulate_latency,
    to_dot,
    trace_latency,
    worker_steps,
)


def test_decompose_sequential(sequential_trace):
    d = decompose(sequential_trace(30))
    assert d.n_J == 0 and d.fragments == (Fragment(1, 30, ()),)


def test_decompose_fork_join(fork_join_trace):
    d = decompose(fork_join_trace())
    assert d.fragments == (Fragment(1, 10, (ForkMark(0, 1, 4),)), Fragment(2, 6, ()))
    assert d.joins == (JoinLink(1, 1, 1, 0),)
    assert d.total_steps == 16


def test_decompose_two_forks_one_fragment():
    org = "a <FORK-1>x</FORK-1> b <FORK-2>y</FORK-2> c <JOIN-1> d <JOIN-2> <ANSWER>1</ANSWER>"
    t = run_episode(ScriptedBackend(org, [words(5) + "<RETURN>1</RETURN>", words(2) + "<RETURN>2</RETURN>"]), "q", EpisodeConfig(capacity=3))
    d = decompose(t)
    assert [m.sub_query_id for m in d.fragments[0].fork_marks] == [1, 2]
    assert [m.steps for m in d.fragments[0].fork_marks] == [4, 8]
    assert [(j.fragment, j.sub_query_id) for j in d.joins] == [(1, 1), (1, 2)]
    assert d.fragments[1].fork_marks == ()


def test_worked_latencies(fork_join_trace, sequential_trace):
    t = fork_join_trace()
    r = trace_latency(t)
    assert r.l == (0, 24, 30) and r.total == 30 and r.per_join_wait == (14,)
    assert simulate_latency(t) == 30 == t.T
    t3 = fork_join_trace(worker=3)
    assert trace_latency(t3).l == (0, 10, 16) and simulate_latency(t3) == 16 == t3.T
    s = sequential_trace(30)
    assert trace_latency(s).total == simulate_latency(s) == 30


def test_dp_on_handbuilt_decomposition():
    d = FragmentDecomposition((Fragment(1, 10, (ForkMark(0, 1, 4),)), Fragment(2, 6, ())), (JoinLink(1, 1, 1, 0),))
    assert critical_path_latency(d, {0: 20}).total == 30
    assert critical_path_latency(d, {0: 3}).total == 16
    with pytest.raises(MissingWorkerSteps):
        critical_path_latency(d, {})


def test_unbound_join_rejected():
    t = run_episode(ScriptedBackend("x <JOIN-2> <ANSWER>1</ANSWER>"), "q")
    with pytest.raises(UnboundJoin):
        decompose(t)
    row = analyze_trace(t)
    assert row["total_latency"] == "" and row["format_error"] == "JoinNonexistent"


@st.composite
def decompositions(draw):
    n_frag = draw(st.integers(1, 5))
    frags, pending, slot = [], [], 0
    joins = []
    for i in range(1, n_frag + 1):
        steps = draw(st.integers(1, 20))
        marks = []
        if i < n_frag:
            for _ in range(draw(st.integers(0, 2))):
                marks.append(ForkMark(slot, slot + 1, draw(st.integers(1, steps))))
                pending.append((i, slot))
                slot += 1
            if not pending:
                marks.append(ForkMark(slot, slot + 1, draw(st.integers(1, steps))))
                pending.append((i, slot))
                slot += 1
            j, s = pending.pop(draw(st.integers(0, len(pending) - 1)))
            joins.append(JoinLink(i, j, s + 1, s))
        frags.append(Fragment(i, steps, tuple(marks)))
    wsteps = {s: draw(st.integers(1, 40)) for s in range(slot)}
    return FragmentDecomposition(tuple(frags), tuple(joins)), wsteps


@settings(max_examples=300, deadline=None)
@given(decompositions(), st.data())
def test_latency_monotone_and_bounded(case, data):
    d, ws = case
    base = critical_path_latency(d, ws)
    assert list(base.l) == sorted(base.l) and base.l[0] == 0
    assert d.total_steps <= base.total <= d.total_steps + sum(ws.values())
    for j in d.joins:
        assert base.total >= d.mark(j.fragment, j.slot).steps + ws[j.slot]
    if ws:
        k = data.draw(st.sampled_from(sorted(ws)))
        bumped = ws | {k: ws[k] + data.draw(st.integers(1, 10))}
        assert critical_path_latency(d, bumped).total >= base.total
    i = data.draw(st.integers(0, len(d.fragments) - 1))
    f = d.fragments[i]
    floor = max([m.steps for m in f.fork_marks], default=1)
    if f.steps > floor:
        shrunk = Fragment(f.index, f.steps - 1, f.fork_marks)
        d2 = FragmentDecomposition(d.fragments[:i] + (shrunk,) + d.fragments[i + 1 :], d.joins)
        assert critical_path_latency(d2, ws).total <= base.total


@pytest.mark.parametrize("seed", range(60))
def test_dp_matches_simulation(seed):
    policy = MockPolicy(n_forks=seed % 7, reuse_ids=seed % 3 == 0, worker_len=(0, 40))
    t = run_episode(MockBackend(policy, seed), "q", EpisodeConfig(capacity=2 + 2 * (seed % 2), seed=seed))
    assert trace_latency(t).total == simulate_latency(t) == t.T


def test_worker_length_monotone_on_traces():
    prev = 0
    for n in range(3, 40, 4):
        org, worker = fork_join_script(worker=n)
        t = run_episode(ScriptedBackend(org, [worker]), "q", EpisodeConfig(capacity=2))
        assert worker_steps(t) == {0: n}
        assert t.T >= prev
        prev = t.T


def test_concurrency_ratio_examples(fork_join_trace, sequential_trace):
    assert concurrency_ratio(sequential_trace(30).activity, 2) == (1.0, 0.5)
    assert concurrency_ratio(sequential_trace(12, capacity=4).activity, 4) == (1.0, 0.25)
    eta, rho = concurrency_ratio(fork_join_trace().activity, 2)
    assert eta == pytest.approx(1.2) and rho == pytest.approx(0.6)
    assert concurrency_ratio(ActivityTimeline((3,) * 9), 3) == (3.0, 1.0)
    with pytest.raises(ValueError):
        concurrency_ratio(ActivityTimeline(()), 2)


@pytest.mark.parametrize("seed", range(30))
def test_rho_within_bounds(seed):
    c = 2 + seed % 3
    t = run_episode(MockBackend(MockPolicy(fork_prob=0.8), seed), "q", EpisodeConfig(capacity=c, seed=seed))
    _, rho = concurrency_ratio(t.activity, c)
    assert 1 / c <= rho <= 1


def test_analyze_row(fork_join_trace):
    row = analyze_trace(fork_join_trace())
    assert set(row) == set(CSV_COLUMNS)
    assert (row["total_latency"], row["simulated_latency"], row["rho"], row["n_J"], row["n_forks"]) == (30, 30, 0.6, 1, 1)
    assert row["format_error"] == ""


def test_dot_export(fork_join_trace):
    dot = to_dot(fork_join_trace())
    assert dot.startswith('digraph "episode"')
    assert 'F1 -> W0 [style=dashed,label="fork @4"]' in dot
    assert 'W0 -> F2 [label="join 1, wait 14"]' in dot
    assert 'F1 -> F2 [label="10"]' in dot
