import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncthink.protocol import (
    Action,
    ErrorClass,
    EventKind,
    FormatValidator,
    ProtocolEvent,
    StreamScanner,
    SyntaxConfigError,
    TagSyntax,
    actions_from_events,
    clip,
    count_structures,
    load_syntax,
    render_structure,
    sample_structure,
    scan_stream,
    structure_events,
    tokenize,
    validate_trace,
)

K = EventKind


def kinds(events):
    return [(e.kind, e.id, e.text) for e in events]


# -- scanning ---------------------------------------------------------------


def test_tag_split_across_chunks():
    events, residual = scan_stream(["Let me <FO", "RK-1>try products</FORK-1> next"])
    assert kinds(events) == [
        (K.THINK, None, "Let me "),
        (K.FORK_OPEN, 1, "<FORK-1>"),
        (K.THINK, None, "try products"),
        (K.FORK_CLOSE, 1, "</FORK-1>"),
        (K.THINK, None, " next"),
    ]
    assert residual == ""


def test_minimal_answer():
    events, _ = scan_stream(["<ANSWER>42</ANSWER>"])
    assert kinds(events) == [(K.ANSWER_OPEN, None, "<ANSWER>"), (K.THINK, None, "42"), (K.ANSWER_CLOSE, None, "</ANSWER>")]


def test_join_request():
    events, _ = scan_stream(["… <JOIN-2>"])
    assert kinds(events) == [(K.THINK, None, "… "), (K.JOIN_REQUEST, 2, "<JOIN-2>")]


def test_positions_are_character_offsets():
    events, _ = scan_stream(["ab<JOIN-3>cd"])
    assert [(e.position, e.end) for e in events] == [(0, 2), (2, 10), (10, 12)]


def test_residual_holds_possible_tag_prefix():
    events, residual = scan_stream(["hello <FOR"], final=False)
    assert events == []
    assert residual == "hello <FOR"
    scanner = StreamScanner()
    assert scanner.feed("x <JOIN-1") == []
    assert kinds(scanner.feed("2>")) == [(K.THINK, None, "x "), (K.JOIN_REQUEST, 12, "<JOIN-12>")]


@pytest.mark.parametrize(
    "text",
    ["<FORK-x>", "<FORK-0>", "<FORK-01>", "<FORK-65>", "<FORK->", "<FORK-1 >", "<JOIN-999>", "<fork-1>"],
)
def test_malformed_tags_are_think_text(text):
    events, _ = scan_stream([text + " tail"])
    assert kinds(events) == [(K.THINK, None, text + " tail")]


def test_mismatched_fork_close_is_text():
    events, _ = scan_stream(["<FORK-1>a</FORK-2>b</FORK-1>"])
    assert kinds(events) == [
        (K.FORK_OPEN, 1, "<FORK-1>"),
        (K.THINK, None, "a</FORK-2>b"),
        (K.FORK_CLOSE, 1, "</FORK-1>"),
    ]


def test_tags_inside_fork_or_answer_are_text():
    events, _ = scan_stream(["<FORK-1>use <JOIN-1> later</FORK-1><ANSWER><FORK-2></ANSWER>"])
    assert [e.kind for e in events] == [K.FORK_OPEN, K.THINK, K.FORK_CLOSE, K.ANSWER_OPEN, K.THINK, K.ANSWER_CLOSE]
    assert events[1].text == "use <JOIN-1> later"
    assert events[4].text == "<FORK-2>"


def test_hyphen_free_aliases():
    events, _ = scan_stream(["<FORK1>q</FORK1> <JOIN1>"])
    assert [(e.kind, e.id) for e in events] == [(K.FORK_OPEN, 1), (K.THINK, None), (K.FORK_CLOSE, 1), (K.THINK, None), (K.JOIN_REQUEST, 1)]


def test_worker_return_block():
    events, _ = scan_stream(["work <RETURN>found 3</RETURN> trailing"], role="worker")
    assert kinds(events) == [
        (K.THINK, None, "work "),
        (K.RETURN_OPEN, None, "<RETURN>"),
        (K.THINK, None, "found 3"),
        (K.RETURN_CLOSE, None, "</RETURN>"),
        (K.THINK, None, " trailing"),
    ]
    # a second open tag also closes the block
    events, _ = scan_stream(["<RETURN>x<RETURN>"], role="worker")
    assert [e.kind for e in events] == [K.RETURN_OPEN, K.THINK, K.RETURN_CLOSE]
    # organizer tags mean nothing to a worker
    events, _ = scan_stream(["<FORK-1>"], role="worker")
    assert [e.kind for e in events] == [K.THINK]


def test_custom_syntax_file(tmp_path):
    cfg = tmp_path / "tags.cfg"
    cfg.write_text(
        "# bracket style\nfork_open = <task{i}>\nfork_close = </task{i}>\nalias.fork_open = <T{i}>\nmax_id = 9\n",
        encoding="utf-8",
    )
    syn = load_syntax(cfg)
    assert syn.fork_open == "<task{i}>" and syn.max_id == 9
    events, _ = scan_stream(["<T3>a</task3><task12>"], syntax=syn)
    assert [(e.kind, e.id) for e in events] == [(K.FORK_OPEN, 3), (K.THINK, None), (K.FORK_CLOSE, 3), (K.THINK, None)]
    assert TagSyntax.from_dict(syn.to_dict()) == syn


@pytest.mark.parametrize(
    "kw",
    [
        {"fork_open": "<ANSWER>"},
        {"fork_open": "<FORK>"},
        {"answer_open": "<ANSWER-{i}>"},
        {"fork_open": "<FO RK-{i}>"},
        {"fork_open": "FORK-{i}"},
        {"max_id": 0},
    ],
)
def test_bad_syntax_rejected(kw):
    with pytest.raises(SyntaxConfigError):
        TagSyntax(**kw)


PIECES = [
    "<FORK-1>", "</FORK-1>", "<FORK-2>", "</FORK-2>", "<JOIN-1>", "<JOIN-2>", "</JOIN-1>", "<ANSWER>",
    "</ANSWER>", "<RETURN>", "</RETURN>", "<FORK1>", "</FORK1>", "<FO", "RK-", "1>", "<", ">", "-", "12",
    "abc", " ", "\n", "é", "<FORK-0>", "<FORK-x>", "<JOIN-64>", "<JOIN-65>", "</", "…",
]

texts = st.lists(st.sampled_from(PIECES), max_size=25).map("".join)


def _chunk(text, cuts):
    cuts = sorted({c % (len(text) + 1) for c in cuts})
    bounds = [0, *cuts, len(text)]
    return [text[a:b] for a, b in zip(bounds, bounds[1:])]


@settings(max_examples=300, deadline=None)
@given(texts, st.lists(st.integers(0, 400), max_size=12), st.sampled_from(["organizer", "worker"]))
def test_streaming_equals_one_shot(text, cuts, role):
    whole, _ = scan_stream([text], role)
    chunked, _ = scan_stream(_chunk(text, cuts), role)
    assert chunked == whole
    assert "".join(e.text for e in whole) == text


@settings(max_examples=200, deadline=None)
@given(texts, st.lists(st.integers(0, 400), max_size=8))
def test_incremental_events_are_final(text, cuts):
    scanner = StreamScanner()
    seen = []
    for chunk in _chunk(text, cuts):
        seen.extend(scanner.feed(chunk))
        assert seen == scan_stream([text])[0][: len(seen)]
        assert text.startswith("".join(e.text for e in seen))


# -- validation -------------------------------------------------------------


def _validate(text, c):
    return validate_trace(scan_stream([text])[0], c)


def test_duplicate_index():
    err = _validate("<FORK-1>a</FORK-1><FORK-1>b</FORK-1><JOIN-1><ANSWER>x</ANSWER>", 4)
    assert err.error_class is ErrorClass.DUPLICATE_SUB_QUERY_INDEX and err.position == 18


def test_pool_overflow():
    err = _validate("<FORK-1>a</FORK-1><FORK-2>b</FORK-2><JOIN-1><JOIN-2><ANSWER>x</ANSWER>", 2)
    assert err.error_class is ErrorClass.AGENT_POOL_OVERFLOW and err.position == 18


def test_join_nonexistent_and_missing_answer():
    err = _validate("think <JOIN-5><ANSWER>x</ANSWER>", 2)
    assert err.error_class is ErrorClass.JOIN_NONEXISTENT and err.position == 6
    err = _validate("think and think", 2)
    assert err.error_class is ErrorClass.MISSING_FINAL_ANSWER and err.position == 15


def test_ids_reusable_after_join():
    assert _validate("<FORK-1>a</FORK-1><JOIN-1><FORK-1>b</FORK-1><JOIN-1><ANSWER>x</ANSWER>", 2) is None


def test_join_of_fork_still_open_is_nonexistent():
    # the fork body never closed, so nothing was dispatched; the join tag is text
    err = _validate("<FORK-1>a <JOIN-1>", 2)
    assert err.error_class is ErrorClass.MISSING_FINAL_ANSWER


def test_events_after_answer_ignored():
    assert _validate("<ANSWER>1</ANSWER><JOIN-9>", 2) is None


@settings(max_examples=300, deadline=None)
@given(texts, st.integers(2, 4), st.integers(0, 400))
def test_prefix_monotone(text, c, cut):
    cut %= len(text) + 1
    early = validate_trace(scan_stream([text[:cut]])[0], c)
    if early is not None and early.error_class is not ErrorClass.MISSING_FINAL_ANSWER:
        full = validate_trace(scan_stream([text])[0], c)
        assert full is not None and full.position <= early.position


# -- structures ---------------------------------------------------------------


def _all_valid(c, n):
    """Brute-force every action sequence with n forks (ids in order) valid under c."""
    out = []

    def rec(seq, active, next_id):
        if next_id > n and not active:
            out.append(tuple(seq) + (Action("answer"),))
            return
        if next_id <= n and len(active) < c - 1:
            rec(seq + [Action("fork", next_id)], active + [next_id], next_id + 1)
        for i in active:
            rec(seq + [Action("join", i)], [a for a in active if a != i], next_id)

    rec([], [], 1)
    return out


def test_no_forks():
    assert sample_structure(2, 0, 123) == (Action("answer"),)


def test_capacity_two_is_interleaved():
    shapes = _all_valid(2, 2)
    assert [" ".join(map(str, s)) for s in shapes] == ["F1 J1 F2 J2 A"]
    assert sample_structure(2, 2, 7) in shapes


@pytest.mark.parametrize("c,n", [(2, 3), (3, 3), (4, 3), (3, 4), (5, 4)])
def test_counts_match_brute_force(c, n):
    assert count_structures(c, n) == len(_all_valid(c, n))


def test_sampling_is_uniform():
    shapes = _all_valid(4, 3)
    hits = {s: 0 for s in shapes}
    draws = 15 * 400
    for seed in range(draws):
        hits[sample_structure(4, 3, seed)] += 1
    expected = draws / len(shapes)
    chi2 = sum((h - expected) ** 2 / expected for h in hits.values())
    assert chi2 < 45  # 14 degrees of freedom; p ~ 1e-4


def test_sample_example_validates():
    s = sample_structure(4, 3, 3)
    assert len(s) == 7 and s[-1] == Action("answer")
    assert validate_trace(structure_events(s), 4) is None


def test_rejects_too_many_forks():
    with pytest.raises(ValueError):
        sample_structure(4, 65, 0)
    with pytest.raises(ValueError):
        sample_structure(1, 1, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10), st.integers(0, 2**32))
def test_sampled_structures_valid_and_roundtrip(c, n, seed):
    s = sample_structure(c, n, seed)
    assert s == sample_structure(c, n, seed)
    events = structure_events(s)
    assert validate_trace(events, c) is None
    assert actions_from_events(events) == s
    assert sum(a.kind == "fork" for a in s) == n
    text = render_structure(s)
    assert all(e.kind is not K.THINK or "<" not in e.text for e in events), text


def test_render_examples():
    assert render_structure([Action("fork", 1), Action("join", 1), Action("answer")]) == (
        "<FORK-1>…</FORK-1> … <JOIN-1> … <ANSWER>…</ANSWER>"
    )
    assert render_structure([Action("answer")]) == "<ANSWER>…</ANSWER>"
    assert [str(Action.parse(t)) for t in ("F3", "J12", "A")] == ["F3", "J12", "A"]


# -- step accounting ----------------------------------------------------------


def test_tokenize_pieces():
    assert tokenize("Let me <FORK-1>try</FORK-1> ok") == ["Let ", "me ", "<FORK-1>", "try", "</FORK-1> ", "ok"]
    assert tokenize("  lead") == ["  ", "lead"]
    assert tokenize("a<b") == ["a", "<", "b"]
    assert tokenize("abc", "chars") == ["a", "b", "c"]


@given(st.text(max_size=80))
def test_tokenize_is_a_partition(text):
    assert "".join(tokenize(text)) == text
    assert all(tokenize(text))


def test_clip_stops_after_tag_then_budget():
    text = "a b <JOIN-1> c d <ANSWER>1</ANSWER>"
    kept, stop = clip(text, "organizer", [K.JOIN_REQUEST, K.ANSWER_CLOSE], 10)
    assert kept == "a b <JOIN-1>" and stop.kind is K.JOIN_REQUEST
    kept, stop = clip(text, "organizer", [K.JOIN_REQUEST], 2)
    assert kept == "a b " and stop is None


def test_validator_is_incremental():
    v = FormatValidator(3)
    assert v.push(ProtocolEvent(K.FORK_OPEN, 1, "<FORK-1>", 0)) is None
    assert v.push(ProtocolEvent(K.FORK_CLOSE, 1, "</FORK-1>", 8)) is None
    assert v.finish().error_class is ErrorClass.MISSING_FINAL_ANSWER


def test_structure_enumeration_matches_itertools_filter():
    # independent check of the c=3, n=2 family by filtering all permutations
    acts = ["F1", "F2", "J1", "J2"]
    valid = set()
    for perm in itertools.permutations(acts):
        if perm.index("F1") < perm.index("F2") and perm.index("F1") < perm.index("J1") and perm.index("F2") < perm.index("J2"):
            valid.add(perm)
    assert count_structures(3, 2) == len(valid)
