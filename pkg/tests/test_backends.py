import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest
from conftest import fork_join_script

from asyncthink.backends import HttpBackend, MockBackend, MockPolicy, ScriptedBackend
from asyncthink.backends.base import (
    ORGANIZER_STOPS,
    WORKER_STOPS,
    AuthError,
    BackendFailure,
    ExhaustedScript,
    GenerationRequest,
)
from asyncthink.backends.prompts import (
    GENERIC_INSTRUCTION,
    MCD_INSTRUCTION,
    MissingSlot,
    organizer_prompt,
    worker_prompt,
)
from asyncthink.engine import EpisodeConfig, run_episode
from asyncthink.protocol import ErrorClass, TagSyntax, tokenize


def test_organizer_prompt_states_capacity():
    p = organizer_prompt(MCD_INSTRUCTION, "Target: 10", 2)
    assert "at most 1 subtasks running concurrently" in p
    assert "<FORK-i>subtask description</FORK-i>" in p and "<JOIN-i>" in p
    assert p.endswith("Target: 10")
    assert "at most 3 subtasks" in organizer_prompt(MCD_INSTRUCTION, "q", 4)


def test_worker_prompt_scaffold():
    p = worker_prompt(GENERIC_INSTRUCTION, "add 2 and 3")
    assert "Complete the subtask and provide results in:\n<RETURN>\n" in p
    assert p.rstrip().endswith("</RETURN>")
    alt = TagSyntax(return_open="<ret>", return_close="</ret>")
    assert "<ret>\n" in worker_prompt(GENERIC_INSTRUCTION, "x", alt)


@pytest.mark.parametrize("args", [("", "q", 2), ("do it", " ", 2), ("do it", "q", None)])
def test_missing_slot(args):
    with pytest.raises(MissingSlot):
        organizer_prompt(*args)


def _req(role="organizer", **kw):
    kw.setdefault("stop_conditions", ORGANIZER_STOPS if role == "organizer" else ())
    return GenerationRequest(role=role, prompt="p", max_steps=kw.pop("max_steps", 100), **kw)


def test_scripted_cursor_and_stop():
    b = ScriptedBackend("a b <JOIN-1> c <ANSWER>1</ANSWER> tail")
    r1 = b.generate(_req())
    assert (r1.text, r1.stopped) == ("a b <JOIN-1>", True)
    r2 = b.generate(_req(stream_handle=r1.stream_handle))
    assert r2.text == " c <ANSWER>1</ANSWER>"
    with pytest.raises(ExhaustedScript):
        b.generate(_req(role="worker", slot=0))


def test_scripted_step_cap():
    r = ScriptedBackend("one two three four <ANSWER>x</ANSWER>").generate(_req(max_steps=2))
    assert r.text == "one two " and not r.stopped


def test_mock_without_forks_is_sequential():
    for s in range(20):
        t = run_episode(MockBackend(MockPolicy(fork_prob=0.0), s), "q", EpisodeConfig(capacity=4, seed=s))
        assert t.workers == [] and t.final_answer is not None
        assert set(t.activity.counts) == {1}


def test_mock_same_seed_same_episode():
    cfg = EpisodeConfig(capacity=3, seed=5)
    a = run_episode(MockBackend(MockPolicy(), 42), "q", cfg).to_json()
    assert a == run_episode(MockBackend(MockPolicy(), 42), "q", cfg).to_json()
    assert a != run_episode(MockBackend(MockPolicy(), 43), "q", cfg).to_json()


def test_mock_overflow_at_capacity_two():
    policy = MockPolicy(n_forks=1, error_mode="AgentPoolOverflow")
    t = run_episode(MockBackend(policy, 0), "q", EpisodeConfig(capacity=2))
    assert t.format_error.error_class is ErrorClass.AGENT_POOL_OVERFLOW


@pytest.mark.parametrize("mode", [e.value for e in ErrorClass])
@pytest.mark.parametrize("seed", range(5))
def test_mock_injects_each_class(mode, seed):
    policy = MockPolicy(n_forks=2, error_mode=mode)
    t = run_episode(MockBackend(policy, seed), "q", EpisodeConfig(capacity=3, seed=seed))
    assert t.format_error is not None and t.format_error.error_class.value == mode


def test_mock_error_free_by_default():
    for s in range(50):
        t = run_episode(MockBackend(MockPolicy(max_forks=6), s), "q", EpisodeConfig(capacity=2 + s % 3, seed=s))
        assert t.format_error is None, t.format_error


def test_mock_policy_validation():
    with pytest.raises(ValueError):
        MockPolicy(error_mode="Nope")


# streaming endpoint -----------------------------------------------------------


def _sse(text, size=3):
    chunks = [text[i : i + size] for i in range(0, len(text), size)]
    lines = [f"data: {json.dumps({'choices': [{'delta': {'content': c}}]})}\n\n" for c in chunks]
    return "".join(lines) + "data: [DONE]\n\n"


class _Echo:
    """Replays a finished trace: organizer continuation from context, workers by sub-query."""

    def __init__(self, trace):
        self.full = trace.organizer_text
        self.workers = {w.sub_query: w.text for w in trace.workers}
        self.bodies = []

    def reply(self, body):
        self.bodies.append(body)
        msgs = body["messages"]
        if msgs[0]["content"].startswith("This is a subprocess"):
            sub = re.search(r"Subtask: (.*?)\n\n", msgs[0]["content"], re.S).group(1)
            return self.workers[sub]
        context = msgs[1]["content"] if len(msgs) > 1 else ""
        assert self.full.startswith(context)
        # keep talking past the stop tag; the client must cut it
        return self.full[len(context) :] + " trailing junk"


def _transport(echo):
    def handler(request):
        body = json.loads(request.content)
        return httpx.Response(200, text=_sse(echo.reply(body)), headers={"content-type": "text/event-stream"})

    return httpx.MockTransport(handler)


def test_http_matches_scripted(fork_join_trace):
    ref = fork_join_trace()
    echo = _Echo(ref)
    b = HttpBackend("http://model/v1/chat/completions", "tok", transport=_transport(echo), concurrent=False)
    t = run_episode(b, ref.query, ref.config)
    assert t.to_json() == ref.to_json()
    assert all(body["stream"] for body in echo.bodies)


def test_http_matches_mock_episodes():
    for s in range(10):
        ref = run_episode(MockBackend(MockPolicy(n_forks=3), s), "q", EpisodeConfig(capacity=3, seed=s))
        if len({w.sub_query for w in ref.workers}) < len(ref.workers):
            continue
        b = HttpBackend("http://m/", transport=_transport(_Echo(ref)))
        assert run_episode(b, "q", ref.config).to_json() == ref.to_json()


class _Breaks(httpx.SyncByteStream):
    def __init__(self, payload):
        self.payload = payload

    def __iter__(self):
        yield self.payload[: len(self.payload) // 2]
        raise httpx.ReadError("connection reset")


def test_http_retries_midstream_close():
    org, _ = fork_join_script()
    seen = {"calls": 0}
    text = _sse(org.split("<JOIN-1>")[0] + "<JOIN-1>")

    def handler(request):
        seen["calls"] += 1
        if seen["calls"] == 1:
            return httpx.Response(200, stream=_Breaks(text.encode()))
        return httpx.Response(200, text=text)

    b = HttpBackend("http://m/", transport=httpx.MockTransport(handler), backoff=0.0)
    r = b.generate(GenerationRequest("organizer", "p", 100, ORGANIZER_STOPS))
    assert r.retries == 1 and r.text.endswith("<JOIN-1>") and r.stopped


def test_http_server_errors_exhaust_retries():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    b = HttpBackend("http://m/", transport=httpx.MockTransport(handler), max_retries=2, backoff=0.0)
    with pytest.raises(BackendFailure) as exc:
        b.generate(GenerationRequest("worker", "p", 10))
    assert exc.value.retries == 2 and len(calls) == 3


def test_http_auth_error_not_retried():
    calls = []

    def handler(request):
        calls.append(request.headers.get("authorization"))
        return httpx.Response(401)

    b = HttpBackend("http://m/", "secret", transport=httpx.MockTransport(handler))
    with pytest.raises(AuthError):
        b.generate(GenerationRequest("worker", "p", 10))
    assert calls == ["Bearer secret"]


def test_http_step_cap_applied_client_side():
    def handler(request):
        return httpx.Response(200, text=_sse("w " * 50))

    b = HttpBackend("http://m/", transport=httpx.MockTransport(handler))
    r = b.generate(GenerationRequest("worker", "p", 7))
    assert len(tokenize(r.text)) == 7 and not r.stopped


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        self.rfile.read(int(self.headers["content-length"]))
        body = _sse("fine <RETURN>5</RETURN> extra").encode()
        self.send_response(200)
        self.send_header("content-type", "text/event-stream")
        self.send_header("content-length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def test_http_against_local_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        b = HttpBackend(f"http://127.0.0.1:{server.server_port}/v1/chat/completions")
        r = b.generate(GenerationRequest("worker", "p", 100, WORKER_STOPS))
        assert r.text == "fine <RETURN>5</RETURN>" and r.stopped
        b.close()
    finally:
        server.shutdown()


def test_http_unreachable():
    b = HttpBackend("http://127.0.0.1:9/", max_retries=1, backoff=0.0, timeout=2)
    with pytest.raises(BackendFailure) as exc:
        b.generate(GenerationRequest("worker", "p", 10))
    assert exc.value.retries == 1
