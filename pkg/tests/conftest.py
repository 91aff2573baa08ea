import pytest

from asyncthink.backends import ScriptedBackend
from asyncthink.engine import EpisodeConfig, run_episode

ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[AC-{number:02d}] {'PASS' if ok else 'FAIL'} {name}" + (f" :: {detail}" if detail else "")
    print(line)
    ACCEPTANCE.append((number, name, ok, detail))
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[AC-{number:02d}] {'PASS' if ok else 'FAIL'} {name}" + (f" :: {detail}" if detail else ""))


def words(n: int, stem: str = "w") -> str:
    """``n`` decode steps of filler text."""
    return "".join(f"{stem}{i} " for i in range(n))


def fork_join_script(f1=10, fork_at=4, worker=20, f2=6):
    """Organizer/worker text with exactly the requested step counts.

    Fragment 1 has ``f1`` steps and closes fork 1 on step ``fork_at``; the
    worker decodes ``worker`` steps; fragment 2 has ``f2`` steps.
    """
    assert fork_at >= 3 and f1 > fork_at and f2 >= 3 and worker >= 3
    org1 = words(fork_at - 3) + "<FORK-1>x</FORK-1> " + words(f1 - fork_at - 1, "v") + "<JOIN-1>"
    org2 = words(f2 - 3, "u") + "<ANSWER>7</ANSWER>"
    return org1 + org2, words(worker - 3, "k") + "<RETURN>ok</RETURN>"


def sequential_script(steps=30):
    return words(steps - 3) + "<ANSWER>7</ANSWER>"


@pytest.fixture
def fork_join_trace():
    def build(capacity=2, **kw):
        org, worker = fork_join_script(**kw)
        return run_episode(ScriptedBackend(org, [worker]), "constructed query", EpisodeConfig(capacity=capacity))

    return build


@pytest.fixture
def sequential_trace():
    def build(steps=30, capacity=2):
        return run_episode(ScriptedBackend(sequential_script(steps)), "constructed query", EpisodeConfig(capacity=capacity))

    return build
