"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 backend failure, 4 data or
schema error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import metrics
from .backends import BackendFailure, HttpBackend, MockBackend, MockPolicy, ScriptedBackend
from .backends.mock import ERROR_MODES, mcd_answer, number_answer
from .backends.prompts import GENERIC_INSTRUCTION, MCD_INSTRUCTION
from .engine import EpisodeConfig, EpisodeTrace, ReplayDivergence, SchemaError, load_traces, replay, run_episode
from .protocol import SyntaxConfigError, count_structures, load_syntax, render_structure, sample_structure, validate_trace
from .protocol import structure_events
from .rewards import RewardConfig, accuracy_binary, group_advantages, score_episode, token_masks
from .tasks.countdown import CountdownInstance, GenerationBudgetExceeded, GenParams, gen_countdown, mcd_accuracy
from .tasks.sudoku import parse_grid, verify_sudoku4

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_DATA = 0, 2, 3, 4
TOKEN_ENV = "ASYNCTHINK_API_TOKEN"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class MissingGold(DataError):
    pass


class GroupTooSmall(DataError):
    pass


# ---------------------------------------------------------------------------
# manifest handling
# ---------------------------------------------------------------------------


def read_manifest(path: str | None) -> dict[str, str]:
    """``key = value`` lines (an optional ``[section]`` header is ignored)."""
    if not path:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text(encoding="utf-8")
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        parser.read_string(text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    out: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key.replace("-", "_")] = value
    return out


def _setting(args, manifest: dict, name: str, default: Any = None, cast: Callable = str):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in manifest:
        try:
            return cast(manifest[name])
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {manifest[name]!r}") from exc
    return default


def _int_pair(text: str) -> tuple[int, int]:
    parts = [int(p) for p in str(text).replace(",", " ").replace("-", " ").split()]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise ValueError(text)
    return parts[0], parts[1]


@dataclass
class RunManifest:
    task: str
    dataset: str
    backend: str
    episode: EpisodeConfig
    reward: RewardConfig
    output: str
    group_size: int
    seed: int
    jobs: int
    limit: int | None
    backend_opts: dict


def build_manifest(args) -> RunManifest:
    m = read_manifest(args.config)
    task = _setting(args, m, "task", "mcd")
    if task not in ("mcd", "generic", "sudoku"):
        raise ConfigError(f"unknown task {task!r}")
    dataset = _setting(args, m, "dataset")
    if not dataset:
        raise ConfigError("a dataset path is required")
    if not Path(dataset).is_file():
        raise ConfigError(f"dataset {dataset} not found")
    output = _setting(args, m, "output")
    if not output:
        raise ConfigError("an output path is required")
    backend = _setting(args, m, "backend", "mock")
    if backend not in ("mock", "http", "scripted"):
        raise ConfigError(f"unknown backend {backend!r}")
    syntax_path = _setting(args, m, "syntax")
    try:
        syntax = load_syntax(syntax_path) if syntax_path else None
        instruction = MCD_INSTRUCTION if task == "mcd" else GENERIC_INSTRUCTION
        kw = dict(
            capacity=_setting(args, m, "capacity", 2, int),
            worker_budget=_setting(args, m, "worker_budget", 512, int),
            organizer_segment_budget=_setting(args, m, "segment_budget", 512, int),
            max_total_steps=_setting(args, m, "max_total_steps", 8192, int),
            weigher=_setting(args, m, "weigher", "pieces"),
            instruction=instruction,
        )
        if syntax is not None:
            kw["syntax"] = syntax
        episode = EpisodeConfig(**kw)
        reward = RewardConfig(
            tau=_setting(args, m, "tau", 0.5, float),
            lam=_setting(args, m, "lam", 0.5, float),
            r_fe=_setting(args, m, "r_fe", -1.0, float),
            epsilon=_setting(args, m, "epsilon", 1e-6, float),
        )
    except (ValueError, OSError, SyntaxConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    group_size = _setting(args, m, "group_size", 1, int)
    if group_size < 1:
        raise ConfigError("group_size must be >= 1")
    jobs = _setting(args, m, "jobs", 1, int)
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    opts = {
        "fork_prob": _setting(args, m, "fork_prob", 0.5, float),
        "max_forks": _setting(args, m, "max_forks", 6, int),
        "error_mode": _setting(args, m, "error_mode", None),
        "error_rate": _setting(args, m, "error_rate", 1.0, float),
        "endpoint": _setting(args, m, "endpoint", None),
        "model": _setting(args, m, "model", "default"),
        "timeout": _setting(args, m, "timeout", 60.0, float),
        "retries": _setting(args, m, "retries", 3, int),
        "script": _setting(args, m, "script", None),
    }
    if opts["error_mode"] in ("", "none"):
        opts["error_mode"] = None
    if opts["error_mode"] not in (None, "random", *ERROR_MODES):
        raise ConfigError(f"unknown error mode {opts['error_mode']!r}")
    if backend == "http" and not opts["endpoint"]:
        raise ConfigError("the http backend needs an endpoint")
    if backend == "scripted" and not opts["script"]:
        raise ConfigError("the scripted backend needs a script file")
    return RunManifest(
        task=task,
        dataset=dataset,
        backend=backend,
        episode=episode,
        reward=reward,
        output=output,
        group_size=group_size,
        seed=_setting(args, m, "seed", 0, int),
        jobs=jobs,
        limit=_setting(args, m, "limit", None, int),
        backend_opts=opts,
    )


def make_backend(manifest: RunManifest):
    o = manifest.backend_opts
    if manifest.backend == "mock":
        policy = MockPolicy(
            fork_prob=o["fork_prob"],
            max_forks=o["max_forks"],
            error_mode=o["error_mode"],
            error_rate=o["error_rate"],
            answer_fn=mcd_answer if manifest.task == "mcd" else number_answer,
        )
        return MockBackend(policy, manifest.seed, concurrent=manifest.jobs > 1)
    if manifest.backend == "http":
        return HttpBackend(
            o["endpoint"],
            os.environ.get(TOKEN_ENV),
            o["model"],
            timeout=o["timeout"],
            max_retries=o["retries"],
            max_inflight=manifest.episode.capacity * manifest.jobs,
        )
    try:
        script = json.loads(Path(o["script"]).read_text(encoding="utf-8"))
        return ScriptedBackend(script["organizer"], script.get("workers", []))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad script file: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets and gold answers
# ---------------------------------------------------------------------------


def load_dataset(path: str, task: str) -> list[tuple[str, dict]]:
    """(query, gold record) pairs."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if task == "mcd":
                    query = CountdownInstance.from_record(rec).query_text()
                elif task == "sudoku":
                    grid = parse_grid(rec["puzzle"])
                    query = rec.get("query") or "Solve this 4x4 Sudoku (0 = empty):\n" + "\n".join(
                        " ".join(map(str, row)) for row in grid
                    )
                else:
                    query = rec["query"]
                    str(rec["answer"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            out.append((query, rec))
    return out


def episode_accuracy(trace: EpisodeTrace, task: str, gold: dict) -> tuple[float, int | None]:
    """(R_A, n_c) where n_c is only defined for countdown."""
    answer = trace.final_answer
    if task == "mcd":
        n_c, r_a = mcd_accuracy(answer or "", CountdownInstance.from_record(gold))
        return r_a, n_c
    if task == "sudoku":
        try:
            grid = parse_grid(answer or "")
        except ValueError:
            return 0.0, None
        return float(verify_sudoku4(grid, parse_grid(gold["puzzle"]))[0]), None
    return accuracy_binary(answer, str(gold["answer"])), None


def _gold_lookup(args) -> Callable[[EpisodeTrace], tuple[str, dict]]:
    table: dict[str, dict] = {}
    task_override = getattr(args, "task", None)
    if getattr(args, "gold", None):
        task = task_override or "mcd"
        table = {q: rec for q, rec in load_dataset(args.gold, task)}

    def lookup(trace: EpisodeTrace):
        task = task_override or trace.meta.get("task")
        if trace.query in table:
            return task or "mcd", table[trace.query]
        if "gold" in trace.meta and task:
            return task, trace.meta["gold"]
        raise MissingGold(f"no gold answer for episode {trace.episode_id!r}")

    return lookup


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _episode_seed(base: int, query_index: int, member: int) -> int:
    return (base * 1_000_003 + query_index * 4_099 + member) % (2**31)


def cmd_run(args) -> int:
    manifest = build_manifest(args)
    items = load_dataset(manifest.dataset, manifest.task)
    if manifest.limit is not None:
        items = items[: manifest.limit]
    backend = make_backend(manifest)
    jobs = []
    for qi, (query, gold) in enumerate(items):
        for g in range(manifest.group_size):
            cfg = EpisodeConfig(**{**manifest.episode.__dict__, "seed": _episode_seed(manifest.seed, qi, g)})
            jobs.append((query, gold, cfg, f"q{qi:05d}-g{g:02d}", f"q{qi:05d}"))

    def one(job):
        query, gold, cfg, eid, gid = job
        trace = run_episode(backend, query, cfg, episode_id=eid, group_id=gid)
        trace.meta = {"task": manifest.task, "gold": gold}
        return trace

    traces = []
    out = Path(manifest.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(out, "w", encoding="utf-8") as fh:
            if manifest.jobs > 1:
                with ThreadPoolExecutor(manifest.jobs) as pool:
                    for trace in pool.map(one, jobs):
                        fh.write(trace.to_json() + "\n")
                        traces.append(trace)
            else:
                for job in jobs:
                    trace = one(job)
                    fh.write(trace.to_json() + "\n")
                    traces.append(trace)
    except BackendFailure as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    summary = summarize(traces, manifest.task)
    print(json.dumps(summary, indent=1))
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def summarize(traces: list[EpisodeTrace], task: str) -> dict:
    accs, lats, rhos, errors = [], [], [], 0
    for t in traces:
        accs.append(episode_accuracy(t, task, t.meta["gold"])[0])
        row = metrics.analyze_trace(t)
        if row["total_latency"] != "":
            lats.append(row["total_latency"])
        if row["rho"] != "":
            rhos.append(row["rho"])
        errors += t.format_error is not None or t.aborted
    n = max(len(traces), 1)
    return {
        "episodes": len(traces),
        "accuracy": sum(accs) / n,
        "mean_latency": sum(lats) / len(lats) if lats else None,
        "mean_rho": sum(rhos) / len(rhos) if rhos else None,
        "format_error_rate": errors / n,
    }


def _load_all(paths) -> list[EpisodeTrace]:
    traces = []
    for p in paths:
        try:
            traces.extend(load_traces(p))
        except SchemaError as exc:
            raise SchemaError(f"{p}: {exc}") from None
    return traces


def cmd_replay(args) -> int:
    out = open(args.out, "w", encoding="utf-8") if args.out else None
    try:
        for trace in _load_all(args.traces):
            try:
                again = replay(trace)
            except ReplayDivergence as exc:
                print(f"{trace.episode_id}: {exc}", file=sys.stderr)
                return EXIT_DATA
            if out:
                out.write(again.to_json() + "\n")
    finally:
        if out:
            out.close()
    print("replay ok")
    return EXIT_OK


def cmd_analyze(args) -> int:
    rows = [metrics.analyze_trace(t) for t in _load_all(args.traces)]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=metrics.CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            fh.close()
    if args.dot_dir:
        cmd_export_dot(argparse.Namespace(traces=args.traces, out_dir=args.dot_dir))
    return EXIT_OK


def _reward_config(args) -> RewardConfig:
    try:
        return RewardConfig(tau=args.tau, lam=args.lam, r_fe=args.r_fe, epsilon=args.epsilon)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _scores(args):
    cfg = _reward_config(args)
    lookup = _gold_lookup(args)
    out = []
    for trace in _load_all(args.traces):
        task, gold = lookup(trace)
        r_a, n_c = episode_accuracy(trace, task, gold)
        out.append((trace, score_episode(trace, r_a, cfg), n_c, gold))
    return cfg, out


def cmd_score(args) -> int:
    cfg, scored = _scores(args)
    lines = []
    for trace, reward, n_c, _ in scored:
        rec = {"episode_id": trace.episode_id, "group_id": trace.group_id, **reward.to_dict()}
        if n_c is not None:
            rec["n_c"] = n_c
        lines.append(json.dumps(rec, ensure_ascii=False))
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    else:
        print("\n".join(lines))
    summary: dict[str, Any] = {
        "episodes": len(scored),
        "mean_R_i": sum(r.combined for _, r, _, _ in scored) / max(len(scored), 1),
        "reward_config": cfg.to_dict(),
    }
    mcd = [(n_c, gold) for _, _, n_c, gold in scored if n_c is not None]
    if mcd:
        n_s = max(int(g.get("n_s", 4)) for _, g in mcd)
        summary["at_least_correct"] = {str(a): sum(n >= a for n, _ in mcd) / len(mcd) for a in range(1, n_s + 1)}
    print(json.dumps(summary), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_export_rl(args) -> int:
    cfg, scored = _scores(args)
    groups: dict[str, list] = {}
    for item in scored:
        groups.setdefault(item[0].group_id, []).append(item)
    lines = []
    for gid, members in groups.items():
        if len(members) < 2:
            raise GroupTooSmall(f"group {gid!r} has {len(members)} episode(s); at least 2 are needed")
        advs = group_advantages([r.combined for _, r, _, _ in members], cfg.epsilon)
        degenerate = all(a == 0.0 for a in advs)
        for (trace, reward, _, _), adv in zip(members, advs):
            batch = token_masks(trace, adv)
            for rec in batch.records:
                lines.append(
                    json.dumps(
                        {
                            "episode_id": trace.episode_id,
                            "group_id": gid,
                            "reward": reward.combined,
                            "degenerate": degenerate,
                            **rec.to_dict(),
                        },
                        ensure_ascii=False,
                    )
                )
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_export_dot(args) -> int:
    traces = _load_all(args.traces)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    for n, trace in enumerate(traces):
        try:
            dot = metrics.to_dot(trace)
        except metrics.UnboundJoin as exc:
            print(f"skipping {trace.episode_id or n}: {exc}", file=sys.stderr)
            continue
        if args.out_dir:
            name = trace.episode_id or f"episode{n:05d}"
            (Path(args.out_dir) / f"{name}.dot").write_text(dot, encoding="utf-8")
        else:
            sys.stdout.write(dot)
    return EXIT_OK


def _read_exclusions(value: str | None) -> frozenset[int]:
    if not value:
        return frozenset()
    text = Path(value).read_text(encoding="utf-8") if Path(value).is_file() else value
    return frozenset(int(x) for x in text.replace(",", " ").split())


def cmd_gen_data(args) -> int:
    try:
        size = _int_pair(args.set_size)
        params = GenParams(
            target_range=_int_pair(args.target_range),
            number_range=_int_pair(args.number_range),
            set_size=size[0] if size[0] == size[1] else size,
            n_s=args.n_s,
            exclude_targets=_read_exclusions(args.exclude),
            max_attempts=args.max_attempts,
            strict=args.strict,
        )
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    lines = []
    for i in range(args.count):
        inst, certified = gen_countdown([args.seed, i], params)
        lines.append(json.dumps(inst.to_record(certified)))
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return EXIT_OK


def cmd_sample_structures(args) -> int:
    try:
        lo, hi = _int_pair(args.n_forks)
    except ValueError as exc:
        raise ConfigError(f"bad --n-forks {args.n_forks!r}") from exc
    lines = []
    for i in range(args.count):
        n = lo + i % (hi - lo + 1)
        structure = sample_structure(args.capacity, n, f"{args.seed}:{i}")
        err = validate_trace(structure_events(structure), args.capacity)
        if err is not None:
            raise DataError(f"sampled structure {i} failed validation: {err}")
        lines.append(
            json.dumps(
                {
                    "capacity": args.capacity,
                    "n_forks": n,
                    "actions": " ".join(map(str, structure)),
                    "text": render_structure(structure),
                    "shapes": count_structures(args.capacity, n),
                },
                ensure_ascii=False,
            )
        )
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_reward_flags(p):
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--r-fe", type=float, default=-1.0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--gold", help="dataset file with gold answers (defaults to gold stored in traces)")
    p.add_argument("--task", choices=("mcd", "generic", "sudoku"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asyncthink", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run episodes and write JSONL traces")
    p.add_argument("--config", help="key = value manifest; flags override it")
    p.add_argument("--task", choices=("mcd", "generic", "sudoku"))
    p.add_argument("--dataset")
    p.add_argument("--backend", choices=("mock", "http", "scripted"))
    p.add_argument("--output", "-o")
    p.add_argument("--summary", help="also write the summary JSON here")
    p.add_argument("--group-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--capacity", type=int)
    p.add_argument("--worker-budget", type=int)
    p.add_argument("--segment-budget", type=int)
    p.add_argument("--max-total-steps", type=int)
    p.add_argument("--weigher", choices=("pieces", "chars"))
    p.add_argument("--syntax", help="tag syntax file")
    p.add_argument("--fork-prob", type=float)
    p.add_argument("--max-forks", type=int)
    p.add_argument("--error-mode")
    p.add_argument("--error-rate", type=float)
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--timeout", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--script", help="JSON file {organizer, workers} for the scripted backend")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run traces from their recorded outputs")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("analyze", help="latency and concurrency CSV")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out")
    p.add_argument("--dot-dir")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("score", help="per-episode rewards")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out")
    _add_reward_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export-rl", help="group advantages with loss-mask spans")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out")
    _add_reward_flags(p)
    p.set_defaults(func=cmd_export_rl)

    p = sub.add_parser("export-dot", help="fork/join DAG in Graphviz format")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("gen-data", help="generate certified countdown instances")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-range", default="1-1000")
    p.add_argument("--number-range", default="1-100")
    p.add_argument("--set-size", default="6")
    p.add_argument("--n-s", type=int, default=4)
    p.add_argument("--exclude", help="targets to skip: a file or a comma list")
    p.add_argument("--max-attempts", type=int, default=200)
    p.add_argument("--strict", action="store_true", help="integer intermediate values only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sample-structures", help="random valid fork/join action sequences")
    p.add_argument("--capacity", type=int, default=2)
    p.add_argument("--n-forks", default="0-4", help="count or lo-hi range, cycled")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_structures)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendFailure as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (SchemaError, DataError, metrics.LatencyMismatch, metrics.UnboundJoin, metrics.Deadlock) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GenerationBudgetExceeded as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
