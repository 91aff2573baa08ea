"""Organizer and worker prompt templates."""

from __future__ import annotations

import string
from dataclasses import dataclass

from ..protocol import EventKind as K
from ..protocol import TagSyntax


class MissingSlot(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    scaffold: str

    def slots(self) -> set[str]:
        return {name for _, name, _, _ in string.Formatter().parse(self.scaffold) if name}


ORGANIZER_TEMPLATE = PromptTemplate(
    "organizer",
    "This is main process.\n\n"
    "{instruction}\n\n"
    "Use {fork_open}subtask description{fork_close} to delegate work and {join_open} to wait for results. "
    "Integrate these results and provide final answer with {answer_open}your final answer{answer_close}. "
    "Notice that you can have at most {max_workers} subtasks running concurrently; "
    "any additional ones must wait until earlier ones finish.\n\n"
    "{query}",
)

WORKER_TEMPLATE = PromptTemplate(
    "worker",
    "This is a subprocess.\n\n"
    "{instruction}\n\n"
    "Subtask: {query}\n\n"
    "Complete the subtask and provide results in:\n"
    "{return_open}\n"
    "(Your short summary and valid expressions found)\n"
    "{return_close}\n",
)

MCD_INSTRUCTION = (
    "Combine between three and six of the given numbers, each at most once, with + - * / and "
    "parentheses so that the expression evaluates to the target. Give four expressions that differ "
    "in the numbers they use or in how many times they use some operator, one expression per line."
)

GENERIC_INSTRUCTION = "Think the problem through and give the final answer."


def assemble_prompt(
    template: PromptTemplate,
    instruction: str,
    query: str,
    capacity: int | None = None,
    syntax: TagSyntax | None = None,
) -> str:
    """Fill ``template``; tags are written in ``syntax`` so prompt and parser agree."""
    syntax = syntax or TagSyntax()
    if not instruction or not instruction.strip():
        raise MissingSlot("instruction")
    if not query or not query.strip():
        raise MissingSlot("query")
    values = {
        "instruction": instruction,
        "query": query,
        "fork_open": syntax.render(K.FORK_OPEN, "i"),
        "fork_close": syntax.render(K.FORK_CLOSE, "i"),
        "join_open": syntax.render(K.JOIN_REQUEST, "i"),
        "answer_open": syntax.render(K.ANSWER_OPEN),
        "answer_close": syntax.render(K.ANSWER_CLOSE),
        "return_open": syntax.render(K.RETURN_OPEN),
        "return_close": syntax.render(K.RETURN_CLOSE),
    }
    if "max_workers" in template.slots():
        if capacity is None:
            raise MissingSlot("capacity")
        if capacity < 2:
            raise ValueError("capacity must be >= 2")
        values["max_workers"] = str(capacity - 1)
    missing = template.slots() - values.keys()
    if missing:
        raise MissingSlot(", ".join(sorted(missing)))
    return template.scaffold.format(**values)


def organizer_prompt(instruction: str, query: str, capacity: int, syntax: TagSyntax | None = None) -> str:
    return assemble_prompt(ORGANIZER_TEMPLATE, instruction, query, capacity, syntax)


def worker_prompt(instruction: str, sub_query: str, syntax: TagSyntax | None = None) -> str:
    return assemble_prompt(WORKER_TEMPLATE, instruction, sub_query, None, syntax)
