"""Deterministic scripted backend for tests and offline runs.

The mock answers from a script table and an optional rule layer; it never
improvises. A miss is a hard :class:`~fedprompt.errors.NoScriptMatch` so a
test that drifts from its expected call pattern fails loudly instead of
silently absorbing a canned reply.
"""

from __future__ import annotations

import json
from pathlib import Path

from fedprompt.backends.base import (
    Backend,
    BackendDescriptor,
    GenerationRequest,
    GenerationResult,
    RuleFn,
    first_matching,
)
from fedprompt.errors import NoScriptMatch


def _normalize(text: str) -> str:
    """Collapse whitespace runs so scripts are insensitive to formatting."""
    return " ".join(text.split())


class MockBackend(Backend):
    """Script-table backend.

    Lookup order for a request: exact match on ``(tag, normalized user_text)``,
    then the longest matching prefix entry for the tag, then the rule layer
    (callables that see the whole request and may return a reply or ``None``).
    If nothing matches, raise.
    """

    def __init__(self, descriptor: BackendDescriptor | None = None):
        super().__init__(
            descriptor
            or BackendDescriptor(kind="mock", model_id="mock", supports_logprobs=False)
        )
        self._exact: dict[tuple[str, str], str] = {}
        self._prefix: dict[str, list[tuple[str, str]]] = {}
        self._rules: list[RuleFn] = []

    # -- script construction -------------------------------------------------

    def add(self, tag: str, user_text: str, response: str, match: str = "exact") -> None:
        key = _normalize(user_text)
        if match == "exact":
            self._exact[(tag, key)] = response
        elif match == "prefix":
            self._prefix.setdefault(tag, []).append((key, response))
            # longest prefix should win, so keep the list sorted
            self._prefix[tag].sort(key=lambda kv: len(kv[0]), reverse=True)
        else:
            raise ValueError(f"unknown match mode: {match!r}")

    def add_rule(self, rule: RuleFn) -> None:
        self._rules.append(rule)

    # -- generation -----------------------------------------------------------

    def _generate(self, request: GenerationRequest) -> GenerationResult:
        reply = self._lookup(request)
        if reply is None:
            raise NoScriptMatch(
                f"no script entry or rule for tag={request.tag!r} "
                f"user_text={_normalize(request.user_text)[:120]!r}"
            )
        return self._make_result(request, reply)

    def _lookup(self, request: GenerationRequest) -> str | None:
        key = _normalize(request.user_text)
        hit = self._exact.get((request.tag, key))
        if hit is not None:
            return hit
        for prefix, response in self._prefix.get(request.tag, ()):
            if key.startswith(prefix):
                return response
        return first_matching(self._rules, request)


def load_script(path: str | Path, descriptor: BackendDescriptor | None = None) -> MockBackend:
    """Build a :class:`MockBackend` from a JSON script file.

    The file holds a list of entries::

        [{"tag": "forward", "user_text": "...", "response": "...",
          "match": "exact"}]

    ``match`` defaults to ``"exact"``; ``"prefix"`` matches any request whose
    normalized user text starts with the entry's text.
    """
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    backend = MockBackend(descriptor)
    for entry in entries:
        backend.add(
            tag=entry["tag"],
            user_text=entry["user_text"],
            response=entry["response"],
            match=entry.get("match", "exact"),
        )
    return backend
