"""Prompt lineage state shared by the runtime and the aggregation strategies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

#: (round, client_id) for client-produced prompts, (round, "server") for
#: server-produced ones. The initial prompt is (0, "server").
Version = tuple[int, "int | str"]

PRODUCERS = ("init", "tgd", "concat", "summarize", "summarize_uid", "dynamic")


@dataclass
class PromptState:
    """One node in the prompt lineage tree rooted at the initial prompt."""

    text: str
    version: Version | None = None
    parent_version: Version | None = None
    producer: str = "init"

    def __post_init__(self) -> None:
        if self.producer not in PRODUCERS:
            raise ValueError(f"unknown producer: {self.producer!r}")

    def as_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "version": list(self.version) if self.version else None,
            "parent_version": list(self.parent_version) if self.parent_version else None,
            "producer": self.producer,
        }
