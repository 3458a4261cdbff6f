"""Server-side prompt aggregation strategies.

Four ways to merge the sampled clients' prompts into the next global prompt:
plain concatenation, LLM summarization, LLM summarization nudged toward
uniform information density, and a dynamic switch that concatenates while the
result stays under a token threshold and summarizes beyond it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from fedprompt.backends.base import Backend, GenerationRequest, count_tokens
from fedprompt.errors import ContextWindowExceeded, EmptyOutput
from fedprompt.prompts import PromptState
from fedprompt.templates import Templates, default_templates, fill

logger = logging.getLogger(__name__)

DEFAULT_SEPARATOR = "\n\n"
DEFAULT_DYNAMIC_THRESHOLD = 800

STRATEGY_IDS = ("concat", "summarize", "summarize-uid", "dynamic")


@dataclass
class AggregationInput:
    """Client prompts to merge, kept in ascending client-id order."""

    prompts: list[tuple[int, PromptState]]
    separator: str = DEFAULT_SEPARATOR
    budget: int = 8192
    backend: Backend | None = None

    def __post_init__(self) -> None:
        if not self.prompts:
            raise ValueError("aggregation needs at least one prompt")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        self.prompts = sorted(self.prompts, key=lambda cp: cp[0])

    def texts(self) -> list[str]:
        return [state.text for _, state in self.prompts]

    def concat_text(self) -> str:
        return self.separator.join(self.texts())


def aggregate_concat(agg_input: AggregationInput) -> PromptState:
    """Join the prompts with the separator; no model call.

    Token length is additive: parts plus (k-1) separators. The result must
    fit the budget — overflow is this strategy's documented failure mode.
    """
    text = agg_input.concat_text()
    tokens = count_tokens(text)
    if tokens > agg_input.budget:
        raise ContextWindowExceeded(
            f"concatenated prompt is {tokens} tokens against a budget of {agg_input.budget}",
            needed=tokens,
            budget=agg_input.budget,
        )
    return PromptState(text=text, producer="concat")


def _summarize(
    agg_input: AggregationInput,
    template: str,
    producer: str,
    final_instruction: str | None,
) -> PromptState:
    if agg_input.backend is None:
        raise ValueError("summarization strategies need a backend")
    numbered = "\n\n".join(
        f"{i}. {text}" for i, text in enumerate(agg_input.texts(), start=1)
    )
    result = agg_input.backend.generate(
        GenerationRequest(
            tag="aggregation_summarize",
            system_text="",
            user_text=fill(template, prompts=numbered),
        )
    )
    merged = result.text.strip()
    if not merged:
        raise EmptyOutput("summarization returned blank text")
    if final_instruction and not merged.endswith(final_instruction.strip()):
        logger.warning(
            "summarized prompt does not end with the designated final instruction"
        )
    return PromptState(text=merged, producer=producer)


def aggregate_summarize(
    agg_input: AggregationInput,
    templates: Templates | None = None,
    final_instruction: str | None = None,
) -> PromptState:
    """One summarization call merging the numbered client prompts."""
    templates = templates or default_templates()
    return _summarize(agg_input, templates.summarize_template, "summarize", final_instruction)


def aggregate_summarize_uid(
    agg_input: AggregationInput,
    templates: Templates | None = None,
    final_instruction: str | None = None,
) -> PromptState:
    """Summarization with the uniform-information-density nudge in the request."""
    templates = templates or default_templates()
    return _summarize(
        agg_input, templates.summarize_uid_template, "summarize_uid", final_instruction
    )


def aggregate_dynamic(
    agg_input: AggregationInput,
    threshold: int = DEFAULT_DYNAMIC_THRESHOLD,
    templates: Templates | None = None,
    final_instruction: str | None = None,
) -> PromptState:
    """Concatenate while the result fits ``threshold`` tokens, else summarize.

    The boundary stays with concatenation: exactly ``threshold`` tokens does
    not switch.
    """
    would_be = count_tokens(agg_input.concat_text())
    if would_be <= threshold:
        return aggregate_concat(agg_input)
    return aggregate_summarize(agg_input, templates, final_instruction)


def aggregate(
    strategy: str,
    agg_input: AggregationInput,
    templates: Templates | None = None,
    threshold: int = DEFAULT_DYNAMIC_THRESHOLD,
    final_instruction: str | None = None,
) -> PromptState:
    """Dispatch on a strategy id from :data:`STRATEGY_IDS`."""
    if strategy == "concat":
        return aggregate_concat(agg_input)
    if strategy == "summarize":
        return aggregate_summarize(agg_input, templates, final_instruction)
    if strategy == "summarize-uid":
        return aggregate_summarize_uid(agg_input, templates, final_instruction)
    if strategy == "dynamic":
        return aggregate_dynamic(agg_input, threshold, templates, final_instruction)
    raise ValueError(f"unknown aggregation strategy: {strategy!r}")
