"""Language-model backends: remote HTTP, scripted mock, n-gram oracle."""

from fedprompt.backends.base import (
    DEFAULT_CONTEXT_WINDOW,
    DEFAULT_MAX_OUTPUT_TOKENS,
    DEFAULT_TEMPERATURES,
    GENERATION_TAGS,
    Backend,
    BackendDescriptor,
    CallLog,
    CallRecord,
    GenerationRequest,
    GenerationResult,
    TokenLogprobs,
    count_tokens,
)
from fedprompt.backends.mock import MockBackend, load_script
from fedprompt.backends.ngram import NgramBackend
from fedprompt.backends.remote import Cassette, RemoteBackend, request_hash

__all__ = [
    "DEFAULT_CONTEXT_WINDOW",
    "DEFAULT_MAX_OUTPUT_TOKENS",
    "DEFAULT_TEMPERATURES",
    "GENERATION_TAGS",
    "Backend",
    "BackendDescriptor",
    "CallLog",
    "CallRecord",
    "Cassette",
    "GenerationRequest",
    "GenerationResult",
    "MockBackend",
    "NgramBackend",
    "RemoteBackend",
    "TokenLogprobs",
    "count_tokens",
    "load_script",
    "request_hash",
]
