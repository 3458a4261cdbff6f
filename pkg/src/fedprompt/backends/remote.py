"""OpenAI-compatible HTTP backend with retry and record/replay support.

Credentials come from the environment at call time and are never written to
disk; cassette files hold requests and responses only.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import requests

from fedprompt.backends.base import (
    Backend,
    BackendDescriptor,
    GenerationRequest,
    GenerationResult,
    TokenLogprobs,
    count_tokens,
)
from fedprompt.errors import BackendError, LogprobsUnsupported, TransportFailure

MAX_ATTEMPTS = 5


def request_hash(payload: dict[str, Any]) -> str:
    """Stable content hash of a request payload (canonical JSON, sha256)."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class _Recorded:
    """Responses stored for one request hash, replayed in recorded order."""

    responses: list[dict[str, Any]]
    cursor: int = 0

    def next(self) -> dict[str, Any]:
        if self.cursor < len(self.responses):
            out = self.responses[self.cursor]
            self.cursor += 1
            return out
        return self.responses[-1]


class Cassette:
    """JSONL request/response store.

    ``mode="record"`` appends every live exchange; ``mode="replay"`` serves
    stored responses by request hash and never touches the network. Each line
    is ``{"request_hash", "request", "response", "timestamp"}``.
    """

    def __init__(self, path: str | Path, mode: str = "replay"):
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown cassette mode: {mode!r}")
        self.path = Path(path)
        self.mode = mode
        self._store: dict[str, _Recorded] = {}
        if mode == "replay":
            self._load()

    def _load(self) -> None:
        if not self.path.exists():
            raise BackendError(f"cassette not found: {self.path}")
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                rec = self._store.setdefault(entry["request_hash"], _Recorded([]))
                rec.responses.append(entry["response"])

    def record(self, payload: dict[str, Any], response: dict[str, Any]) -> None:
        entry = {
            "request_hash": request_hash(payload),
            "request": payload,
            "response": response,
            "timestamp": time.time(),
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")

    def replay(self, payload: dict[str, Any]) -> dict[str, Any]:
        key = request_hash(payload)
        rec = self._store.get(key)
        if rec is None or not rec.responses:
            raise BackendError(f"cassette {self.path} has no response for request hash {key[:12]}…")
        return rec.next()


class RemoteBackend(Backend):
    """Chat-completions client for any OpenAI-compatible endpoint.

    Retries (up to :data:`MAX_ATTEMPTS` total attempts, exponential backoff)
    are for transport failures and HTTP 429 only; other HTTP errors surface
    immediately. Token scoring uses echo-style completions and requires the
    descriptor to advertise ``supports_logprobs``.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        api_key_env: str = "FEDPROMPT_API_KEY",
        cassette: Cassette | None = None,
        session: requests.Session | None = None,
        backoff_base: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float = 60.0,
    ):
        if descriptor.kind != "remote":
            raise ValueError("RemoteBackend needs a descriptor with kind='remote'")
        if not descriptor.endpoint:
            raise ValueError("RemoteBackend needs an endpoint")
        super().__init__(descriptor)
        self.api_key_env = api_key_env
        self.cassette = cassette
        self.session = session or requests.Session()
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.timeout = timeout

    # -- HTTP plumbing ---------------------------------------------------------

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _url(self, path: str) -> str:
        return self.descriptor.endpoint.rstrip("/") + path

    def _post_with_retries(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        last_reason = "unknown"
        for attempt in range(1, MAX_ATTEMPTS + 1):
            try:
                resp = self.session.post(
                    self._url(path),
                    json=payload,
                    headers=self._headers(),
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_reason = f"transport error: {exc}"
            else:
                if resp.status_code == 429:
                    last_reason = "HTTP 429 (rate limited)"
                elif resp.status_code >= 400:
                    raise BackendError(
                        f"endpoint returned HTTP {resp.status_code} for {path}: {resp.text[:200]}"
                    )
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise BackendError(f"endpoint returned non-JSON body: {exc}") from exc
            if attempt < MAX_ATTEMPTS:
                self.sleep(self.backoff_base * 2 ** (attempt - 1))
        raise TransportFailure(
            f"giving up on {path} after {MAX_ATTEMPTS} attempts ({last_reason})",
            attempts=MAX_ATTEMPTS,
        )

    # -- backend interface -----------------------------------------------------

    def _generate(self, request: GenerationRequest) -> GenerationResult:
        payload = {
            "op": "chat.completions",
            "model": self.descriptor.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        wire = {k: v for k, v in payload.items() if k != "op"}
        response = self._exchange_tagged(payload, wire, "/chat/completions")
        try:
            text = response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat completion response: {exc}") from exc
        usage = response.get("usage") or {}
        return GenerationResult(
            text=text,
            prompt_tokens=usage.get("prompt_tokens", request.prompt_token_count()),
            completion_tokens=usage.get("completion_tokens", count_tokens(text)),
        )

    def _exchange_tagged(
        self, keyed: dict[str, Any], wire: dict[str, Any], path: str
    ) -> dict[str, Any]:
        """Replay/record under the op-tagged payload, send the wire payload."""
        if self.cassette is not None and self.cassette.mode == "replay":
            return self.cassette.replay(keyed)
        response = self._post_with_retries(path, wire)
        if self.cassette is not None:
            self.cassette.record(keyed, response)
        return response

    def token_logprobs(self, context: str, text: str) -> TokenLogprobs:
        if not self.descriptor.supports_logprobs:
            raise LogprobsUnsupported(
                f"descriptor for {self.descriptor.model_id!r} does not advertise logprobs"
            )
        prompt = context + text
        payload = {
            "op": "completions.echo",
            "model": self.descriptor.model_id,
            "prompt": prompt,
            "echo": True,
            "logprobs": 0,
            "max_tokens": 0,
        }
        wire = {k: v for k, v in payload.items() if k != "op"}
        try:
            response = self._exchange_tagged(payload, wire, "/completions")
        except BackendError as exc:
            if "HTTP 404" in str(exc):
                raise LogprobsUnsupported(
                    "endpoint has no echo-capable /completions route"
                ) from exc
            raise
        try:
            lp = response["choices"][0]["logprobs"]
            tokens = lp["tokens"]
            logprobs = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LogprobsUnsupported(
                f"endpoint response carries no echoed logprobs: {exc}"
            ) from exc
        boundary = len(context)
        out_tokens: list[str] = []
        out_logprobs: list[float] = []
        for tok, logprob, offset in zip(tokens, logprobs, offsets):
            if offset >= boundary:
                out_tokens.append(tok)
                out_logprobs.append(logprob if logprob is not None else float("-inf"))
        return TokenLogprobs(tokens=out_tokens, logprobs=out_logprobs)
