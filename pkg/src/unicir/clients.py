"""Clients for the external captioning and keyword-extraction services.

Both services speak a minimal contract: a JSON payload in, a single text
field out. Every call goes through a replay cache so preprocessing can run
fully offline once recorded. Cache modes:

* record      - serve hits from cache, call the service on misses and store.
* replay      - cache only; any miss (or stale input hash) is a determinism
                error, guaranteeing zero network calls.
* passthrough - always call the service and refresh the cache entry.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .cachefile import LineCache, hash_file, input_hash
from .datamodel import Caption, KeywordList
from .errors import (
    ConfigError,
    DeterminismError,
    ResponseParseError,
    ServiceError,
    ValidationError,
)
from .unify_vision import rule_based_keywords

log = logging.getLogger(__name__)

CACHE_MODES = ("record", "replay", "passthrough")


@dataclass
class ServiceEndpoint:
    base_url: str
    model_name: str
    timeout_s: float = 30.0
    max_retries: int = 2
    auth_token_env_var: str = "UNICIR_SERVICE_TOKEN"

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValidationError("timeout_s must be > 0")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")


class ReplayCache:
    """The two service caches plus the shared mode switch."""

    def __init__(self, root_dir: str | Path, mode: str = "record"):
        if mode not in CACHE_MODES:
            raise ConfigError(f"cache mode must be one of {CACHE_MODES}, got {mode!r}")
        self.root_dir = Path(root_dir)
        self.mode = mode
        self.captions = LineCache(self.root_dir / "captions.cache")
        self.keywords = LineCache(self.root_dir / "keywords.cache")
        self._locks: dict[tuple[str, str], threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def key_lock(self, kind: str, key: str) -> threading.Lock:
        """Per-key lock so concurrent preprocessing never duplicates a call."""
        with self._registry_lock:
            return self._locks.setdefault((kind, key), threading.Lock())


class HttpTransport:
    """POSTs JSON to {base_url}/{route} and returns the response's text field."""

    def __init__(self, endpoint: ServiceEndpoint):
        self.endpoint = endpoint
        self.calls = 0

    def __call__(self, route: str, payload: dict) -> str:
        import requests

        headers = {}
        token = os.environ.get(self.endpoint.auth_token_env_var, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = dict(payload, model=self.endpoint.model_name)
        url = self.endpoint.base_url.rstrip("/") + "/" + route
        last_error: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            self.calls += 1
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=self.endpoint.timeout_s)
                resp.raise_for_status()
                data = resp.json()
                if "text" not in data:
                    raise ResponseParseError(f"{url}: response lacks a text field: {data!r}")
                return str(data["text"])
            except ResponseParseError:
                raise
            except Exception as exc:
                last_error = exc
                if attempt < self.endpoint.max_retries:
                    time.sleep(min(2.0, 0.1 * 2**attempt))
        raise ServiceError(
            f"{url} failed after {self.endpoint.max_retries + 1} attempt(s): {last_error}"
        ) from last_error


class StubTransport:
    """Test double: route responses from a dict or a callable, counting calls."""

    def __init__(self, responder):
        self._responder = responder
        self.calls = 0

    def __call__(self, route: str, payload: dict) -> str:
        self.calls += 1
        if callable(self._responder):
            return str(self._responder(route, payload))
        return str(self._responder[route])


def _cached_fetch(cache: LineCache, mode: str, key: str, ihash: str, compute):
    """Shared record/replay/passthrough logic; compute() returns the payload."""
    if mode == "replay":
        entry = cache.get(key)
        if entry is None:
            raise DeterminismError(f"replay miss for key {key!r} in {cache.path.name}")
        if entry[0] != ihash:
            raise DeterminismError(
                f"stale cache entry for key {key!r} in {cache.path.name}: input hash changed"
            )
        return entry[1]
    if mode == "record":
        hit = cache.lookup(key, ihash)
        if hit is not None:
            return hit
    payload = compute()
    cache.put(key, ihash, payload)
    return payload


def get_caption_cached(
    image_id: str,
    image_path: str | Path,
    endpoint: ServiceEndpoint | None,
    cache: ReplayCache,
    transport=None,
) -> Caption:
    """Caption one image through the replay cache.

    The cache key is the image id; the input hash covers the image bytes so a
    changed file invalidates the entry.
    """
    ihash = hash_file(image_path)

    def compute() -> dict:
        nonlocal transport
        if transport is None:
            if endpoint is None:
                raise ConfigError("captioner endpoint required outside replay mode")
            transport = HttpTransport(endpoint)
        with open(image_path, "rb") as fh:
            image_b64 = base64.b64encode(fh.read()).decode("ascii")
        text = transport("caption", {"image_id": image_id, "image_b64": image_b64}).strip()
        if not text:
            raise ResponseParseError(f"captioner returned empty text for {image_id!r}")
        return {"text": text, "source": "external_captioner"}

    with cache.key_lock("caption", image_id):
        payload = _cached_fetch(cache.captions, cache.mode, image_id, ihash, compute)
    return Caption(image_id=image_id, text=str(payload["text"]), source=str(payload.get("source", "external_captioner")))


_PROMPT_TEMPLATE = """You compare a product photo with a requested modification and list the words \
that describe the desired target image.

Rules:
- Output one line: a comma-separated list of words.
- Include only attributes the target image should have.
- Exclude attributes that are being removed or replaced.
- No explanations.

Example request: "has a floral pattern instead of stripes"
Example response: floral, pattern

Request: {request}
Response:"""


def build_extraction_prompt(modification_text: str) -> str:
    """Fill the fixed keyword-extraction prompt with one modification text.

    The text is JSON-quoted so delimiter characters survive verbatim and the
    substituted span can be recovered exactly.
    """
    if not modification_text.strip():
        raise ValidationError("modification_text empty after trimming")
    return _PROMPT_TEMPLATE.format(request=json.dumps(modification_text, ensure_ascii=False))


def parse_keyword_response(raw: str) -> list[str]:
    """Parse a service response into a word list.

    Takes the last comma-containing line (falling back to the last non-empty
    line), drops any leading "Label:" prefix, splits on commas, trims each
    piece. Surrounding prose before the list is therefore tolerated.
    """
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise ResponseParseError(f"empty keyword response: {raw!r}")
    chosen = None
    for ln in reversed(lines):
        if "," in ln:
            chosen = ln
            break
    if chosen is None:
        chosen = lines[-1]
    if ":" in chosen:
        chosen = chosen.split(":", 1)[1]
    words = [w.strip().strip("\"'[]().") for w in chosen.split(",")]
    words = [w for w in words if w]
    if not words:
        raise ResponseParseError(f"no keywords found in response: {raw!r}")
    return words


def get_keywords_cached(
    triplet_id: str,
    modification_text: str,
    endpoint: ServiceEndpoint | None,
    cache: ReplayCache,
    transport=None,
) -> KeywordList:
    """Extract target keywords via the LLM service through the replay cache."""
    if not modification_text.strip():
        raise ValidationError("modification_text empty after trimming")
    ihash = input_hash(modification_text)

    def compute() -> dict:
        nonlocal transport
        if transport is None:
            if endpoint is None:
                raise ConfigError("extractor endpoint required outside replay mode")
            transport = HttpTransport(endpoint)
        raw = transport("extract", {"prompt": build_extraction_prompt(modification_text)})
        try:
            words = parse_keyword_response(raw)
        except ResponseParseError:
            log.error("unparseable keyword response for %s: %r", triplet_id, raw)
            raise
        return {"words": words, "source": "llm"}

    with cache.key_lock("keywords", triplet_id):
        payload = _cached_fetch(cache.keywords, cache.mode, triplet_id, ihash, compute)
    return KeywordList(
        triplet_id=triplet_id,
        words=[str(w) for w in payload["words"]],
        source=str(payload.get("source", "llm")),
    )


class CaptionClient:
    """Service-backed captioner with replay semantics."""

    def __init__(self, endpoint: ServiceEndpoint | None, cache: ReplayCache, transport=None):
        self.endpoint = endpoint
        self.cache = cache
        self.transport = transport

    def caption(self, image_id: str, image_path: str | Path) -> Caption:
        return get_caption_cached(image_id, image_path, self.endpoint, self.cache, self.transport)


class FixtureCaptioner:
    """Captions from a JSON file mapping image_id to caption text.

    Entries are still recorded into captions.cache so downstream replay runs
    see a complete cache.
    """

    def __init__(self, fixture_path: str | Path, cache: ReplayCache):
        with open(fixture_path, encoding="utf-8") as fh:
            self._captions: dict[str, str] = {str(k): str(v) for k, v in json.load(fh).items()}
        self.cache = cache

    def caption(self, image_id: str, image_path: str | Path) -> Caption:
        ihash = hash_file(image_path)

        def compute() -> dict:
            if image_id not in self._captions:
                raise ConfigError(f"caption fixture has no entry for image {image_id!r}")
            return {"text": self._captions[image_id], "source": "fixture"}

        with self.cache.key_lock("caption", image_id):
            payload = _cached_fetch(self.cache.captions, self.cache.mode, image_id, ihash, compute)
        return Caption(image_id=image_id, text=str(payload["text"]), source=str(payload.get("source", "fixture")))


class LlmKeywordExtractor:
    """Service-backed extractor; optionally falls back to the rule heuristic."""

    def __init__(
        self,
        endpoint: ServiceEndpoint | None,
        cache: ReplayCache,
        transport=None,
        fallback_to_rules: bool = False,
    ):
        self.endpoint = endpoint
        self.cache = cache
        self.transport = transport
        self.fallback_to_rules = fallback_to_rules

    def extract(self, triplet_id: str, modification_text: str) -> KeywordList:
        try:
            return get_keywords_cached(
                triplet_id, modification_text, self.endpoint, self.cache, self.transport
            )
        except (ServiceError, ResponseParseError):
            if not self.fallback_to_rules:
                raise
            log.warning("extraction service failed for %s; using rule-based keywords", triplet_id)
            return RuleBasedExtractor(self.cache).extract(triplet_id, modification_text)


class RuleBasedExtractor:
    """Deterministic offline extractor; records results like the service does."""

    def __init__(self, cache: ReplayCache | None = None):
        self.cache = cache

    def extract(self, triplet_id: str, modification_text: str) -> KeywordList:
        if self.cache is None:
            return rule_based_keywords(modification_text, triplet_id=triplet_id)
        ihash = input_hash(modification_text)

        def compute() -> dict:
            kw = rule_based_keywords(modification_text, triplet_id=triplet_id)
            return {"words": kw.words, "source": "rule_based"}

        with self.cache.key_lock("keywords", triplet_id):
            payload = _cached_fetch(self.cache.keywords, self.cache.mode, triplet_id, ihash, compute)
        return KeywordList(
            triplet_id=triplet_id,
            words=[str(w) for w in payload["words"]],
            source=str(payload.get("source", "rule_based")),
        )


class FixtureKeywordExtractor:
    """Keyword lists from a JSON file mapping triplet_id to a word list."""

    def __init__(self, fixture_path: str | Path, cache: ReplayCache):
        with open(fixture_path, encoding="utf-8") as fh:
            self._keywords: dict[str, list[str]] = {
                str(k): [str(w) for w in v] for k, v in json.load(fh).items()
            }
        self.cache = cache

    def extract(self, triplet_id: str, modification_text: str) -> KeywordList:
        ihash = input_hash(modification_text)

        def compute() -> dict:
            if triplet_id not in self._keywords:
                raise ConfigError(f"keyword fixture has no entry for triplet {triplet_id!r}")
            return {"words": self._keywords[triplet_id], "source": "fixture"}

        with self.cache.key_lock("keywords", triplet_id):
            payload = _cached_fetch(self.cache.keywords, self.cache.mode, triplet_id, ihash, compute)
        return KeywordList(
            triplet_id=triplet_id,
            words=[str(w) for w in payload["words"]],
            source=str(payload.get("source", "fixture")),
        )
