"""Text-oriented query unification.

Concatenates the reference image caption with the modification text through
the fixed template ``<caption>, but <modification>``. Trimming is leading and
trailing whitespace only; interior punctuation and casing pass through
untouched, since downstream text encoders are expected to cope with noise.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cachefile import LineCache, input_hash
from .datamodel import Caption
from .errors import ValidationError

CONNECTOR = ", but "


@dataclass
class UnifiedTextualQuery:
    triplet_id: str
    text: str


def build_unified_textual_query(caption: Caption, modification_text: str, triplet_id: str = "") -> UnifiedTextualQuery:
    """Apply the template byte-exactly: trimmed caption + ", but " + trimmed text."""
    cap = caption.text.strip()
    mod = modification_text.strip()
    if not cap:
        raise ValidationError("caption empty after trimming")
    if not mod:
        raise ValidationError("modification text empty after trimming")
    return UnifiedTextualQuery(triplet_id=triplet_id, text=cap + CONNECTOR + mod)


def unified_text_hash(caption_text: str, modification_text: str) -> str:
    return input_hash(caption_text, modification_text)


def load_unified_text_cache(path) -> LineCache:
    return LineCache(path)


def cache_unified_text(
    cache: LineCache,
    triplet_id: str,
    caption: Caption,
    modification_text: str,
    flush: bool = True,
) -> UnifiedTextualQuery:
    """Build q_t for one triplet and persist it under unified_text.cache.

    Existing entries with a matching input hash are reused verbatim; a stale
    hash (caption or text changed) is rebuilt in place.
    """
    ihash = unified_text_hash(caption.text, modification_text)
    cached = cache.lookup(triplet_id, ihash)
    if cached is not None:
        return UnifiedTextualQuery(triplet_id=triplet_id, text=str(cached))
    query = build_unified_textual_query(caption, modification_text, triplet_id=triplet_id)
    cache.put(triplet_id, ihash, query.text, flush=flush)
    return query
