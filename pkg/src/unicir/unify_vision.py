"""Vision-oriented query unification.

Extracts target-descriptive keywords from the modification text (via an
injected extraction client, with a deterministic rule-based fallback) and
writes them onto the reference image in a top-left text band. Rendering uses
the embedded bitmap font so outputs are bit-identical across platforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from . import font5x7
from .datamodel import KeywordList
from .errors import RenderOverflowError, ValidationError

log = logging.getLogger(__name__)

COLOR_PALETTE: dict[str, tuple[int, int, int]] = {
    "blue": (0, 0, 255),
    "green": (0, 160, 0),
    "red": (255, 0, 0),
    "black": (0, 0, 0),
}

MIN_GLYPH_PX = 12


def default_font_scale(image_width: int) -> int:
    """Glyph height rule: a twentieth of the width, never below 12 px."""
    return max(MIN_GLYPH_PX, image_width // 20)


@dataclass
class RenderStyle:
    color: tuple[int, int, int] = COLOR_PALETTE["blue"]
    margin_px: int = 8
    line_height_fraction: float = 0.2
    font_scale_policy: Callable[[int], int] = field(default=default_font_scale)
    max_lines: int = 4

    def __post_init__(self) -> None:
        if len(self.color) != 3 or any(not (0 <= c <= 255) for c in self.color):
            raise ValidationError(f"color components must be in [0,255], got {self.color}")
        if self.margin_px < 0:
            raise ValidationError("margin_px must be >= 0")
        if not (0 < self.line_height_fraction <= 0.2):
            raise ValidationError("line_height_fraction must lie in (0, 0.2]")
        if self.max_lines < 1:
            raise ValidationError("max_lines must be >= 1")


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def empty(self) -> bool:
        return self.x1 <= self.x0 or self.y1 <= self.y0

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


@dataclass
class UnifiedVisualQuery:
    triplet_id: str
    image: np.ndarray  # H x W x 3, uint8
    text_band: Rect


def extract_target_keywords(modification_text: str, extractor, triplet_id: str = "") -> KeywordList:
    """Ask the extraction client for the target-descriptive words.

    The client handles caching and service access; see unicir.clients. The
    rule-based heuristic below is the offline fallback.
    """
    if not modification_text.strip():
        raise ValidationError("modification_text empty after trimming")
    return extractor.extract(triplet_id, modification_text)


# Tokens that carry no target attribute on their own.
_STOPWORDS = frozenset(
    """a an the and or is are was were be being been has have had with to of in on
    for as it its this that than but more less bit slightly very item image photo
    picture one same want wants should could would like looks look make made i
    please show me""".split()
)
# Negations drop the token that follows them (the negated attribute).
_NEGATIONS = frozenset({"no", "not", "without", "dont", "doesnt", "isnt", "arent"})


def _clean_token(tok: str) -> str:
    return tok.strip(".,;:!?\"'()[]{}").lower()


def rule_based_keywords(modification_text: str, triplet_id: str = "") -> KeywordList:
    """Deterministic keyword heuristic, also used as the test oracle.

    Works clause by clause (clauses split on commas/semicolons): everything
    from "instead of" or "rather than" to the clause end describes the
    reference attribute being discarded and is dropped, negated tokens are
    dropped with their negation, stop words are dropped, and the surviving
    content tokens keep their original order.
    """
    words: list[str] = []
    for clause in modification_text.replace(";", ",").split(","):
        tokens = [_clean_token(t) for t in clause.split()]
        tokens = [t for t in tokens if t]
        i = 0
        while i < len(tokens):
            tok = tokens[i]
            nxt = tokens[i + 1] if i + 1 < len(tokens) else None
            if (tok == "instead" and nxt == "of") or (tok == "rather" and nxt == "than"):
                break  # remainder of the clause describes the discarded attribute
            if tok in _NEGATIONS:
                i += 2
                continue
            if tok not in _STOPWORDS:
                words.append(tok)
            i += 1
    return KeywordList(triplet_id=triplet_id, words=words, source="rule_based")


def _wrap_words(words: list[str], glyph_h: int, width_limit: int) -> list[str] | None:
    """Greedy wrap of the space-joined words into rendered lines.

    Returns None when some line cannot fit the width limit at this glyph
    height (including a single over-long word).
    """

    def line_width(text: str) -> int:
        native = font5x7.text_cols(text)
        return (native * glyph_h) // font5x7.GLYPH_H

    lines: list[str] = []
    current = ""
    for word in words:
        candidate = word if not current else current + " " + word
        if line_width(candidate) <= width_limit:
            current = candidate
            continue
        if current:
            lines.append(current)
        if line_width(word) > width_limit:
            return None
        current = word
    if current:
        lines.append(current)
    return lines


def render_keywords_on_image(
    image: np.ndarray, keywords: KeywordList, style: RenderStyle | None = None
) -> UnifiedVisualQuery:
    """Write the keywords into a top-left band of the image.

    The words are joined by single spaces, wrapped greedily to the usable
    width, and drawn downward from the top-left margin. The glyph height
    starts at the style's scale policy and shrinks one pixel at a time (never
    below 12 px) until the text fits max_lines and the image height; if it
    still does not fit, a render-overflow error is raised and the caller
    decides how to truncate.
    """
    style = style or RenderStyle()
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 raster, got shape {image.shape}")
    h_img, w_img = image.shape[:2]
    if h_img < 32 or w_img < 32:
        raise ValidationError(f"image must be at least 32 x 32, got {w_img} x {h_img}")

    if not keywords.words:
        return UnifiedVisualQuery(
            triplet_id=keywords.triplet_id, image=image.copy(), text_band=Rect(0, 0, 0, 0)
        )

    margin = style.margin_px
    width_limit = w_img - 2 * margin
    if width_limit < MIN_GLYPH_PX:
        raise RenderOverflowError(
            f"triplet {keywords.triplet_id!r}: usable width {width_limit}px below minimum glyph size"
        )

    glyph_h = style.font_scale_policy(w_img)
    cap = int(style.line_height_fraction * h_img)
    glyph_h = max(MIN_GLYPH_PX, min(glyph_h, cap if cap >= MIN_GLYPH_PX else glyph_h))

    chosen: tuple[list[str], int] | None = None
    while glyph_h >= MIN_GLYPH_PX:
        advance_y = (glyph_h * 6) // 5  # 1.2x line spacing in integer arithmetic
        lines = _wrap_words(keywords.words, glyph_h, width_limit)
        if lines is not None and len(lines) <= style.max_lines:
            band_bottom = margin + (len(lines) - 1) * advance_y + glyph_h
            if band_bottom <= h_img - margin:
                chosen = (lines, glyph_h)
                break
        glyph_h -= 1
    if chosen is None:
        raise RenderOverflowError(
            f"triplet {keywords.triplet_id!r}: keywords {' '.join(keywords.words)!r} do not fit "
            f"{style.max_lines} line(s) at the minimum {MIN_GLYPH_PX}px glyph height"
        )

    lines, glyph_h = chosen
    advance_y = (glyph_h * 6) // 5
    out = image.copy()
    color = np.array(style.color, dtype=np.uint8)
    band_w = 0
    y = margin
    for line in lines:
        mask = font5x7.scale_bitmap(font5x7.render_line_bitmap(line), glyph_h)
        mh, mw = mask.shape
        out[y : y + mh, margin : margin + mw][mask] = color
        band_w = max(band_w, mw)
        y += advance_y
    band = Rect(margin, margin, margin + band_w, margin + (len(lines) - 1) * advance_y + glyph_h)
    return UnifiedVisualQuery(triplet_id=keywords.triplet_id, image=out, text_band=band)


def render_with_truncation(
    image: np.ndarray, keywords: KeywordList, style: RenderStyle | None = None
) -> UnifiedVisualQuery:
    """Pipeline-facing wrapper: on overflow, drop trailing words and warn."""
    words = list(keywords.words)
    while True:
        try:
            return render_keywords_on_image(
                image,
                KeywordList(triplet_id=keywords.triplet_id, words=words, source=keywords.source),
                style,
            )
        except RenderOverflowError:
            if not words:
                raise
            dropped = words.pop()
            log.warning(
                "triplet %s: render overflow, dropping trailing keyword %r (%d left)",
                keywords.triplet_id,
                dropped,
                len(words),
            )


def visual_query_path(cache_root: str | Path, triplet_id: str) -> Path:
    return Path(cache_root) / "visual" / f"{triplet_id}.png"


def save_visual_query(query: UnifiedVisualQuery, cache_root: str | Path) -> Path:
    """Persist the rendered q_v as a PNG under cache/visual/."""
    path = visual_query_path(cache_root, query.triplet_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(query.image, mode="RGB").save(tmp, format="PNG")
    tmp.replace(path)
    return path


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG file to an H x W x 3 uint8 array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValidationError(f"cannot decode image {path}: {exc}") from exc
