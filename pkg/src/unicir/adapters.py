"""Per-dataset adapters converting native annotation formats to the canonical manifest.

Every adapter returns plain ``TripletRecord`` lists so downstream code only
ever sees one format. The canonical adapter is a passthrough to
:func:`unicir.datamodel.load_manifest`.
"""

from __future__ import annotations

import json
from pathlib import Path

from .datamodel import TripletRecord, load_manifest
from .errors import ConfigError, ManifestParseError

DEFAULT_CAPTION_JOIN = " and "


def _read_json(path: str | Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc


def load_fashioniq(
    captions_file: str | Path,
    category: str | None = None,
    caption_join: str = DEFAULT_CAPTION_JOIN,
    image_suffix: str = ".png",
) -> list[TripletRecord]:
    """Convert a FashionIQ caption file (cap.<category>.<split>.json).

    Each entry carries a candidate (reference) id, a target id and two human
    captions, which are lowercased, trimmed and joined with ``caption_join``
    to form the single modification text.
    """
    path = Path(captions_file)
    if category is None:
        # cap.dresses.train.json -> dresses
        parts = path.name.split(".")
        category = parts[1] if len(parts) >= 3 else "unknown"
    entries = _read_json(path)
    records = []
    for i, entry in enumerate(entries):
        captions = [c.strip().lower() for c in entry.get("captions", []) if c and c.strip()]
        if not captions:
            raise ManifestParseError(f"{path}: entry {i}: no usable captions")
        ref = str(entry["candidate"])
        records.append(
            TripletRecord(
                triplet_id=f"fiq-{category}-{i:06d}",
                reference_image_id=ref,
                reference_image_path=ref + image_suffix,
                modification_text=caption_join.join(captions),
                target_image_id=(str(entry["target"]) if entry.get("target") else None),
                category=category,
            )
        )
    return records


def load_cirr(
    captions_file: str | Path,
    image_splits_file: str | Path,
) -> list[TripletRecord]:
    """Convert CIRR caption + image-split files.

    The split file maps image names to repository-relative paths; subset
    membership comes from each entry's img_set.members list.
    """
    name_to_path = {k: v.lstrip("./") for k, v in _read_json(image_splits_file).items()}
    records = []
    for i, entry in enumerate(_read_json(captions_file)):
        ref = str(entry["reference"])
        target = entry.get("target_hard")
        members = entry.get("img_set", {}).get("members")
        subset = None
        if members and target is not None:
            subset = sorted(str(m) for m in members)
            if str(target) not in subset:
                subset.append(str(target))
                subset.sort()
        records.append(
            TripletRecord(
                triplet_id=str(entry.get("pairid", f"cirr-{i:06d}")),
                reference_image_id=ref,
                reference_image_path=name_to_path.get(ref, ref),
                modification_text=str(entry["caption"]),
                target_image_id=None if target is None else str(target),
                subset_member_ids=subset,
            )
        )
    return records


def load_shoes(triplets_file: str | Path) -> list[TripletRecord]:
    """Convert the Shoes relative-caption file (list of dicts with
    ReferenceImageName / ImageName / RelativeCaption keys)."""
    records = []
    for i, entry in enumerate(_read_json(triplets_file)):
        ref = str(entry["ReferenceImageName"])
        records.append(
            TripletRecord(
                triplet_id=f"shoes-{i:06d}",
                reference_image_id=ref,
                reference_image_path=ref,
                modification_text=str(entry["RelativeCaption"]),
                target_image_id=str(entry["ImageName"]),
            )
        )
    return records


def load_fashion200k(labels_file: str | Path) -> list[TripletRecord]:
    """Generate Fashion200K triplets from a detection label file.

    Native lines are ``<image path>\\t<score>\\t<description words...>``.
    Pairs are images whose descriptions differ in exactly one word; the
    modification text uses the dataset's conventional phrasing
    "replace <old> with <new>". Each source pairs with the lexicographically
    first eligible partner so generation is deterministic.
    """
    items: list[tuple[str, tuple[str, ...]]] = []
    with open(labels_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                parts = line.split()
                if len(parts) < 3:
                    raise ManifestParseError(
                        f"{labels_file}: line {lineno}: expected path, score, description"
                    )
                parts = [parts[0], parts[1], " ".join(parts[2:])]
            items.append((parts[0], tuple(parts[2].lower().split())))
    items.sort()
    by_len: dict[int, list[tuple[str, tuple[str, ...]]]] = {}
    for item in items:
        by_len.setdefault(len(item[1]), []).append(item)
    records = []
    n = 0
    for path, words in items:
        best = None
        for other_path, other_words in by_len.get(len(words), ()):
            if other_path == path:
                continue
            diff = [j for j, (a, b) in enumerate(zip(words, other_words)) if a != b]
            if len(diff) != 1:
                continue
            key = (other_words, other_path)
            if best is None or key < best[0]:
                best = (key, other_path, other_words, diff[0])
        if best is None:
            continue
        _, tgt_path, tgt_words, j = best
        records.append(
            TripletRecord(
                triplet_id=f"f200k-{n:06d}",
                reference_image_id=path,
                reference_image_path=path,
                modification_text=f"replace {words[j]} with {tgt_words[j]}",
                target_image_id=tgt_path,
            )
        )
        n += 1
    return records


def load_dataset(
    adapter: str,
    manifest_path: str | Path,
    caption_join: str = DEFAULT_CAPTION_JOIN,
    extra_path: str | Path | None = None,
    category: str | None = None,
) -> list[TripletRecord]:
    """Dispatch on adapter name. ``extra_path`` is the CIRR image-split file."""
    if adapter == "canonical":
        return load_manifest(manifest_path)
    if adapter == "fashioniq":
        return load_fashioniq(manifest_path, category=category, caption_join=caption_join)
    if adapter == "cirr":
        if extra_path is None:
            raise ConfigError("cirr adapter needs the image-splits file (extra_path)")
        return load_cirr(manifest_path, extra_path)
    if adapter == "shoes":
        return load_shoes(manifest_path)
    if adapter == "fashion200k":
        return load_fashion200k(manifest_path)
    raise ConfigError(
        f"unknown dataset adapter {adapter!r}; known: canonical, fashioniq, cirr, shoes, fashion200k"
    )
