"""Canonical triplet manifest, candidate sets, and evaluation protocol descriptors.

The canonical manifest is JSON Lines: one object per line with snake_case keys
matching :class:`TripletRecord`. Unknown keys are ignored on load. Image paths
are relative to a run-level image root; by convention an image id that has no
explicit path resolves to ``<image_root>/<image_id>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ManifestParseError, ValidationError

FASHIONIQ_CATEGORIES = ("dresses", "shirts", "toptee")


@dataclass
class TripletRecord:
    """One training/eval sample: reference image, modification text, target image."""

    triplet_id: str
    reference_image_id: str
    reference_image_path: str
    modification_text: str
    target_image_id: str | None = None
    category: str | None = None
    subset_member_ids: list[str] | None = None

    def validate(self) -> None:
        if not self.triplet_id:
            raise ValidationError("triplet_id must be non-empty")
        if not self.modification_text.strip():
            raise ValidationError(
                f"triplet {self.triplet_id!r}: modification_text empty after trimming"
            )
        if self.subset_member_ids is not None:
            if self.target_image_id is None:
                raise ValidationError(
                    f"triplet {self.triplet_id!r}: subset_member_ids without target_image_id"
                )
            if self.target_image_id not in self.subset_member_ids:
                raise ValidationError(
                    f"triplet {self.triplet_id!r}: subset_member_ids must contain "
                    f"target {self.target_image_id!r}"
                )


_REQUIRED_KEYS = ("triplet_id", "reference_image_id", "reference_image_path", "modification_text")
_OPTIONAL_KEYS = ("target_image_id", "category", "subset_member_ids")


def load_manifest(path: str | Path) -> list[TripletRecord]:
    """Load a canonical JSONL manifest, validating every record.

    Raises ManifestParseError naming the offending line on malformed input and
    ValidationError on duplicate triplet ids or invariant violations.
    """
    records: list[TripletRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(f"{path}: line {lineno}: record is not an object")
            missing = [k for k in _REQUIRED_KEYS if not obj.get(k)]
            if missing:
                raise ManifestParseError(
                    f"{path}: line {lineno}: missing required field(s) {', '.join(missing)}"
                )
            rec = TripletRecord(
                triplet_id=str(obj["triplet_id"]),
                reference_image_id=str(obj["reference_image_id"]),
                reference_image_path=str(obj["reference_image_path"]),
                modification_text=str(obj["modification_text"]),
                target_image_id=None if obj.get("target_image_id") is None else str(obj["target_image_id"]),
                category=None if obj.get("category") is None else str(obj["category"]),
                subset_member_ids=(
                    None
                    if obj.get("subset_member_ids") is None
                    else [str(m) for m in obj["subset_member_ids"]]
                ),
            )
            try:
                rec.validate()
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
            if rec.triplet_id in seen:
                raise ValidationError(f"{path}: line {lineno}: duplicate triplet_id {rec.triplet_id!r}")
            seen.add(rec.triplet_id)
            records.append(rec)
    return records


def save_manifest(records: list[TripletRecord], path: str | Path) -> None:
    """Write records as canonical JSONL. load_manifest(save_manifest(r)) == r."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "triplet_id": rec.triplet_id,
                "reference_image_id": rec.reference_image_id,
                "reference_image_path": rec.reference_image_path,
                "modification_text": rec.modification_text,
            }
            if rec.target_image_id is not None:
                obj["target_image_id"] = rec.target_image_id
            if rec.category is not None:
                obj["category"] = rec.category
            if rec.subset_member_ids is not None:
                obj["subset_member_ids"] = rec.subset_member_ids
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class EvalProtocol:
    """Per-dataset metric configuration.

    ``aggregate`` names the headline number: "mean_recalls" averages all
    recall values, "mean_category_means" averages per-k category means first
    (FashionIQ style), "r5_plus_rsub1_half" is (R@5 + R_subset@1) / 2 (CIRR).
    """

    name: str
    recall_ks: tuple[int, ...]
    subset_ks: tuple[int, ...] = ()
    categories: tuple[str, ...] = ()
    aggregate: str = "mean_recalls"

    def __post_init__(self) -> None:
        for k in self.recall_ks + self.subset_ks:
            if k < 1:
                raise ValidationError(f"protocol {self.name!r}: metric k must be >= 1, got {k}")
        if self.aggregate == "r5_plus_rsub1_half" and (5 not in self.recall_ks or 1 not in self.subset_ks):
            raise ValidationError(
                f"protocol {self.name!r}: aggregate needs R@5 and R_subset@1 declared"
            )

    @staticmethod
    def named(name: str) -> "EvalProtocol":
        try:
            return _PROTOCOLS[name]
        except KeyError:
            raise ConfigError(
                f"unknown protocol {name!r}; known: {', '.join(sorted(_PROTOCOLS))}"
            ) from None


_PROTOCOLS = {
    "fashioniq_val": EvalProtocol(
        name="fashioniq_val",
        recall_ks=(10, 50),
        categories=FASHIONIQ_CATEGORIES,
        aggregate="mean_category_means",
    ),
    "fashioniq_original": EvalProtocol(
        name="fashioniq_original",
        recall_ks=(10, 50),
        categories=FASHIONIQ_CATEGORIES,
        aggregate="mean_category_means",
    ),
    "shoes": EvalProtocol(name="shoes", recall_ks=(1, 10, 50)),
    "fashion200k": EvalProtocol(name="fashion200k", recall_ks=(1, 10, 50)),
    "cirr": EvalProtocol(
        name="cirr",
        recall_ks=(1, 5, 10, 50),
        subset_ks=(1, 2, 3),
        aggregate="r5_plus_rsub1_half",
    ),
}


@dataclass
class CandidateSet:
    """Ordered candidate image universe for ranking."""

    image_ids: list[str]
    image_paths: list[str]

    def __post_init__(self) -> None:
        if len(self.image_ids) != len(self.image_paths):
            raise ValidationError("CandidateSet: ids and paths must be parallel lists")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValidationError("CandidateSet: image ids must be unique")

    def __len__(self) -> int:
        return len(self.image_ids)


def resolve_image_paths(records: list[TripletRecord]) -> dict[str, str]:
    """Map every image id mentioned by the records to a relative path.

    Reference ids use their explicit path; target and subset ids default to
    the id itself (ids double as root-relative paths by convention).
    """
    paths: dict[str, str] = {}
    for rec in records:
        if rec.target_image_id is not None:
            paths.setdefault(rec.target_image_id, rec.target_image_id)
        for member in rec.subset_member_ids or ():
            paths.setdefault(member, member)
    # explicit reference paths win over the id-as-path default
    for rec in records:
        paths[rec.reference_image_id] = rec.reference_image_path
    return paths


def build_candidate_set(
    records: list[TripletRecord],
    protocol: EvalProtocol,
    gallery: CandidateSet | list[str] | None = None,
) -> CandidateSet:
    """Build the candidate image universe for a protocol.

    fashioniq_val mode returns the deduplicated union of reference and target
    ids across the records, ordered lexicographically by image id (the global
    tie-break order). fashioniq_original requires an explicit gallery, which
    is returned unchanged. Other protocols use the gallery when given and
    otherwise fall back to the union (plus CIRR subset members). A gallery
    passed as a bare id list uses each id as its root-relative path.
    """
    if isinstance(gallery, list):
        gallery = CandidateSet(image_ids=list(gallery), image_paths=list(gallery))
    if protocol.name == "fashioniq_original":
        if gallery is None:
            raise ConfigError("fashioniq_original protocol requires a gallery candidate set")
        return gallery
    if gallery is not None:
        return gallery
    if protocol.name == "fashioniq_val" and not records:
        raise ConfigError("fashioniq_val protocol requires a non-empty record list")
    paths = resolve_image_paths(records)
    ids = set()
    for rec in records:
        ids.add(rec.reference_image_id)
        if rec.target_image_id is not None:
            ids.add(rec.target_image_id)
        ids.update(rec.subset_member_ids or ())
    ordered = sorted(ids)
    return CandidateSet(image_ids=ordered, image_paths=[paths[i] for i in ordered])


def load_gallery(path: str | Path) -> CandidateSet:
    """Load a gallery file: JSONL with image_id and optional image_path per line."""
    ids: list[str] = []
    paths: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if "image_id" not in obj:
                raise ManifestParseError(f"{path}: line {lineno}: missing image_id")
            ids.append(str(obj["image_id"]))
            paths.append(str(obj.get("image_path", obj["image_id"])))
    return CandidateSet(image_ids=ids, image_paths=paths)


@dataclass
class Caption:
    """A textual description of one image."""

    image_id: str
    text: str
    source: str = "external_captioner"  # external_captioner | fixture

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError(f"caption for {self.image_id!r} empty after trimming")
        if "\n" in self.text or "\r" in self.text:
            raise ValidationError(f"caption for {self.image_id!r} contains newline characters")


@dataclass
class KeywordList:
    """Target-descriptive words extracted from a modification text."""

    triplet_id: str
    words: list[str] = field(default_factory=list)
    source: str = "rule_based"  # llm | rule_based | fixture

    def __post_init__(self) -> None:
        for w in self.words:
            if not w:
                raise ValidationError(f"keywords for {self.triplet_id!r}: empty word")
            if "\n" in w or "\r" in w:
                raise ValidationError(f"keywords for {self.triplet_id!r}: word contains newline")
