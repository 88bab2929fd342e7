"""Embedding index, cosine ranking, and the recall evaluation protocols.

Ranking sorts by descending cosine similarity with exact ties broken
lexicographically by image id, the same order the candidate sets use, so
results are deterministic across runs and platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datamodel import CandidateSet, EvalProtocol, TripletRecord
from .encoders import BackendBase, Embedding
from .errors import (
    NumericDomainError,
    ProtocolError,
    ShapeError,
    ValidationError,
)
from .fusion import FusedQuery, FusionParams, fused_queries
from .trainer import Checkpoint, apply_backbone_state
from .unify_vision import load_image

ABLATION_MODES = (
    "full",
    "textual_only",
    "visual_only",
    "mod_text_only",
    "caption_only",
    "reference_image_only",
    "average_addition",
)


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray  # (len(ids), D)

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ShapeError(
                f"index matrix shape {self.matrix.shape} does not match {len(self.ids)} ids"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("index ids must be unique")
        if not np.all(np.isfinite(self.matrix)):
            raise NumericDomainError("index matrix contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(
    backend: BackendBase,
    candidates: CandidateSet,
    image_root: str | Path = ".",
    batch_size: int = 64,
) -> EmbeddingIndex:
    """Encode every candidate image; row order equals candidate order."""
    root = Path(image_root)
    rows: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(candidates), batch_size):
            ids = candidates.image_ids[start : start + batch_size]
            paths = candidates.image_paths[start : start + batch_size]
            images = []
            for cid, rel in zip(ids, paths):
                try:
                    images.append(load_image(root / rel))
                except (FileNotFoundError, OSError) as exc:
                    raise ValidationError(f"candidate image {cid!r} unreadable: {exc}") from exc
            rows.append(backend.encode_images(images).numpy().astype(np.float32))
    matrix = np.concatenate(rows, axis=0) if rows else np.zeros((0, backend.dim), dtype=np.float32)
    return EmbeddingIndex(ids=list(candidates.image_ids), matrix=matrix)


def export_index(index: EmbeddingIndex, prefix: str | Path) -> tuple[Path, Path]:
    """Write {prefix}.f32 (row-major little-endian float32) and {prefix}.ids."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    mat_path = prefix.with_suffix(".f32")
    ids_path = prefix.with_suffix(".ids")
    mat_path.write_bytes(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
    ids_path.write_text("".join(i + "\n" for i in index.ids), encoding="utf-8")
    return mat_path, ids_path


def load_index(prefix: str | Path) -> EmbeddingIndex:
    prefix = Path(prefix)
    ids = [ln for ln in prefix.with_suffix(".ids").read_text(encoding="utf-8").splitlines() if ln]
    blob = prefix.with_suffix(".f32").read_bytes()
    if not ids:
        raise ValidationError(f"{prefix}.ids lists no candidates")
    if len(blob) % (4 * len(ids)) != 0:
        raise ValidationError(f"{prefix}.f32 size {len(blob)} not divisible by 4 x {len(ids)} ids")
    dim = len(blob) // (4 * len(ids))
    matrix = np.frombuffer(blob, dtype="<f4").reshape(len(ids), dim).copy()
    return EmbeddingIndex(ids=ids, matrix=matrix)


def _query_vector(query) -> np.ndarray:
    if isinstance(query, (FusedQuery, Embedding)):
        vec = query.vector
    elif torch.is_tensor(query):
        vec = query.detach().numpy()
    else:
        vec = np.asarray(query)
    if vec.ndim != 1:
        raise ShapeError(f"query must be a single vector, got shape {vec.shape}")
    return vec.astype(np.float64)


def rank(query, index: EmbeddingIndex, exclude: set[str] | None = None) -> list[str]:
    """Candidate ids by descending cosine similarity to the query.

    Exact score ties break lexicographically by id; ids in ``exclude`` are
    omitted from the result.
    """
    vec = _query_vector(query)
    if vec.shape[0] != index.dim:
        raise ShapeError(f"query dim {vec.shape[0]} != index dim {index.dim}")
    qn = np.linalg.norm(vec)
    if qn == 0.0:
        raise NumericDomainError("zero-norm query vector")
    mat = index.matrix.astype(np.float64)
    norms = np.linalg.norm(mat, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise NumericDomainError(f"zero-norm candidate embedding at row {int(zero[0])} "
                                 f"(id {index.ids[int(zero[0])]!r})")
    scores = (mat @ vec) / (norms * qn)
    ids_arr = np.array(index.ids)
    order = np.lexsort((ids_arr, -scores))
    if exclude:
        return [index.ids[i] for i in order if index.ids[i] not in exclude]
    return [index.ids[i] for i in order]


def scored_rank(query, index: EmbeddingIndex, exclude: set[str] | None = None) -> list[tuple[str, float]]:
    """Like rank() but keeps the cosine scores (used by the retrieve surface)."""
    vec = _query_vector(query)
    ordered = rank(query, index, exclude)
    mat = index.matrix.astype(np.float64)
    norms = np.linalg.norm(mat, axis=1)
    scores = (mat @ vec) / (norms * np.linalg.norm(vec))
    by_id = dict(zip(index.ids, scores))
    return [(cid, float(by_id[cid])) for cid in ordered]


def recall_at_k(rankings: list[list[str]], targets: list[str], k: int) -> float:
    """Percentage of queries whose target appears in the top k."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(rankings) != len(targets):
        raise ShapeError(f"{len(rankings)} rankings vs {len(targets)} targets")
    if not rankings:
        raise ValidationError("recall over zero queries is undefined")
    hits = 0
    for i, (ranking, target) in enumerate(zip(rankings, targets)):
        if target not in ranking:
            raise ProtocolError(f"query {i}: target {target!r} absent from the candidate universe")
        if target in ranking[:k]:
            hits += 1
    return 100.0 * hits / len(rankings)


def recall_subset_at_k(
    rankings: list[list[str]],
    targets: list[str],
    subsets: list[set[str] | list[str]],
    k: int,
) -> float:
    """R@k after restricting each ranking to the query's candidate subset."""
    if len(rankings) != len(targets) or len(rankings) != len(subsets):
        raise ShapeError("rankings, targets and subsets must be parallel")
    subset_rankings = []
    for i, (ranking, target, subset) in enumerate(zip(rankings, targets, subsets)):
        subset = set(subset)
        if target not in subset:
            raise ProtocolError(f"query {i}: subset does not contain target {target!r}")
        position = {cid: pos for pos, cid in enumerate(ranking)}
        missing = [m for m in subset if m not in position]
        if missing:
            raise ProtocolError(f"query {i}: subset member {missing[0]!r} missing from the ranking")
        subset_rankings.append(sorted(subset, key=lambda m: position[m]))
    return recall_at_k(subset_rankings, targets, k)


@dataclass
class MetricsReport:
    protocol: str
    mode: str
    values: dict[str, float] = field(default_factory=dict)
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregates: dict[str, float] = field(default_factory=dict)
    num_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "mode": self.mode,
            "num_queries": self.num_queries,
            "values": {k: self.values[k] for k in sorted(self.values)},
            "per_category": {
                c: {k: v[k] for k in sorted(v)} for c, v in sorted(self.per_category.items())
            },
            "aggregates": {k: self.aggregates[k] for k in sorted(self.aggregates)},
        }


def _queries_for_mode(
    records: list[TripletRecord],
    backend: BackendBase,
    fusion: FusionParams,
    data,
    mode: str,
    batch_size: int = 64,
) -> np.ndarray:
    """Encode one query vector per record according to the ablation mode."""
    out: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            if mode == "mod_text_only":
                q = backend.encode_texts([r.modification_text for r in chunk])
            elif mode == "caption_only":
                q = backend.encode_texts([data.caption_text(r.reference_image_id) for r in chunk])
            elif mode == "reference_image_only":
                q = backend.encode_images([data.reference_image(r) for r in chunk])
            else:
                ft = backend.encode_texts([data.unified_text(r.triplet_id) for r in chunk])
                fv = backend.encode_images([data.visual_image(r.triplet_id) for r in chunk])
                if mode == "textual_only":
                    q = ft
                elif mode == "visual_only":
                    q = fv
                elif mode == "average_addition":
                    q = 0.5 * ft + 0.5 * fv
                elif mode == "full":
                    q, _ = fused_queries(fusion, ft, fv)
                else:
                    raise ValidationError(
                        f"unknown ablation mode {mode!r}; known: {', '.join(ABLATION_MODES)}"
                    )
            out.append(q.numpy().astype(np.float64))
    return np.concatenate(out, axis=0) if out else np.zeros((0, backend.dim))


def evaluate(
    records: list[TripletRecord],
    candidates: CandidateSet,
    backend: BackendBase,
    checkpoint: Checkpoint,
    data,
    protocol: EvalProtocol,
    mode: str = "full",
    image_root: str | Path = ".",
    exclude_reference: bool = False,
    index: EmbeddingIndex | None = None,
) -> MetricsReport:
    """Rank every query against the protocol's candidate set and score it.

    ``data`` supplies preprocessed inputs (see pipeline.PreprocessedStore).
    The checkpoint's backbone state, when present, is loaded into the backend
    before anything is encoded.
    """
    if mode not in ABLATION_MODES:
        raise ValidationError(f"unknown ablation mode {mode!r}; known: {', '.join(ABLATION_MODES)}")
    if not records:
        raise ValidationError("cannot evaluate zero queries")
    for rec in records:
        if rec.target_image_id is None:
            raise ProtocolError(f"triplet {rec.triplet_id!r} has no target; evaluation needs one")
    if checkpoint.backbone_state:
        apply_backbone_state(backend, checkpoint.backbone_state)
    if index is None:
        index = build_index(backend, candidates, image_root=image_root)
    queries = _queries_for_mode(records, backend, checkpoint.fusion_params, data, mode)
    rankings = []
    for i, rec in enumerate(records):
        exclude = {rec.reference_image_id} if exclude_reference else None
        rankings.append(rank(queries[i], index, exclude))
    targets = [r.target_image_id for r in records]

    report = MetricsReport(protocol=protocol.name, mode=mode, num_queries=len(records))
    for k in protocol.recall_ks:
        report.values[f"R@{k}"] = recall_at_k(rankings, targets, k)
    if protocol.subset_ks:
        subsets = []
        for rec in records:
            if not rec.subset_member_ids:
                raise ProtocolError(
                    f"protocol {protocol.name!r} needs subset_member_ids; "
                    f"triplet {rec.triplet_id!r} has none"
                )
            subsets.append(rec.subset_member_ids)
        for k in protocol.subset_ks:
            report.values[f"R_subset@{k}"] = recall_subset_at_k(rankings, targets, subsets, k)

    if protocol.categories or protocol.aggregate == "mean_category_means":
        groups: dict[str, list[int]] = {}
        for i, rec in enumerate(records):
            groups.setdefault(rec.category or "all", []).append(i)
        for cat, idxs in sorted(groups.items()):
            cat_rank = [rankings[i] for i in idxs]
            cat_tgt = [targets[i] for i in idxs]
            report.per_category[cat] = {
                f"R@{k}": recall_at_k(cat_rank, cat_tgt, k) for k in protocol.recall_ks
            }

    if protocol.aggregate == "mean_category_means":
        per_k_means = [
            float(np.mean([report.per_category[c][f"R@{k}"] for c in report.per_category]))
            for k in protocol.recall_ks
        ]
        report.aggregates["Avg"] = float(np.mean(per_k_means))
    elif protocol.aggregate == "r5_plus_rsub1_half":
        report.aggregates["Avg"] = (report.values["R@5"] + report.values["R_subset@1"]) / 2.0
    else:
        report.aggregates["Avg"] = float(np.mean(list(report.values.values())))
    return report


def format_report(report: MetricsReport) -> str:
    """Human-readable table, values at two decimals like the result tables."""
    lines = [f"protocol: {report.protocol}   mode: {report.mode}   queries: {report.num_queries}"]
    for name in sorted(report.values):
        lines.append(f"  {name:<12} {report.values[name]:6.2f}")
    for cat in sorted(report.per_category):
        vals = "  ".join(
            f"{k}={v:.2f}" for k, v in sorted(report.per_category[cat].items())
        )
        lines.append(f"  [{cat}] {vals}")
    for name in sorted(report.aggregates):
        lines.append(f"  {name:<12} {report.aggregates[name]:6.2f}")
    return "\n".join(lines)
