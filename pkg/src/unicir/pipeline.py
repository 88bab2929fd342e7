"""Pipeline orchestration behind the CLI subcommands.

Wires the dataset adapters, service clients, caches, encoder backend, fusion
head, trainer and evaluator together according to a RunConfig.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report as report_mod
from .adapters import load_dataset
from .cachefile import LineCache, hash_file, input_hash
from .clients import (
    CaptionClient,
    FixtureCaptioner,
    FixtureKeywordExtractor,
    LlmKeywordExtractor,
    ReplayCache,
    RuleBasedExtractor,
)
from .config import RunConfig
from .datamodel import (
    EvalProtocol,
    TripletRecord,
    build_candidate_set,
    load_gallery,
    resolve_image_paths,
)
from .encoders import BackendBase, NormalizedBackend, create_backend
from .errors import ConfigError, ValidationError
from .evaluation import build_index, evaluate, export_index, load_index, scored_rank
from .fusion import fused_queries
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, apply_backbone_state
from .unify_text import build_unified_textual_query, cache_unified_text
from .unify_vision import load_image, render_with_truncation, save_visual_query, visual_query_path


def load_records(config: RunConfig, manifest: str | None = None) -> list[TripletRecord]:
    return load_dataset(
        config.dataset,
        manifest or config.manifest,
        caption_join=config.caption_join,
        extra_path=config.cirr_image_splits,
        category=config.fashioniq_category,
    )


def make_backend(config: RunConfig) -> BackendBase:
    backend = create_backend(
        config.backend_name,
        dim=config.backend_dim,
        seed=config.backend_seed,
        text_token_limit=config.text_token_limit,
    )
    if config.normalize_features:
        backend = NormalizedBackend(backend)
    return backend


def make_clients(config: RunConfig) -> tuple[object, object, ReplayCache]:
    """Build (captioner, extractor, replay_cache) from the services section."""
    cache = ReplayCache(config.cache_root, mode=config.cache_mode)
    if config.captioner.kind == "http":
        captioner = CaptionClient(config.captioner.endpoint, cache)
    else:
        if not config.captioner.fixture:
            raise ConfigError("fixture captioner requires services.captioner.fixture")
        captioner = FixtureCaptioner(config.captioner.fixture, cache)
    if config.extractor.kind == "http":
        extractor = LlmKeywordExtractor(config.extractor.endpoint, cache)
    elif config.extractor.kind == "fixture":
        if not config.extractor.fixture:
            raise ConfigError("fixture extractor requires services.extractor.fixture")
        extractor = FixtureKeywordExtractor(config.extractor.fixture, cache)
    else:
        extractor = RuleBasedExtractor(cache)
    return captioner, extractor, cache


def _style_signature(config: RunConfig) -> str:
    s = config.render
    return json.dumps(
        {
            "color": list(s.color),
            "margin_px": s.margin_px,
            "line_height_fraction": s.line_height_fraction,
            "max_lines": s.max_lines,
        },
        sort_keys=True,
    )


def _gather_records(config: RunConfig) -> list[TripletRecord]:
    """Manifest plus val manifest, rejecting conflicting duplicate ids."""
    records = load_records(config)
    if config.val_manifest:
        seen = {r.triplet_id: r for r in records}
        for rec in load_records(config, config.val_manifest):
            prior = seen.get(rec.triplet_id)
            if prior is None:
                seen[rec.triplet_id] = rec
                records.append(rec)
            elif prior != rec:
                raise ValidationError(
                    f"triplet_id {rec.triplet_id!r} appears in both manifests with different content"
                )
    return records


def run_preprocess(config: RunConfig, jobs: int | None = None) -> dict:
    """Fill all preprocess caches for the configured manifest(s).

    Idempotent: a rerun over a complete cache performs zero new writes. The
    summary reports how many entries each cache gained.
    """
    records = _gather_records(config)
    captioner, extractor, cache = make_clients(config)
    cache_root = Path(config.cache_root)
    ut_cache = LineCache(cache_root / "unified_text.cache")
    vis_cache = LineCache(cache_root / "visual.cache")
    image_root = Path(config.image_root)
    style_sig = _style_signature(config)

    before = {
        "captions": set(cache.captions.keys()),
        "keywords": set(cache.keywords.keys()),
        "unified_text": set(ut_cache.keys()),
        "visual": set(vis_cache.keys()),
    }
    stats_lock = threading.Lock()
    stats = {"visual_files_written": 0, "visual_truncated": 0}

    def process(rec: TripletRecord) -> None:
        ref_path = image_root / rec.reference_image_path
        caption = captioner.caption(rec.reference_image_id, ref_path)
        keywords = extractor.extract(rec.triplet_id, rec.modification_text)
        cache_unified_text(ut_cache, rec.triplet_id, caption, rec.modification_text)

        png_path = visual_query_path(cache_root, rec.triplet_id)
        ihash = input_hash(hash_file(ref_path), " ".join(keywords.words), style_sig)
        cached = vis_cache.lookup(rec.triplet_id, ihash)
        if cached is not None and png_path.exists():
            return
        query = render_with_truncation(load_image(ref_path), keywords, config.render)
        save_visual_query(query, cache_root)
        rendered_words = len(keywords.words)  # render_with_truncation only drops on overflow
        band = [query.text_band.x0, query.text_band.y0, query.text_band.x1, query.text_band.y1]
        vis_cache.put(
            rec.triplet_id,
            ihash,
            {"path": f"visual/{rec.triplet_id}.png", "band": band, "words": rendered_words},
        )
        with stats_lock:
            stats["visual_files_written"] += 1

    workers = jobs if jobs is not None else config.jobs
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(process, records))
    else:
        for rec in records:
            process(rec)

    summary = {
        "triplets": len(records),
        "cache_mode": cache.mode,
        "captions_new": len(set(cache.captions.keys()) - before["captions"]),
        "keywords_new": len(set(cache.keywords.keys()) - before["keywords"]),
        "unified_text_new": len(set(ut_cache.keys()) - before["unified_text"]),
        "visual_new": len(set(vis_cache.keys()) - before["visual"]),
        "visual_files_written": stats["visual_files_written"],
    }
    return summary


class PreprocessedStore:
    """Read-side view of the preprocess caches for training and evaluation.

    Missing entries surface as KeyError / FileNotFoundError; the trainer
    converts those into a preprocessing-incomplete failure up front.
    """

    def __init__(self, cache_root: str | Path, image_root: str | Path, records: list[TripletRecord]):
        self.cache_root = Path(cache_root)
        self.image_root = Path(image_root)
        self.unified = LineCache(self.cache_root / "unified_text.cache")
        self.captions = LineCache(self.cache_root / "captions.cache")
        self.paths = resolve_image_paths(records)
        self._images: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def unified_text(self, triplet_id: str) -> str:
        entry = self.unified.get(triplet_id)
        if entry is None:
            raise KeyError(f"no unified text cached for triplet {triplet_id!r}")
        return str(entry[1])

    def caption_text(self, image_id: str) -> str:
        entry = self.captions.get(image_id)
        if entry is None:
            raise KeyError(f"no caption cached for image {image_id!r}")
        return str(entry[1]["text"])

    def _load(self, path: Path) -> np.ndarray:
        key = str(path)
        with self._lock:
            if key not in self._images:
                self._images[key] = load_image(path)
            return self._images[key]

    def visual_image(self, triplet_id: str) -> np.ndarray:
        return self._load(visual_query_path(self.cache_root, triplet_id))

    def target_image(self, image_id: str) -> np.ndarray:
        rel = self.paths.get(image_id, image_id)
        return self._load(self.image_root / rel)

    def reference_image(self, record: TripletRecord) -> np.ndarray:
        return self._load(self.image_root / record.reference_image_path)


def _candidates(config: RunConfig, records: list[TripletRecord], protocol: EvalProtocol):
    gallery = load_gallery(config.gallery) if config.gallery else None
    return build_candidate_set(records, protocol, gallery)


def run_train(config: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Train once per configured seed; writes checkpoints and loss logs."""
    records = load_records(config)
    out = Path(out_dir or config.output_dir)
    store = PreprocessedStore(config.cache_root, config.image_root, records)
    protocol = EvalProtocol.named(config.protocol)

    val_records = None
    if config.val_manifest:
        val_records = load_records(config, config.val_manifest)

    summary: dict[str, dict] = {}
    for seed in config.seeds:
        backend = make_backend(config)
        tcfg = replace(config.train, seed=seed)
        wall_times: list[float] = []

        def on_epoch(epoch: int, mean_loss: float, wall: float) -> None:
            wall_times.append(wall)

        val_fn = None
        if val_records is not None:
            val_store = PreprocessedStore(config.cache_root, config.image_root, val_records)
            val_candidates = _candidates(config, val_records, protocol)

            def val_fn(ckpt):
                rep = evaluate(
                    val_records,
                    val_candidates,
                    backend,
                    ckpt,
                    val_store,
                    protocol,
                    mode=config.mode,
                    image_root=config.image_root,
                    exclude_reference=config.exclude_reference,
                )
                return rep.aggregates["Avg"]

        ckpt = train(records, backend, tcfg, store, epoch_callback=on_epoch, val_fn=val_fn)
        path = config.checkpoint_path(seed)
        save_checkpoint(ckpt, path)
        report_mod.write_loss_log(
            ckpt.history, out, wall_times=wall_times, stem=f"loss_log-seed{seed}",
            figures=config.figures,
        )
        summary[f"seed{seed}"] = {
            "checkpoint": str(path),
            "epochs": ckpt.epoch,
            "final_loss": ckpt.history[-1] if ckpt.history else None,
        }
    return summary


def run_evaluate(
    config: RunConfig,
    checkpoint_path: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Evaluate the protocol for each seed checkpoint (or one explicit file)."""
    records = load_records(config)
    protocol = EvalProtocol.named(config.protocol)
    candidates = _candidates(config, records, protocol)
    store = PreprocessedStore(config.cache_root, config.image_root, records)
    out = Path(out_dir or config.output_dir)

    if checkpoint_path is not None:
        seed_paths = {config.seeds[0]: Path(checkpoint_path)}
    else:
        seed_paths = {seed: config.checkpoint_path(seed) for seed in config.seeds}

    reports = {}
    for seed, path in seed_paths.items():
        backend = make_backend(config)
        ckpt = load_checkpoint(path, expected_dim=config.backend_dim)
        rep = evaluate(
            records,
            candidates,
            backend,
            ckpt,
            store,
            protocol,
            mode=config.mode,
            image_root=config.image_root,
            exclude_reference=config.exclude_reference,
        )
        reports[seed] = rep
        stem = "metrics" if len(seed_paths) == 1 else f"metrics-seed{seed}"
        report_mod.write_metrics_report(rep, out, stem=stem, figures=config.figures)
    if len(reports) > 1:
        report_mod.write_seed_summary(reports, out, figures=config.figures)
    return reports


def run_retrieve(
    config: RunConfig,
    reference_image: str | Path,
    modification_text: str,
    top_k: int = 5,
    checkpoint_path: str | Path | None = None,
    index_prefix: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> str:
    """Single-query retrieval; returns the printable result block."""
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    if not modification_text.strip():
        raise ValidationError("modification text empty after trimming")
    records = load_records(config)
    protocol = EvalProtocol.named(config.protocol)
    candidates = _candidates(config, records, protocol)
    backend = make_backend(config)
    path = Path(checkpoint_path) if checkpoint_path else config.checkpoint_path(config.seeds[0])
    ckpt = load_checkpoint(path, expected_dim=config.backend_dim)
    if ckpt.backbone_state:
        apply_backbone_state(backend, ckpt.backbone_state)

    if index_prefix is not None:
        index = load_index(index_prefix)
    else:
        index = build_index(backend, candidates, image_root=config.image_root)

    captioner, extractor, _ = make_clients(config)
    ref_path = Path(reference_image)
    image_id = str(reference_image)
    caption = captioner.caption(image_id, ref_path)
    q_t = build_unified_textual_query(caption, modification_text, triplet_id="query")
    query_key = "query-" + input_hash(modification_text)[:16]
    keywords = extractor.extract(query_key, modification_text)
    ref_img = load_image(ref_path)
    q_v = render_with_truncation(ref_img, keywords, config.render)

    import torch

    with torch.no_grad():
        f_t = backend.encode_texts([q_t.text])
        f_v = backend.encode_images([q_v.image])
        fq, lam = fused_queries(ckpt.fusion_params, f_t, f_v)
    results = scored_rank(fq[0].numpy(), index)[:top_k]
    lam_value = float(lam.reshape(-1)[0])

    out = Path(out_dir or config.output_dir)
    result_images = None
    if config.figures:
        path_by_id = dict(zip(candidates.image_ids, candidates.image_paths))
        result_images = [
            load_image(Path(config.image_root) / path_by_id[cid]) for cid, _ in results
        ]
    report_mod.write_retrieval_report(
        out,
        modification_text,
        lam_value,
        results,
        reference_image=ref_img,
        result_images=result_images,
        figures=config.figures,
    )

    lines = [f"lambda\t{lam_value:.6f}"]
    for i, (cid, score) in enumerate(results, start=1):
        lines.append(f"{i}\t{cid}\t{score:.6f}")
    return "\n".join(lines)


def run_export_index(
    config: RunConfig,
    out_prefix: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[Path, Path]:
    """Encode the candidate set and export the matrix + id sidecar."""
    records = load_records(config)
    protocol = EvalProtocol.named(config.protocol)
    candidates = _candidates(config, records, protocol)
    backend = make_backend(config)
    # default to the run's first-seed checkpoint so an exported index matches
    # what retrieve ranks against
    path = Path(checkpoint_path) if checkpoint_path else config.checkpoint_path(config.seeds[0])
    ckpt = load_checkpoint(path, expected_dim=config.backend_dim)
    if ckpt.backbone_state:
        apply_backbone_state(backend, ckpt.backbone_state)
    index = build_index(backend, candidates, image_root=config.image_root)
    prefix = Path(out_prefix) if out_prefix else Path(config.output_dir) / "index"
    return export_index(index, prefix)
