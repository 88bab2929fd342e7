"""Procedural toy dataset: 32 colored/patterned tiles plus templated triplets.

Eight colors x four patterns, rendered as 128 x 128 PNGs. Triplet i uses item
i as reference and item i+1 (mod 32) as target, with a templated modification
text naming the attribute changes. Captions ship as a fixture file so the
whole pipeline runs without any external service. Run as a module:

    python -m unicir.toydata --out toy_dataset
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import TripletRecord, save_manifest

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 220, 50),
    "purple": (130, 20, 200),
    "orange": (240, 150, 40),
    "teal": (40, 170, 170),
    "pink": (245, 170, 190),
}
PATTERNS = ("plain", "striped", "dotted", "checkered")
TILE = 128
_CELL = 16
_BORDER = 12  # white frame so even plain tiles have spatial structure


def make_tile(color_name: str, pattern: str) -> np.ndarray:
    """Render one 128 x 128 item image: the pattern inside a white frame."""
    rgb = np.array(COLORS[color_name], dtype=np.uint8)
    img = np.full((TILE, TILE, 3), 255, dtype=np.uint8)
    yy, xx = np.mgrid[0:TILE, 0:TILE]
    if pattern == "plain":
        mask = np.ones((TILE, TILE), dtype=bool)
    elif pattern == "striped":
        mask = (yy // _CELL) % 2 == 0
    elif pattern == "dotted":
        mask = ((yy % (2 * _CELL)) < (_CELL // 2)) & ((xx % (2 * _CELL)) < (_CELL // 2))
    elif pattern == "checkered":
        mask = ((yy // _CELL) + (xx // _CELL)) % 2 == 0
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    inside = (yy >= _BORDER) & (yy < TILE - _BORDER) & (xx >= _BORDER) & (xx < TILE - _BORDER)
    img[mask & inside] = rgb
    # black position marker, one grid slot per (color, pattern) combination,
    # plus a point-mirrored twin. Brightness alone leaves the 32 tiles
    # spanning far fewer than 32 feature directions, and then no linear
    # encoder can drive their pairwise cosine similarities low; unique marker
    # positions make the feature matrix full rank, and the twin doubles the
    # per-item signal. The grid starts below the caption band so rendered
    # keywords do not cover it.
    slot = PATTERNS.index(pattern) * len(COLORS) + list(COLORS).index(color_name)
    cy = 34 + 14 * (slot // 6)
    cx = 20 + 18 * (slot % 6)
    img[cy - 6 : cy + 6, cx - 6 : cx + 6] = (0, 0, 0)
    img[TILE - cy - 6 : TILE - cy + 6, TILE - cx - 6 : TILE - cx + 6] = (0, 0, 0)
    return img


def item_attributes() -> list[tuple[str, str]]:
    """The 32 (color, pattern) combinations, pattern-major order."""
    return [(color, pattern) for pattern in PATTERNS for color in COLORS]


def caption_for(color: str, pattern: str) -> str:
    return f"a {color} {pattern} square"


def modification_between(ref: tuple[str, str], tgt: tuple[str, str]) -> str:
    parts = []
    if ref[0] != tgt[0]:
        parts.append(f"is {tgt[0]} instead of {ref[0]}")
    if ref[1] != tgt[1]:
        parts.append(f"has a {tgt[1]} pattern instead of {ref[1]}")
    return ", ".join(parts) if parts else "is the same"


def generate(out_dir: str | Path) -> dict:
    """Write images/, manifest.jsonl, captions.json; returns a summary."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    attrs = item_attributes()
    image_ids = []
    captions: dict[str, str] = {}
    for i, (color, pattern) in enumerate(attrs):
        image_id = f"images/toy{i:02d}.png"  # ids double as root-relative paths
        Image.fromarray(make_tile(color, pattern), mode="RGB").save(out / image_id, format="PNG")
        captions[image_id] = caption_for(color, pattern)
        image_ids.append(image_id)
    records = []
    n = len(attrs)
    for i in range(n):
        j = (i + 1) % n
        records.append(
            TripletRecord(
                triplet_id=f"t{i:02d}",
                reference_image_id=image_ids[i],
                reference_image_path=image_ids[i],
                modification_text=modification_between(attrs[i], attrs[j]),
                target_image_id=image_ids[j],
            )
        )
    save_manifest(records, out / "manifest.jsonl")
    with open(out / "captions.json", "w", encoding="utf-8") as fh:
        json.dump(captions, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    return {"items": n, "triplets": len(records), "root": str(out)}


DEFAULT_CONFIG = """\
dataset: canonical
manifest: manifest.jsonl
image_root: .
cache_root: cache
output_dir: runs/toy
backend: {name: toy, dim: 128, seed: 0}
services:
  mode: record
  captioner: {kind: fixture, fixture: captions.json}
  extractor: {kind: rule_based}
train:
  lr_backbone: 3.0e-3
  lr_head: 1.0e-3
  batch_size: 16
  tau: 0.1
  epochs: 200
  seed: 0
  checkpoint_dir: checkpoints
protocol: fashioniq_val
mode: full
seeds: [0]
"""


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Generate the synthetic toy CIR dataset.")
    parser.add_argument("--out", default="toy_dataset", help="output directory")
    parser.add_argument(
        "--with-config",
        action="store_true",
        help="also write a ready-to-run config.yaml into the output directory",
    )
    args = parser.parse_args(argv)
    summary = generate(args.out)
    if args.with_config:
        (Path(args.out) / "config.yaml").write_text(DEFAULT_CONFIG, encoding="utf-8")
        summary["config"] = str(Path(args.out) / "config.yaml")
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
