"""Run configuration: one YAML file, overridable with --set key=value.

Every field has a default except the manifest path, so a minimal config is
just ``manifest: path/to/manifest.jsonl``. Dotted override keys address
nested sections, e.g. ``--set train.epochs=200``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .clients import CACHE_MODES, ServiceEndpoint
from .errors import ConfigError
from .evaluation import ABLATION_MODES
from .trainer import TrainConfig
from .unify_vision import COLOR_PALETTE, RenderStyle

_TOP_LEVEL_KEYS = {
    "dataset",
    "manifest",
    "val_manifest",
    "gallery",
    "image_root",
    "cache_root",
    "output_dir",
    "backend",
    "render",
    "services",
    "train",
    "protocol",
    "mode",
    "seeds",
    "exclude_reference",
    "caption_join",
    "cirr_image_splits",
    "fashioniq_category",
    "jobs",
    "normalize_features",
    "figures",
}

_SERVICE_KINDS = {
    "captioner": ("http", "fixture"),
    "extractor": ("http", "rule_based", "fixture"),
}


@dataclass
class ServiceConfig:
    kind: str
    endpoint: ServiceEndpoint | None = None
    fixture: str | None = None


@dataclass
class RunConfig:
    manifest: str
    dataset: str = "canonical"
    val_manifest: str | None = None
    gallery: str | None = None
    image_root: str = "."
    cache_root: str = "cache"
    output_dir: str = "runs/latest"
    backend_name: str = "toy"
    backend_dim: int = 64
    backend_seed: int = 0
    text_token_limit: int = 77
    render: RenderStyle = field(default_factory=RenderStyle)
    cache_mode: str = "record"
    captioner: ServiceConfig = field(default_factory=lambda: ServiceConfig(kind="fixture"))
    extractor: ServiceConfig = field(default_factory=lambda: ServiceConfig(kind="rule_based"))
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: str = "fashioniq_val"
    mode: str = "full"
    seeds: list[int] = field(default_factory=lambda: [0])
    exclude_reference: bool = False
    caption_join: str = " and "
    cirr_image_splits: str | None = None
    fashioniq_category: str | None = None
    jobs: int = 1
    normalize_features: bool = False
    figures: bool = True

    def checkpoint_path(self, seed: int) -> Path:
        return Path(self.train.checkpoint_dir) / f"checkpoint-seed{seed}.bin"


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def _apply_override(tree: dict, dotted: str, raw_value: str) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {dotted}: {key!r} is not a section")
        node = nxt
    node[keys[-1]] = _parse_scalar(raw_value)


def _parse_color(value) -> tuple[int, int, int]:
    if isinstance(value, str):
        if value not in COLOR_PALETTE:
            raise ConfigError(
                f"unknown color name {value!r}; known: {', '.join(sorted(COLOR_PALETTE))}"
            )
        return COLOR_PALETTE[value]
    if isinstance(value, (list, tuple)) and len(value) == 3:
        return tuple(int(c) for c in value)
    raise ConfigError(f"color must be a palette name or an RGB triple, got {value!r}")


def _parse_service(name: str, node: dict | None, default_kind: str) -> ServiceConfig:
    explicit = node is not None
    node = dict(node or {})
    kind = str(node.pop("kind", default_kind))
    if kind not in _SERVICE_KINDS[name]:
        raise ConfigError(
            f"services.{name}.kind must be one of {_SERVICE_KINDS[name]}, got {kind!r}"
        )
    fixture = node.pop("fixture", None)
    endpoint = None
    if kind == "http":
        try:
            endpoint = ServiceEndpoint(
                base_url=str(node.pop("base_url")),
                model_name=str(node.pop("model_name", "default")),
                timeout_s=float(node.pop("timeout_s", 30.0)),
                max_retries=int(node.pop("max_retries", 2)),
                auth_token_env_var=str(node.pop("auth_token_env_var", "UNICIR_SERVICE_TOKEN")),
            )
        except KeyError as exc:
            raise ConfigError(f"services.{name}: http kind requires base_url") from exc
    elif kind == "fixture" and explicit and not fixture:
        # an omitted section stays lazy; the error surfaces when the client
        # is actually built (training/evaluation never need the services)
        raise ConfigError(f"services.{name}: fixture kind requires a fixture path")
    if node:
        raise ConfigError(f"services.{name}: unknown key(s) {', '.join(sorted(node))}")
    return ServiceConfig(kind=kind, endpoint=endpoint, fixture=None if fixture is None else str(fixture))


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML run config and apply --set overrides."""
    try:
        with open(path, encoding="utf-8") as fh:
            tree = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _apply_override(tree, dotted.strip(), raw)
    return build_config(tree, base_dir=Path(path).parent)


def build_config(tree: dict, base_dir: str | Path = ".") -> RunConfig:
    unknown = set(tree) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if not tree.get("manifest"):
        raise ConfigError("config requires a manifest path")
    base = Path(base_dir)

    def _resolve(p):
        if p is None:
            return None
        p = str(p)
        return p if Path(p).is_absolute() else str(base / p)

    backend = dict(tree.get("backend") or {})
    unknown_backend = set(backend) - {"name", "dim", "seed", "text_token_limit"}
    if unknown_backend:
        raise ConfigError(f"backend: unknown key(s) {', '.join(sorted(unknown_backend))}")
    render_node = dict(tree.get("render") or {})
    style_kwargs = {}
    if "color" in render_node:
        style_kwargs["color"] = _parse_color(render_node.pop("color"))
    for key in ("margin_px", "line_height_fraction", "max_lines"):
        if key in render_node:
            style_kwargs[key] = render_node.pop(key)
    if render_node:
        raise ConfigError(f"render: unknown key(s) {', '.join(sorted(render_node))}")

    services = dict(tree.get("services") or {})
    cache_mode = str(services.pop("mode", "record"))
    if cache_mode not in CACHE_MODES:
        raise ConfigError(f"services.mode must be one of {CACHE_MODES}, got {cache_mode!r}")
    captioner = _parse_service("captioner", services.pop("captioner", None), "fixture")
    extractor = _parse_service("extractor", services.pop("extractor", None), "rule_based")
    if services:
        raise ConfigError(f"services: unknown key(s) {', '.join(sorted(services))}")
    if captioner.fixture:
        captioner.fixture = _resolve(captioner.fixture)
    if extractor.fixture:
        extractor.fixture = _resolve(extractor.fixture)

    train_node = dict(tree.get("train") or {})
    train_known = set(TrainConfig().to_dict())
    unknown_train = set(train_node) - train_known
    if unknown_train:
        raise ConfigError(f"train: unknown key(s) {', '.join(sorted(unknown_train))}")
    train_cfg = TrainConfig(**train_node)
    train_cfg.checkpoint_dir = _resolve(train_cfg.checkpoint_dir)

    mode = str(tree.get("mode", "full"))
    if mode not in ABLATION_MODES:
        raise ConfigError(f"mode must be one of {ABLATION_MODES}, got {mode!r}")

    seeds = tree.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(f"seeds must be a non-empty list of integers, got {seeds!r}")

    cfg = RunConfig(
        manifest=_resolve(tree["manifest"]),
        dataset=str(tree.get("dataset", "canonical")),
        val_manifest=_resolve(tree.get("val_manifest")),
        gallery=_resolve(tree.get("gallery")),
        image_root=_resolve(tree.get("image_root", ".")),
        cache_root=_resolve(tree.get("cache_root", "cache")),
        output_dir=_resolve(tree.get("output_dir", "runs/latest")),
        backend_name=str(backend.get("name", "toy")),
        backend_dim=int(backend.get("dim", 64)),
        backend_seed=int(backend.get("seed", 0)),
        text_token_limit=int(backend.get("text_token_limit", 77)),
        render=RenderStyle(**style_kwargs),
        cache_mode=cache_mode,
        captioner=captioner,
        extractor=extractor,
        train=train_cfg,
        protocol=str(tree.get("protocol", "fashioniq_val")),
        mode=mode,
        seeds=list(seeds),
        exclude_reference=bool(tree.get("exclude_reference", False)),
        caption_join=str(tree.get("caption_join", " and ")),
        cirr_image_splits=_resolve(tree.get("cirr_image_splits")),
        fashioniq_category=(
            None if tree.get("fashioniq_category") is None else str(tree["fashioniq_category"])
        ),
        jobs=int(tree.get("jobs", 1)),
        normalize_features=bool(tree.get("normalize_features", False)),
        figures=bool(tree.get("figures", True)),
    )
    if cfg.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {cfg.jobs}")
    return cfg
