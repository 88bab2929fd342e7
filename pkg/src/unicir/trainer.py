"""Training loop: optimize the fusion head (and trainable backbone groups)
against the batch classification loss over a triplet manifest.

Only two parameter groups exist, mirroring the split learning rates used for
fine-tuning a VLP backbone: the backbone group (encoder projections) and the
head group (fusion perceptron plus any backend head tensors).
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoders import BackendBase
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    PreprocessingIncompleteError,
    ValidationError,
)
from .fusion import FusionParams, LossConfig, composed_loss

CHECKPOINT_MAGIC = b"UNICIRCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr_backbone: float = 1e-6
    lr_head: float = 1e-4
    shoes_profile: bool = False
    batch_size: int = 16
    tau: float = 0.1
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adamw"
    checkpoint_dir: str = "checkpoints"
    hidden: int | None = None

    def __post_init__(self) -> None:
        if self.shoes_profile:
            # the Shoes training profile uses its own pair of learning rates
            self.lr_backbone = 5e-6
            self.lr_head = 5e-5
        if self.lr_backbone < 0 or self.lr_head <= 0:
            raise ValidationError("learning rates must be positive (lr_backbone may be 0 to freeze)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}; only adamw is implemented")

    def to_dict(self) -> dict:
        return {
            "lr_backbone": self.lr_backbone,
            "lr_head": self.lr_head,
            "shoes_profile": self.shoes_profile,
            "batch_size": self.batch_size,
            "tau": self.tau,
            "epochs": self.epochs,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "checkpoint_dir": self.checkpoint_dir,
            "hidden": self.hidden,
        }


@dataclass
class Checkpoint:
    fusion_params: FusionParams
    backbone_state: dict[str, np.ndarray] | None
    config_snapshot: dict
    epoch: int
    rng_state: dict
    history: list[float] = field(default_factory=list)


def backbone_state_of(backend: BackendBase) -> dict[str, np.ndarray]:
    group = backend.parameter_groups().get("backbone", [])
    return {f"backbone.{i}": t.detach().numpy().copy() for i, t in enumerate(group)}


def apply_backbone_state(backend: BackendBase, state: dict[str, np.ndarray]) -> None:
    """Copy a saved backbone group back into a live backend, shape-checked."""
    group = backend.parameter_groups().get("backbone", [])
    if len(state) != len(group):
        raise IncompatibleCheckpointError(
            f"checkpoint has {len(state)} backbone tensors, backend expects {len(group)}"
        )
    with torch.no_grad():
        for i, tensor in enumerate(group):
            saved = state.get(f"backbone.{i}")
            if saved is None:
                raise IncompatibleCheckpointError(f"checkpoint lacks backbone tensor {i}")
            if tuple(saved.shape) != tuple(tensor.shape):
                raise IncompatibleCheckpointError(
                    f"backbone tensor {i}: checkpoint shape {tuple(saved.shape)} "
                    f"!= backend shape {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(saved.astype(np.float32)))


def _precheck(records, data) -> None:
    """Fail fast if any record lacks its preprocessed inputs."""
    for rec in records:
        try:
            data.unified_text(rec.triplet_id)
            data.visual_image(rec.triplet_id)
            if rec.target_image_id is None:
                raise PreprocessingIncompleteError(
                    f"triplet {rec.triplet_id!r} has no target image; cannot train on it"
                )
            data.target_image(rec.target_image_id)
        except PreprocessingIncompleteError:
            raise
        except (KeyError, FileNotFoundError, OSError) as exc:
            raise PreprocessingIncompleteError(
                f"triplet {rec.triplet_id!r}: missing preprocessed input ({exc})"
            ) from exc


def train(
    records,
    backend: BackendBase,
    config: TrainConfig,
    data,
    epoch_callback=None,
    val_fn=None,
) -> Checkpoint:
    """Run shuffled mini-batch epochs and return the final checkpoint.

    ``data`` provides the preprocessed inputs: unified_text(triplet_id),
    visual_image(triplet_id) and target_image(image_id). ``val_fn``, when
    given, scores a Checkpoint after every epoch and the best-scoring state
    is returned instead of the last. Shuffling is seeded by (seed, epoch) so
    a fixed seed reproduces the exact loss trajectory.
    """
    if not records:
        raise ValidationError("cannot train on an empty manifest")
    torch.set_num_threads(1)
    _precheck(records, data)

    fusion = FusionParams.initialize(
        backend.dim, hidden=config.hidden, seed=config.seed
    ).requires_grad_(True)
    groups = backend.parameter_groups()
    head_params = fusion.parameters() + list(groups.get("head", []))
    param_groups = [{"params": head_params, "lr": config.lr_head}]
    if groups.get("backbone"):
        param_groups.insert(0, {"params": groups["backbone"], "lr": config.lr_backbone})
    optimizer = torch.optim.AdamW(param_groups)
    loss_cfg = LossConfig(tau=config.tau, batch_size=config.batch_size)

    def snapshot(epoch: int, history: list[float]) -> Checkpoint:
        return Checkpoint(
            fusion_params=fusion.clone(),
            backbone_state=backbone_state_of(backend) or None,
            config_snapshot=config.to_dict(),
            epoch=epoch,
            rng_state={"seed": config.seed, "epochs_done": epoch},
            history=list(history),
        )

    history: list[float] = []
    best: tuple[float, Checkpoint] | None = None
    n = len(records)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng((config.seed, epoch)).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            texts = [data.unified_text(r.triplet_id) for r in batch]
            visuals = [data.visual_image(r.triplet_id) for r in batch]
            targets = [data.target_image(r.target_image_id) for r in batch]
            f_textual = backend.encode_texts(texts)
            f_visual = backend.encode_images(visuals)
            f_target = backend.encode_images(targets)
            loss, _ = composed_loss(fusion, f_textual, f_visual, f_target, loss_cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(batch)
        mean_loss = total / n
        history.append(mean_loss)
        if epoch_callback is not None:
            epoch_callback(epoch, mean_loss, time.perf_counter() - t0)
        if val_fn is not None:
            ckpt = snapshot(epoch + 1, history)
            score = float(val_fn(ckpt))
            if best is None or score > best[0]:
                best = (score, ckpt)
    if best is not None:
        return best[1]
    return snapshot(config.epochs, history)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Versioned binary layout: magic, version, JSON header, float32 payload.

    The header carries an ordered array manifest (name/shape), the config
    snapshot, epoch, rng state and loss history; the payload is the arrays'
    raw little-endian float32 bytes in manifest order.
    """
    arrays: list[tuple[str, np.ndarray]] = [
        ("fusion.W1", ckpt.fusion_params.W1.detach().numpy()),
        ("fusion.b1", ckpt.fusion_params.b1.detach().numpy()),
        ("fusion.W2", ckpt.fusion_params.W2.detach().numpy()),
        ("fusion.b2", ckpt.fusion_params.b2.detach().numpy()),
    ]
    for name in sorted(ckpt.backbone_state or {}):
        arrays.append((name, ckpt.backbone_state[name]))
    header = {
        "version": CHECKPOINT_VERSION,
        "dim": ckpt.fusion_params.dim,
        "hidden": ckpt.fusion_params.hidden,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "config": ckpt.config_snapshot,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_dim: int | None = None) -> Checkpoint:
    """Inverse of save_checkpoint with explicit corruption/version errors."""
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    magic = buf.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file (bad magic)")
    raw = buf.read(4)
    if len(raw) < 4:
        raise CorruptCheckpointError(f"{path}: truncated version field")
    version = struct.unpack("<I", raw)[0]
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    raw = buf.read(8)
    if len(raw) < 8:
        raise CorruptCheckpointError(f"{path}: truncated header length")
    header_len = struct.unpack("<Q", raw)[0]
    header_bytes = buf.read(header_len)
    if len(header_bytes) < header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    if expected_dim is not None and header.get("dim") != expected_dim:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint dim {header.get('dim')} does not match configured D={expected_dim}"
        )
    tensors: dict[str, np.ndarray] = {}
    for spec in header.get("arrays", []):
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(4 * count)
        if len(raw) < 4 * count:
            raise CorruptCheckpointError(f"{path}: truncated payload at array {spec['name']!r}")
        tensors[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    missing = [k for k in ("fusion.W1", "fusion.b1", "fusion.W2", "fusion.b2") if k not in tensors]
    if missing:
        raise CorruptCheckpointError(f"{path}: header lacks fusion arrays {missing}")
    fusion = FusionParams(
        torch.from_numpy(tensors["fusion.W1"]),
        torch.from_numpy(tensors["fusion.b1"]),
        torch.from_numpy(tensors["fusion.W2"]),
        torch.from_numpy(tensors["fusion.b2"]),
    )
    backbone = {k: v for k, v in tensors.items() if k.startswith("backbone.")}
    return Checkpoint(
        fusion_params=fusion,
        backbone_state=backbone or None,
        config_snapshot=header.get("config", {}),
        epoch=int(header.get("epoch", 0)),
        rng_state=header.get("rng_state", {}),
        history=[float(x) for x in header.get("history", [])],
    )
