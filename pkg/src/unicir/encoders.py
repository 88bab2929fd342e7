"""Dual-encoder backends mapping texts and images into a shared D-dim space.

The toy backend is a pair of deterministic featurizers (hashed bag-of-words
for text, downsampled grayscale for images) followed by trainable linear maps
into the shared space. It trains in seconds on a CPU and needs no external
weights, which is what the test suite and the end-to-end overfit gate run on.

Real vision-language backbones plug in through the same BackendBase contract:
implement the two encode methods plus parameter_groups() so the trainer can
apply split learning rates, then register the class under a backend name.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BackendError, ConfigError, NumericDomainError, ShapeError, ValidationError

TEXT_HASH_BINS = 2**14
IMAGE_GRID = 32


@dataclass
class Embedding:
    """One D-dimensional vector in the shared space."""

    vector: np.ndarray
    id: str = ""

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector)
        if self.vector.ndim != 1:
            raise ShapeError(f"embedding {self.id!r}: expected a 1-d vector, got shape {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise NumericDomainError(f"embedding {self.id!r} contains non-finite entries")


class BackendBase:
    """Contract every encoder backend satisfies.

    Attributes: name, dim (D), text_token_limit, trainable.
    encode_texts / encode_images return (n, D) float tensors and must be
    deterministic for fixed parameters. parameter_groups() returns
    {"backbone": [...], "head": [...]} tensor lists; the trainer optimizes the
    backbone group at lr_backbone and merges "head" with the fusion
    parameters at lr_head.
    """

    name: str = "base"
    dim: int = 0
    text_token_limit: int = 0
    trainable: bool = False

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def encode_images(self, images: list[np.ndarray]) -> torch.Tensor:
        raise NotImplementedError

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        return {"backbone": [], "head": []}


def text_feature(text: str, token_limit: int) -> np.ndarray:
    """Hashed bag-of-words over whitespace tokens, tail-truncated."""
    tokens = text.split()
    if token_limit > 0:
        tokens = tokens[:token_limit]
    feat = np.zeros(TEXT_HASH_BINS, dtype=np.float32)
    for tok in tokens:
        feat[zlib.crc32(tok.encode("utf-8")) % TEXT_HASH_BINS] += 1.0
    return feat


def image_feature(image: np.ndarray) -> np.ndarray:
    """Grayscale block-mean downsample to IMAGE_GRID x IMAGE_GRID in [0,1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 raster, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < IMAGE_GRID or w < IMAGE_GRID:
        raise ValidationError(f"image must be at least {IMAGE_GRID} px per side, got {w} x {h}")
    rgb = image.astype(np.float32)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    row_idx = (np.arange(IMAGE_GRID) * h) // IMAGE_GRID
    col_idx = (np.arange(IMAGE_GRID) * w) // IMAGE_GRID
    sums = np.add.reduceat(np.add.reduceat(luma, row_idx, axis=0), col_idx, axis=1)
    row_sizes = np.diff(np.append(row_idx, h)).astype(np.float32)
    col_sizes = np.diff(np.append(col_idx, w)).astype(np.float32)
    means = sums / np.outer(row_sizes, col_sizes)
    return (means / 255.0).astype(np.float32).reshape(-1)


class ToyEncoderBackend(BackendBase):
    """Deterministic trainable backend for desk-scale runs.

    Both projections are plain linear maps initialized from the given seed;
    they form the "backbone" parameter group.
    """

    trainable = True

    def __init__(self, dim: int = 64, seed: int = 0, text_token_limit: int = 77):
        if dim < 1:
            raise ConfigError(f"backend dim must be >= 1, got {dim}")
        self.name = "toy"
        self.dim = dim
        self.text_token_limit = text_token_limit
        gen = torch.Generator().manual_seed(seed)
        scale_t = 1.0 / float(np.sqrt(TEXT_HASH_BINS))
        scale_i = 1.0 / float(np.sqrt(IMAGE_GRID * IMAGE_GRID))
        self.text_proj = torch.randn(TEXT_HASH_BINS, dim, generator=gen) * scale_t
        self.image_proj = torch.randn(IMAGE_GRID * IMAGE_GRID, dim, generator=gen) * scale_i
        self.text_proj.requires_grad_(True)
        self.image_proj.requires_grad_(True)

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        feats = np.stack([text_feature(t, self.text_token_limit) for t in texts])
        return torch.from_numpy(feats) @ self.text_proj

    def encode_images(self, images: list[np.ndarray]) -> torch.Tensor:
        feats = np.stack([image_feature(img) for img in images])
        return torch.from_numpy(feats) @ self.image_proj

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        return {"backbone": [self.text_proj, self.image_proj], "head": []}


class NormalizedBackend(BackendBase):
    """Wrapper that L2-normalizes every emitted embedding.

    Off by default (ranking and loss use cosine similarity, which is scale
    invariant); exposed as the normalize-features ablation switch.
    """

    def __init__(self, inner: BackendBase):
        self.inner = inner
        self.name = inner.name + "+l2"
        self.dim = inner.dim
        self.text_token_limit = inner.text_token_limit
        self.trainable = inner.trainable

    @staticmethod
    def _normalize(matrix: torch.Tensor) -> torch.Tensor:
        norms = torch.linalg.vector_norm(matrix, dim=-1, keepdim=True)
        if (norms.detach() == 0).any():
            raise NumericDomainError("cannot L2-normalize a zero-norm embedding")
        return matrix / norms

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        return self._normalize(self.inner.encode_texts(texts))

    def encode_images(self, images: list[np.ndarray]) -> torch.Tensor:
        return self._normalize(self.inner.encode_images(images))

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        return self.inner.parameter_groups()


_BACKENDS = {"toy": ToyEncoderBackend}


def register_backend(name: str, factory) -> None:
    """Register a backend factory(dim, seed, **kw) under a config name."""
    _BACKENDS[name] = factory


def create_backend(name: str, dim: int, seed: int = 0, **kwargs) -> BackendBase:
    try:
        factory = _BACKENDS[name]
    except KeyError:
        raise ConfigError(
            f"unknown encoder backend {name!r}; registered: {', '.join(sorted(_BACKENDS))}"
        ) from None
    return factory(dim=dim, seed=seed, **kwargs)


def _query_text(item) -> str:
    return item.text if hasattr(item, "text") else str(item)


def _query_image(item) -> np.ndarray:
    return item.image if hasattr(item, "image") else np.asarray(item)


def encode_text_batch(backend: BackendBase, texts: list) -> list[Embedding]:
    """Encode unified textual queries (or raw strings), order preserved."""
    if not texts:
        raise ValidationError("encode_text_batch: empty batch")
    try:
        matrix = backend.encode_texts([_query_text(t) for t in texts]).detach().numpy()
    except (ValidationError, NumericDomainError):
        raise
    except Exception as exc:
        raise BackendError(f"backend {backend.name!r} failed to encode texts: {exc}") from exc
    if matrix.shape != (len(texts), backend.dim):
        raise ShapeError(
            f"backend {backend.name!r} emitted shape {matrix.shape}, expected {(len(texts), backend.dim)}"
        )
    ids = [getattr(t, "triplet_id", "") for t in texts]
    return [Embedding(vector=matrix[i], id=ids[i]) for i in range(len(texts))]


def encode_image_batch(backend: BackendBase, images: list) -> list[Embedding]:
    """Encode unified visual queries (or raw rasters), order preserved."""
    if not images:
        raise ValidationError("encode_image_batch: empty batch")
    try:
        matrix = backend.encode_images([_query_image(im) for im in images]).detach().numpy()
    except (ValidationError, NumericDomainError):
        raise
    except Exception as exc:
        raise BackendError(f"backend {backend.name!r} failed to encode images: {exc}") from exc
    if matrix.shape != (len(images), backend.dim):
        raise ShapeError(
            f"backend {backend.name!r} emitted shape {matrix.shape}, expected {(len(images), backend.dim)}"
        )
    ids = [getattr(im, "triplet_id", "") for im in images]
    return [Embedding(vector=matrix[i], id=ids[i]) for i in range(len(images))]
