"""Learnable linear adaptive fusion and the batch classification loss.

The fusion weight is produced per sample by a one-hidden-layer perceptron
over the concatenated textual and visual features:

    lambda = sigmoid(W2 @ relu(W1 @ [f_textual ; f_visual] + b1) + b2)
    f_q    = lambda * f_textual + (1 - lambda) * f_visual

The output layer is zero-initialized so an untrained head starts exactly at
the fixed lambda = 0.5 averaging baseline. The loss is softmax cross-entropy
over within-batch cosine similarities scaled by 1/tau, diagonal pairs as
positives. All math runs through torch so gradients w.r.t. the fusion
parameters and raw embeddings come from autograd; tests cross-check them
against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoders import Embedding
from .errors import NumericDomainError, ShapeError, ValidationError


@dataclass
class LossConfig:
    tau: float = 0.1
    batch_size: int = 16

    def __post_init__(self) -> None:
        if not (self.tau > 0):
            raise ValidationError(f"tau must be > 0, got {self.tau}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


class FusionParams:
    """Weights of the lambda-producing perceptron."""

    def __init__(self, W1: torch.Tensor, b1: torch.Tensor, W2: torch.Tensor, b2: torch.Tensor):
        if W1.ndim != 2 or W1.shape[1] % 2 != 0:
            raise ShapeError(f"W1 must be (hidden, 2D), got {tuple(W1.shape)}")
        hidden = W1.shape[0]
        if b1.shape != (hidden,):
            raise ShapeError(f"b1 must be ({hidden},), got {tuple(b1.shape)}")
        if W2.shape != (1, hidden):
            raise ShapeError(f"W2 must be (1, {hidden}), got {tuple(W2.shape)}")
        if b2.shape != (1,):
            raise ShapeError(f"b2 must be (1,), got {tuple(b2.shape)}")
        for name, t in (("W1", W1), ("b1", b1), ("W2", W2), ("b2", b2)):
            if not torch.all(torch.isfinite(t)):
                raise NumericDomainError(f"FusionParams.{name} contains non-finite entries")
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    @property
    def dim(self) -> int:
        return self.W1.shape[1] // 2

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.W1.dtype

    def parameters(self) -> list[torch.Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def requires_grad_(self, flag: bool = True) -> "FusionParams":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "FusionParams":
        return FusionParams(*(t.detach().clone() for t in self.parameters()))

    def to_dtype(self, dtype: torch.dtype) -> "FusionParams":
        return FusionParams(*(t.detach().clone().to(dtype) for t in self.parameters()))

    @classmethod
    def initialize(
        cls, dim: int, hidden: int | None = None, seed: int = 0, dtype: torch.dtype = torch.float32
    ) -> "FusionParams":
        """Seeded init: W1 Gaussian at 1/sqrt(2D) scale, output layer zeroed
        so the first forward pass yields lambda = 0.5 everywhere."""
        if dim < 1:
            raise ValidationError(f"dim must be >= 1, got {dim}")
        hidden = dim if hidden is None else hidden
        if hidden < 1:
            raise ValidationError(f"hidden must be >= 1, got {hidden}")
        gen = torch.Generator().manual_seed(seed)
        W1 = (torch.randn(hidden, 2 * dim, generator=gen) / math.sqrt(2 * dim)).to(dtype)
        return cls(
            W1,
            torch.zeros(hidden, dtype=dtype),
            torch.zeros(1, hidden, dtype=dtype),
            torch.zeros(1, dtype=dtype),
        )


@dataclass
class FusedQuery:
    """A fused query vector plus the lambda that produced it."""

    vector: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector)
        if not np.all(np.isfinite(self.vector)):
            raise NumericDomainError("fused query contains non-finite entries")


def _to_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, Embedding):
        x = x.vector
    if torch.is_tensor(x):
        t = x
    elif isinstance(x, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(x))
    else:
        t = torch.as_tensor(x, dtype=torch.float64)
    if dtype is not None and t.dtype != dtype:
        t = t.to(dtype)
    return t


def compute_lambda(params: FusionParams, f_textual, f_visual) -> torch.Tensor:
    """Per-sample trade-off weight; concatenation order is textual then visual.

    Accepts single vectors (D,) or batches (B, D); returns a 0-d or (B,)
    tensor. Values are strictly inside (0,1) for finite inputs up to floating
    point saturation of the sigmoid.
    """
    ft = _to_tensor(f_textual, params.dtype)
    fv = _to_tensor(f_visual, params.dtype)
    if ft.shape != fv.shape:
        raise ShapeError(f"textual {tuple(ft.shape)} and visual {tuple(fv.shape)} shapes differ")
    if ft.shape[-1] * 2 != params.W1.shape[1]:
        raise ShapeError(
            f"embeddings of dim {ft.shape[-1]} do not match FusionParams expecting D={params.dim}"
        )
    x = torch.cat([ft, fv], dim=-1)
    h = torch.relu(x @ params.W1.T + params.b1)
    z = h @ params.W2.T + params.b2
    return torch.sigmoid(z).squeeze(-1)


def fuse(f_textual, f_visual, lam) -> FusedQuery:
    """Exact convex combination lam * f_textual + (1 - lam) * f_visual."""
    ft = _to_tensor(f_textual)
    fv = _to_tensor(f_visual, ft.dtype)
    if ft.shape != fv.shape:
        raise ShapeError(f"textual {tuple(ft.shape)} and visual {tuple(fv.shape)} shapes differ")
    lam_value = float(lam.detach() if torch.is_tensor(lam) else lam)
    if not (0.0 <= lam_value <= 1.0):
        raise ValidationError(f"lambda must lie in [0,1], got {lam_value}")
    vec = lam_value * ft + (1.0 - lam_value) * fv
    return FusedQuery(vector=vec.detach().numpy(), lam=lam_value)


def fused_queries(params: FusionParams, F_textual, F_visual) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched lambda + fuse keeping the autograd graph; returns (F_q, lam)."""
    ft = _to_tensor(F_textual, params.dtype)
    fv = _to_tensor(F_visual, params.dtype)
    lam = compute_lambda(params, ft, fv)
    lam_col = lam.reshape(-1, 1) if ft.ndim == 2 else lam
    return lam_col * ft + (1.0 - lam_col) * fv, lam


def _stack(batch, name: str) -> torch.Tensor:
    if torch.is_tensor(batch):
        t = batch
    elif isinstance(batch, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(batch))
    else:
        rows = [_to_tensor(item) for item in batch]
        if not rows:
            raise ValidationError(f"{name}: empty batch")
        t = torch.stack(rows)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise ShapeError(f"{name}: expected (B, D), got {tuple(t.shape)}")
    return t


def cosine_similarity_matrix(A, B) -> torch.Tensor:
    """All-pairs cosine similarity; rejects zero-norm rows by name."""
    a = _stack(A, "A")
    b = _stack(B, "B")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dim mismatch: {a.shape[1]} vs {b.shape[1]}")
    a_norm = torch.linalg.vector_norm(a, dim=1)
    b_norm = torch.linalg.vector_norm(b, dim=1)
    for name, norms in (("A", a_norm), ("B", b_norm)):
        zero = (norms.detach() == 0).nonzero()
        if zero.numel():
            raise NumericDomainError(f"zero-norm vector at row {int(zero[0])} of {name}")
    return (a / a_norm.unsqueeze(1)) @ (b / b_norm.unsqueeze(1)).T


def batch_classification_loss(F_q, F_t, config: LossConfig) -> torch.Tensor:
    """Mean over i of -log softmax_i(cos(f_qi, f_tj) / tau), diagonal positives.

    Returns a scalar tensor; gradients flow to any input that requires them.
    Well-defined for every batch size B >= 1 (B = 1 gives exactly zero).
    """
    fq = _stack(F_q, "F_q")
    ft = _stack(F_t, "F_t")
    if fq.shape[0] != ft.shape[0]:
        raise ShapeError(f"batch sizes differ: {fq.shape[0]} vs {ft.shape[0]}")
    logits = cosine_similarity_matrix(fq, ft) / config.tau
    diag = torch.diagonal(logits)
    return (torch.logsumexp(logits, dim=1) - diag).mean()


def composed_loss(
    params: FusionParams, F_textual, F_visual, F_target, config: LossConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Full head forward: fuse then loss. Returns (loss, lambda batch)."""
    fq, lam = fused_queries(params, F_textual, F_visual)
    return batch_classification_loss(fq, _stack(F_target, "F_target").to(fq.dtype), config), lam
