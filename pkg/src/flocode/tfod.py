"""Temporal flow-aware object classification.

A causally masked transformer encoder runs over each object sequence and
its outputs are scored against a fixed equiangular tight frame (ETF) of
class prototypes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

from . import numerics as nx
from .numerics import DTYPE


@dataclass
class TEncConfig:
    layers: int = 1
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    dropout: float = 0.0
    max_sequence_length: int = 64

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    idx = torch.arange(dim, dtype=DTYPE)[None, :]
    angle = pos / torch.pow(10000.0, (2 * torch.div(idx, 2, rounding_mode="floor")) / dim)
    table = torch.where(idx.long() % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table


def causal_mask(length: int) -> torch.Tensor:
    """Boolean keep-mask, position t sees positions <= t."""
    return torch.tril(torch.ones(length, length, dtype=torch.bool))


def masked_attention(q, k, v, keep: Optional[torch.Tensor] = None, return_weights: bool = False):
    """softmax(mask(Q K^T) / sqrt(d_k)) V over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise nx.ShapeError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = nx.matmul(q, nx.transpose(k)) / math.sqrt(k.shape[-1])
    if keep is not None:
        scores = nx.masked_fill(scores, keep)
    weights = nx.softmax_rows(scores)
    out = weights @ v
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim, dtype=DTYPE)
        # a key bias only shifts every score in a row by the same amount, which
        # softmax cancels; leaving it out avoids a parameter with zero gradient
        self.k = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.v = nn.Linear(dim, dim, dtype=DTYPE)
        self.out = nn.Linear(dim, dim, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, L, _ = x.shape
        return x.reshape(*lead, L, self.heads, self.dim // self.heads).transpose(-3, -2)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        *lead, H, L, dh = x.shape
        return x.transpose(-3, -2).reshape(*lead, L, H * dh)

    def weights(self, query: torch.Tensor, memory: torch.Tensor, keep=None) -> torch.Tensor:
        q = self.split(self.q(query))
        k = self.split(self.k(memory))
        scores = nx.matmul(q, nx.transpose(k)) / math.sqrt(k.shape[-1])
        if keep is not None:
            scores = nx.masked_fill(scores, keep)
        return nx.softmax_rows(scores)

    def apply_weights(self, weights: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        v = self.split(self.v(memory))
        return self.out(self.merge(self.drop(weights) @ v))

    def forward(self, query, memory, keep=None):
        return self.apply_weights(self.weights(query, memory, keep), memory)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden, dtype=DTYPE),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim, dtype=DTYPE),
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    """Post-norm transformer layer: attention, residual, norm, FFN, residual, norm."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, keep=None):
        x = self.norm1(x + self.drop(self.attn(x, x, keep)))
        return self.norm2(x + self.drop(self.ffn(x)))


class TemporalEncoder(nn.Module):
    """Causally masked encoder over zero-padded object sequences."""

    def __init__(self, cfg: TEncConfig, in_dim: int):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(in_dim, cfg.model_dim, dtype=DTYPE)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.layers)
        )
        self.register_buffer("positions", sinusoidal_table(cfg.max_sequence_length, cfg.model_dim))

    def forward(self, seqs: torch.Tensor, lengths: Optional[Sequence[int]] = None) -> torch.Tensor:
        """``seqs`` is B x L x in_dim (zero padded); returns B x L x d."""
        B, L, _ = seqs.shape
        if L > self.cfg.max_sequence_length:
            raise ValueError(f"sequence length {L} exceeds positional table {self.cfg.max_sequence_length}")
        x = self.proj(seqs) + self.positions[:L]
        keep = causal_mask(L)
        if lengths is not None:
            valid = torch.arange(L)[None, :] < torch.as_tensor(list(lengths))[:, None]
            # B x 1 x 1 x L key mask; padded keys sit after every valid query so
            # only padded queries are affected.
            keep = keep[None, :, :] & valid[:, None, :]
            keep = keep | torch.eye(L, dtype=torch.bool)[None]
            keep = keep[:, None]
        for layer in self.layers:
            x = layer(x, keep)
        return x


def tenc_forward(encoder: TemporalEncoder, features: torch.Tensor) -> torch.Tensor:
    """Encode a single sequence (L x in_dim) and return L x d."""
    return encoder(features[None])[0]


# --------------------------------------------------------------------------
# ETF classifier
# --------------------------------------------------------------------------


@dataclass
class EtfClassifier:
    num_classes: int
    dim: int
    rotation: torch.Tensor  # d x C, orthonormal columns
    weights: torch.Tensor  # d x C

    def gram(self) -> torch.Tensor:
        return self.weights.T @ self.weights


def etf_from_rotation(rotation: torch.Tensor) -> EtfClassifier:
    d, C = rotation.shape
    if C < 2:
        raise ValueError("need at least two classes")
    centre = torch.eye(C, dtype=DTYPE) - torch.ones(C, C, dtype=DTYPE) / C
    w = math.sqrt(C / (C - 1)) * rotation.to(DTYPE) @ centre
    return EtfClassifier(C, d, rotation.to(DTYPE), w)


def make_etf(num_classes: int, dim: int, seed: int = 0) -> EtfClassifier:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if dim < num_classes:
        raise ValueError(f"dim {dim} must be >= num_classes {num_classes}")
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(dim, num_classes, generator=gen, dtype=DTYPE)
    q, r = torch.linalg.qr(a)
    # fix the sign ambiguity so the factor is unique
    q = q * torch.sign(torch.diagonal(r))[None, :]
    return etf_from_rotation(q)


def object_loss(x: torch.Tensor, labels, etf: EtfClassifier) -> torch.Tensor:
    """Mean of 1/2 (w_c^T x_hat - 1)^2 over rows of ``x`` (or a single vector)."""
    x2 = x[None] if x.dim() == 1 else x
    labels = torch.as_tensor(labels).reshape(-1)
    xhat = nx.l2_normalize(x2)
    cos = (xhat * etf.weights[:, labels].T).sum(-1)
    return (0.5 * (cos - 1.0) ** 2).mean()


def object_scores(x: torch.Tensor, etf: EtfClassifier) -> torch.Tensor:
    return nx.l2_normalize(x) @ etf.weights


def classify_object(x: torch.Tensor, etf: EtfClassifier):
    """Argmax of w_c^T x_hat; torch.argmax returns the first maximal index."""
    scores = object_scores(x, etf)
    return torch.argmax(scores, dim=-1)
