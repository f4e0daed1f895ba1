"""Correlation-aware predicate embedding with epoch-level attention debiasing.

The relation encoder runs (unmasked) over every relation feature of one
subject across the video.  The decoder takes the paired object
representations as queries, masks its self-attention by frame order and
cross-attends to relation features inside a temporal window.  During
training the own-relation cross-attention cell of each query is blended
with the class-level value stored at the end of the previous epoch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .numerics import DTYPE
from .tfod import EncoderLayer, FeedForward, MultiHeadAttention, sinusoidal_table

Box = Sequence[float]
Triplet = Tuple[int, int, int]

STORE_FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# boxes and pair matching
# --------------------------------------------------------------------------


def box_area(b: Box) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (box_area(a) + box_area(b) - inter)


def union_box(a: Box, b: Box) -> Tuple[float, float, float, float]:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def match_pairs(
    prev: Sequence[Tuple[Optional[int], Box]],
    nxt: Sequence[Tuple[Optional[int], Box]],
    threshold: float = 0.8,
) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching of (class, box) detections across frames.

    Candidates need the same class (``None`` on either side matches any
    class) and IoU strictly above ``threshold``; pairs are accepted in order
    of descending IoU.  Ties resolve by (next index, prev index).
    """
    cands = []
    for j, (cj, bj) in enumerate(nxt):
        for i, (ci, bi) in enumerate(prev):
            if ci is not None and cj is not None and ci != cj:
                continue
            o = iou(bi, bj)
            if o > threshold:
                cands.append((-o, j, i))
    cands.sort()
    used_prev, used_next, out = set(), set(), []
    for _, j, i in cands:
        if i in used_prev or j in used_next:
            continue
        used_prev.add(i)
        used_next.add(j)
        out.append((i, j))
    return sorted(out)


def assign_tracks(
    frames: Sequence[Sequence[Tuple[Optional[int], Box]]], threshold: float = 0.8
) -> List[List[int]]:
    """Track ids per detection by chaining ``match_pairs`` over consecutive frames."""
    tracks: List[List[int]] = []
    next_id = 0
    for t, dets in enumerate(frames):
        ids = [-1] * len(dets)
        if t > 0:
            for i, j in match_pairs(frames[t - 1], dets, threshold):
                ids[j] = tracks[t - 1][i]
        for j in range(len(dets)):
            if ids[j] < 0:
                ids[j] = next_id
                next_id += 1
        tracks.append(ids)
    return tracks


def box_geometry(bs: Box, bo: Box, width: float, height: float) -> np.ndarray:
    """Scale-free descriptor of a subject/object box pair (14 values)."""
    def parts(b):
        w = max(b[2] - b[0], 1e-6)
        h = max(b[3] - b[1], 1e-6)
        return (b[0] + b[2]) / 2, (b[1] + b[3]) / 2, w, h

    sx, sy, sw, sh = parts(bs)
    ox, oy, ow, oh = parts(bo)
    inter_w = max(0.0, min(bs[2], bo[2]) - max(bs[0], bo[0]))
    inter_h = max(0.0, min(bs[3], bo[3]) - max(bs[1], bo[1]))
    inter = inter_w * inter_h
    return np.array(
        [
            bs[0] / width, bs[1] / height, bs[2] / width, bs[3] / height,
            bo[0] / width, bo[1] / height, bo[2] / width, bo[3] / height,
            (ox - sx) / sw, (oy - sy) / sh,
            math.log(ow / sw), math.log(oh / sh),
            iou(bs, bo), inter / (ow * oh),
        ],
        dtype=np.float64,
    )


GEOMETRY_DIM = 14


# --------------------------------------------------------------------------
# relation features
# --------------------------------------------------------------------------


def split_dims(d: int) -> Tuple[int, int, int]:
    base = d // 3
    return (d - 2 * base, base, base)


@dataclass
class RelationBatch:
    """Relation instances of one subject, ordered by (frame, object)."""

    subject_rows: torch.Tensor  # L x d_obj, encoded subject features
    object_rows: torch.Tensor  # L x d_obj, encoded object features
    union: torch.Tensor  # L x union_dim
    geometry: torch.Tensor  # L x GEOMETRY_DIM
    frames: torch.Tensor  # L (long)
    pairs: List[Tuple[int, int]] = field(default_factory=list)  # (subject ref, object ref)

    def __len__(self) -> int:
        return int(self.frames.shape[0])


class RelationFeatures(nn.Module):
    """concat(subject part, f_u(union + f_box(boxes)), f_I(frame))."""

    def __init__(self, obj_dim: int, union_dim: int, rel_dim: int, max_frames: int = 64):
        super().__init__()
        d_sub, d_uni, d_idx = split_dims(rel_dim)
        self.subject = nn.Linear(obj_dim, d_sub, dtype=DTYPE)
        self.f_box = nn.Sequential(
            nn.Linear(GEOMETRY_DIM, union_dim, dtype=DTYPE), nn.GELU(),
            nn.Linear(union_dim, union_dim, dtype=DTYPE),
        )
        self.f_u = nn.Sequential(nn.Linear(union_dim, d_uni, dtype=DTYPE), nn.GELU())
        self.f_i = nn.Sequential(nn.Linear(d_idx, d_idx, dtype=DTYPE), nn.GELU())
        self.register_buffer("frame_table", sinusoidal_table(max_frames, d_idx))

    def forward(self, batch: RelationBatch) -> torch.Tensor:
        sub = self.subject(batch.subject_rows)
        uni = self.f_u(batch.union + self.f_box(batch.geometry))
        idx = self.f_i(self.frame_table[batch.frames])
        return nx.concat([sub, uni, idx], dim=-1)


# --------------------------------------------------------------------------
# correlation store
# --------------------------------------------------------------------------


class CorrelationStore:
    """Class-indexed attention memory, committed once per epoch."""

    def __init__(self, eta: float = 0.9, epoch: int = 0, cells: Optional[Mapping[Triplet, float]] = None):
        if not 0.0 <= eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {eta}")
        self.eta = float(eta)
        self.epoch = int(epoch)  # index of the next epoch to commit
        self._cells: Dict[Triplet, float] = dict(cells or {})
        for v in self._cells.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError("stored weights must lie in [0, 1]")

    @property
    def ready(self) -> bool:
        """True once M_0 exists, i.e. after the first commit."""
        return self.epoch > 0

    def __len__(self) -> int:
        return len(self._cells)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._cells

    def __getitem__(self, key) -> float:
        return self._cells[tuple(key)]

    def get(self, key, default=None):
        return self._cells.get(tuple(key), default)

    def items(self):
        return sorted(self._cells.items())

    def prior(self, subj_cls: int, predicates: Iterable[int], obj_cls: int) -> float:
        """Mean stored weight across an instance's labels; NaN if none stored."""
        vals = [self._cells[(subj_cls, p, obj_cls)] for p in predicates if (subj_cls, p, obj_cls) in self._cells]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {
            "version": STORE_FORMAT_VERSION,
            "epoch": self.epoch,
            "eta": self.eta,
            "cells": [[s, p, o, w] for (s, p, o), w in self.items()],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CorrelationStore":
        if data.get("version") != STORE_FORMAT_VERSION:
            raise ValueError(f"unsupported correlation store version {data.get('version')!r}")
        cells = {(int(s), int(p), int(o)): float(w) for s, p, o, w in data["cells"]}
        return cls(eta=data["eta"], epoch=data["epoch"], cells=cells)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CorrelationStore":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CorrelationStore)
            and self.eta == other.eta
            and self.epoch == other.epoch
            and self._cells == other._cells
        )


class AttentionAccumulator:
    """Collects raw own-relation attention values per triplet class during an epoch."""

    def __init__(self):
        self.sums: Dict[Triplet, float] = {}
        self.counts: Dict[Triplet, int] = {}

    def add(self, subj_cls: int, predicates: Iterable[int], obj_cls: int, value: float) -> None:
        for p in predicates:
            key = (int(subj_cls), int(p), int(obj_cls))
            self.sums[key] = self.sums.get(key, 0.0) + float(value)
            self.counts[key] = self.counts.get(key, 0) + 1

    def means(self) -> Dict[Triplet, float]:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums)}

    def to_dict(self) -> dict:
        return {"cells": [[*k, self.sums[k], self.counts[k]] for k in sorted(self.sums)]}

    @classmethod
    def from_dict(cls, data) -> "AttentionAccumulator":
        acc = cls()
        for s, p, o, total, n in data["cells"]:
            acc.sums[(s, p, o)] = total
            acc.counts[(s, p, o)] = n
        return acc


def commit_epoch(store: CorrelationStore, observed: AttentionAccumulator | Mapping[Triplet, float], epoch: Optional[int] = None) -> CorrelationStore:
    """Fold one epoch of raw attention into a new store.

    Each observed cell becomes the mean blended weight of the epoch,
    eta * mean(A_e) + (1 - eta) * M_{e-1}; a cell without history (always
    the case at epoch 0) stores mean(A_e).  Unobserved cells are kept.
    """
    if epoch is not None and epoch != store.epoch:
        raise ValueError(f"epoch {epoch} already committed (store is at epoch {store.epoch})")
    means = observed.means() if isinstance(observed, AttentionAccumulator) else dict(observed)
    cells = {k: store[k] for k, _ in store.items()}
    for key, a in means.items():
        prev = cells.get(key)
        cells[key] = a if prev is None else store.eta * a + (1.0 - store.eta) * prev
    return CorrelationStore(eta=store.eta, epoch=store.epoch + 1, cells=cells)


# --------------------------------------------------------------------------
# debiased encoder-decoder
# --------------------------------------------------------------------------


def blend_attention(weights: torch.Tensor, own: torch.Tensor, prior: torch.Tensor, eta: float) -> torch.Tensor:
    """Replace each query's own-relation cell by eta*A + (1-eta)*M, then renormalise rows.

    ``weights`` is (..., Lq, Lk); ``own[q]`` is the key index of query q's
    relation; ``prior[q]`` is NaN where the store has nothing.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    Lq = weights.shape[-2]
    rows = torch.arange(Lq)
    cell = weights[..., rows, own]
    has = ~torch.isnan(prior)
    target = torch.where(has, eta * cell + (1.0 - eta) * torch.nan_to_num(prior), cell)
    delta = torch.zeros_like(weights)
    delta[..., rows, own] = target - cell
    blended = weights + delta
    return blended / blended.sum(dim=-1, keepdim=True)


def debiased_cross_attention(
    attn: MultiHeadAttention,
    queries: torch.Tensor,
    memory: torch.Tensor,
    keep: Optional[torch.Tensor],
    own: torch.Tensor,
    prior: Optional[torch.Tensor],
    eta: float,
    training: bool,
):
    """Cross-attention whose own-relation cells are debiased while training.

    Returns (outputs, raw own-cell weights averaged over heads).
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    weights = attn.weights(queries, memory, keep)  # H x Lq x Lk
    raw = weights[..., torch.arange(weights.shape[-2]), own].mean(dim=0)
    if training and prior is not None:
        weights = blend_attention(weights, own, prior, eta)
    return attn.apply_weights(weights, memory), raw


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm3 = nn.LayerNorm(dim, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, self_keep, cross_keep, own, prior, eta, training):
        x = self.norm1(x + self.drop(self.self_attn(x, x, self_keep)))
        ctx, raw = debiased_cross_attention(
            self.cross_attn, x, memory, cross_keep, own, prior, eta, training
        )
        x = self.norm2(x + self.drop(ctx))
        return self.norm3(x + self.drop(self.ffn(x))), raw


@dataclass
class RelRepConfig:
    model_dim: int = 48
    heads: int = 4
    ffn_dim: int = 96
    encoder_layers: int = 1
    decoder_layers: int = 1
    dropout: float = 0.0
    window: int = 10
    eta: float = 0.9
    max_frames: int = 64

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")


def decoder_masks(frames: torch.Tensor, window: int):
    """Frame-causal self-attention mask and windowed cross-attention mask."""
    tq = frames[:, None]
    tk = frames[None, :]
    return tk <= tq, (tk - tq).abs() < window


class RelationTransformer(nn.Module):
    """Encoder-decoder producing one predicate embedding per relation instance."""

    def __init__(self, cfg: RelRepConfig, obj_dim: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.encoder = nn.ModuleList(
            EncoderLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.encoder_layers)
        )
        self.query = nn.Linear(obj_dim, d, dtype=DTYPE)
        self.decoder = nn.ModuleList(
            DecoderLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.decoder_layers)
        )
        self.register_buffer("frame_table", sinusoidal_table(cfg.max_frames, d))

    def encode(self, rel: torch.Tensor) -> torch.Tensor:
        for layer in self.encoder:
            rel = layer(rel)
        return rel

    def decode(
        self,
        objects: torch.Tensor,
        memory: torch.Tensor,
        frames: torch.Tensor,
        own: Optional[torch.Tensor] = None,
        prior: Optional[torch.Tensor] = None,
        training: bool = False,
        window: Optional[int] = None,
        eta: Optional[float] = None,
    ):
        """Returns (embeddings L x d, raw own-cell attention averaged over heads and layers)."""
        if memory.shape[0] == 0:
            raise ValueError("empty encoder output")
        window = self.cfg.window if window is None else window
        eta = self.cfg.eta if eta is None else eta
        if own is None:
            own = torch.arange(objects.shape[0])
        self_keep, cross_keep = decoder_masks(frames, window)
        x = self.query(objects) + self.frame_table[frames]
        raws = []
        for layer in self.decoder:
            x, raw = layer(x, memory, self_keep, cross_keep, own, prior, eta, training)
            raws.append(raw)
        raw = torch.stack(raws).mean(dim=0) if raws else torch.zeros(objects.shape[0], dtype=DTYPE)
        return x, raw

    def forward(self, rel, objects, frames, prior=None, training=False):
        memory = self.encode(rel)
        return self.decode(objects, memory, frames, prior=prior, training=training)


def decode_predicates(
    model: RelationTransformer,
    objects: torch.Tensor,
    memory: torch.Tensor,
    frames: torch.Tensor,
    window: Optional[int] = None,
) -> torch.Tensor:
    """Inference-mode decoding, one embedding per relation instance."""
    emb, _ = model.decode(objects, memory, frames, training=False, window=window)
    return emb
