"""Bilinear feature warping and temporal object sequences.

Coordinates are continuous with pixel ``(x, y)`` centred on integer
coordinates, so a ``W``-wide map spans ``[0, W - 1]`` horizontally.  Boxes
are ``(x1, y1, x2, y2)`` in the same frame.

Flow convention: ``flow[:, y, x] = (dx, dy)`` is the displacement from
pixel ``(x, y)`` of the *target* (earlier) frame to the matching location in
the frame being warped.  Warping ``f_t`` with the flow between ``t'`` and
``t`` therefore produces ``f_t`` resampled onto frame ``t'``'s geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np


@dataclass
class ObjectSequence:
    """Temporal feature sequence of one detected class (or one track)."""

    class_id: int
    frames: List[int] = field(default_factory=list)
    features: List[np.ndarray] = field(default_factory=list)
    warped: List[bool] = field(default_factory=list)
    # (frame, index within that frame's detection list) per entry
    sources: List[Tuple[int, int]] = field(default_factory=list)
    track_id: Optional[int] = None

    def __len__(self) -> int:
        return len(self.frames)

    def append(self, frame: int, feature: np.ndarray, warped: bool, source) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise ValueError("frame indices must be strictly increasing")
        if self.features and feature.shape != self.features[0].shape:
            raise ValueError("feature dimensionality changed within a sequence")
        self.frames.append(frame)
        self.features.append(feature)
        self.warped.append(warped)
        self.sources.append(source)

    def stacked(self) -> np.ndarray:
        return np.stack(self.features)


def _check_map(f: np.ndarray) -> None:
    if f.ndim != 3 or min(f.shape) < 1:
        raise ValueError(f"feature map must be C x H x W with positive sizes, got {f.shape}")


def bilinear_sample(f: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``f`` (C x H x W) at arbitrary points; returns C x points.shape.

    Neighbours that fall outside the map read as zero.
    """
    C, H, W = f.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = xs - x0
    wy = ys - y0
    out = np.zeros((C,) + xs.shape, dtype=np.float64)
    for dy, ky in ((0, 1.0 - wy), (1, wy)):
        for dx, kx in ((0, 1.0 - wx), (1, wx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            w = np.where(inside, kx * ky, 0.0)
            vals = f[:, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
            out += vals * w
    return out


def bilinear_warp(f: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """out(c, y, x) = f(c, y + dy(y, x), x + dx(y, x)), zero outside the map."""
    f = np.asarray(f, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    _check_map(f)
    if flow.shape != (2,) + f.shape[1:]:
        raise ValueError(f"flow shape {flow.shape} does not match feature map {f.shape}")
    H, W = f.shape[1:]
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    if not flow.any():
        return f.copy()
    return bilinear_sample(f, xs + flow[0], ys + flow[1])


def compose_flows(later: np.ndarray, earlier: np.ndarray) -> np.ndarray:
    """Chain two flows.

    ``earlier`` maps frame a -> b and ``later`` maps frame b -> c (both in the
    target-to-source convention above); the result maps a -> c.
    """
    H, W = earlier.shape[1:]
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    step = bilinear_sample(later, xs + earlier[0], ys + earlier[1])
    return earlier + step


def roi_pool(f: np.ndarray, box: Sequence[float], grid: int = 3, mode: str = "mean") -> np.ndarray:
    """Grid-sampled region feature.

    Samples a ``grid x grid`` lattice of bin centres inside ``box``; ``mode``
    ``"flatten"`` returns all C*grid*grid samples, ``"mean"`` averages them
    down to C values.
    """
    f = np.asarray(f, dtype=np.float64)
    _check_map(f)
    x1, y1, x2, y2 = (float(v) for v in box)
    H, W = f.shape[1:]
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate box {box}")
    tol = 1e-9
    if x1 < -tol or y1 < -tol or x2 > W - 1 + tol or y2 > H - 1 + tol:
        raise ValueError(f"box {box} outside frame bounds [0, {W - 1}] x [0, {H - 1}]")
    centres = (np.arange(grid, dtype=np.float64) + 0.5) / grid
    gx = x1 + centres * (x2 - x1)
    gy = y1 + centres * (y2 - y1)
    ys, xs = np.meshgrid(gy, gx, indexing="ij")
    samples = bilinear_sample(f, xs, ys)  # C x grid x grid
    if mode == "flatten":
        return samples.reshape(-1)
    if mode == "mean":
        return samples.reshape(samples.shape[0], -1).mean(axis=1)
    raise ValueError(f"unknown pooling mode {mode!r}")


@dataclass
class Detection:
    """A detected object in one frame."""

    cls: int
    box: Tuple[float, float, float, float]
    feature: np.ndarray
    track: Optional[int] = None


FlowLookup = Callable[[int, int], np.ndarray]


def build_object_sequences(
    detections: Sequence[Sequence[Detection]],
    frames: Sequence[np.ndarray],
    flows: FlowLookup | Mapping[Tuple[int, int], np.ndarray],
    grouping: str = "class",
    grid: int = 3,
    mode: str = "mean",
) -> List[ObjectSequence]:
    """Group detections into temporal sequences and warp later entries.

    ``grouping="class"`` keys sequences on the detection class,
    ``"instance"`` on ``Detection.track``.  ``flows(t_prev, t)`` (or a
    mapping keyed the same way) must return the flow used to warp frame
    ``t`` onto frame ``t_prev``.  The first entry of every sequence keeps
    its raw feature; every later entry is pooled from the warped map at the
    box of its immediate predecessor in the sequence.
    """
    if grouping not in ("class", "instance"):
        raise ValueError(f"unknown grouping {grouping!r}")
    lookup = flows if callable(flows) else (lambda a, b: flows[(a, b)])
    seqs: Dict[int, ObjectSequence] = {}
    prev_box: Dict[int, Tuple[float, float, float, float]] = {}
    warped_cache: Dict[Tuple[int, int], np.ndarray] = {}
    for t, dets in enumerate(detections):
        for k, det in enumerate(dets):
            key = det.cls if grouping == "class" else det.track
            if key is None:
                raise ValueError("instance grouping needs a track id on every detection")
            seq = seqs.get(key)
            if seq is None:
                seq = ObjectSequence(class_id=det.cls, track_id=det.track if grouping == "instance" else None)
                seqs[key] = seq
                seq.append(t, np.asarray(det.feature, dtype=np.float64), False, (t, k))
            elif seq.frames[-1] == t:
                raise ValueError(
                    f"two detections share sequence key {key} in frame {t}; use instance grouping"
                )
            else:
                t_prev = seq.frames[-1]
                cache_key = (t_prev, t)
                if cache_key not in warped_cache:
                    warped_cache[cache_key] = bilinear_warp(frames[t], lookup(t_prev, t))
                feat = roi_pool(warped_cache[cache_key], prev_box[key], grid=grid, mode=mode)
                seq.append(t, feat, True, (t, k))
            prev_box[key] = tuple(det.box)
    return [seqs[k] for k in sorted(seqs)]
