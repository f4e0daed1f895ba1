"""Synthetic long-tailed video scene graphs with exact ground-truth flow.

Every video holds one person and a few objects on a small feature-map
canvas.  For every person-object pair a latent predicate chooses the
object's class and its placement slot around the person; per-frame labels
are then resampled from the posterior given (class, slot), so the label
marginal matches the configured power law while staying predictable from
appearance and geometry.

Generative rules:

* predicate ``p`` belongs to geometry family ``p % 4`` (contact, beside,
  above, below); with probability ``geometry_fidelity`` the object sits in
  one of its family's slots, otherwise in any slot;
* predicate ``p`` prefers object class ``p + 1`` (probability
  ``class_fidelity``), otherwise the class is uniform over non-person
  classes;
* with probability ``multi_label_prob`` a frame's label set gains a second
  predicate drawn in proportion to the predicate frequencies;
* label sets persist from frame to frame with probability ``persistence``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .flowwarp import bilinear_warp, roi_pool
from .relrep import iou

SCHEMA_VERSION = 1
PERSON = 0
Box = Tuple[float, float, float, float]

# slot -> (family, centre offset builder)
SLOTS = ("contact_left", "contact_right", "left", "right", "top", "bottom")
FAMILY_SLOTS = {0: (0, 1), 1: (2, 3), 2: (4,), 3: (5,)}
NUM_FAMILIES = 4


@dataclass
class LabelSpace:
    num_object_classes: int = 36
    num_predicates: int = 26
    exponent: float = 1.5

    def __post_init__(self):
        if self.num_object_classes < 2:
            raise ValueError("need the person class plus at least one object class")
        if self.num_predicates < 1:
            raise ValueError("need at least one predicate class")
        if self.exponent < 0:
            raise ValueError("power-law exponent must be non-negative")

    def frequencies(self) -> np.ndarray:
        f = np.arange(1, self.num_predicates + 1, dtype=np.float64) ** -self.exponent
        return f / f.sum()


@dataclass
class GeneratorConfig:
    labels: LabelSpace = field(default_factory=LabelSpace)
    videos: int = 250
    frames: int = 8
    objects: int = 3
    height: int = 16
    width: int = 16
    channels: int = 8
    grid: int = 2
    background_noise: float = 0.3
    pixel_noise: float = 0.05
    instance_noise: float = 0.35
    frame_noise: float = 0.8
    max_speed: float = 0.2
    multi_label_prob: float = 0.3
    persistence: float = 0.6
    geometry_fidelity: float = 0.8
    class_fidelity: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.labels, dict):
            self.labels = LabelSpace(**self.labels)
        if self.videos < 1:
            raise ValueError("need at least one video")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.objects < 1:
            raise ValueError("need at least one object per frame")
        if self.objects > len(SLOTS):
            raise ValueError(f"at most {len(SLOTS)} objects fit around the person")
        if self.height < 12 or self.width < 12:
            raise ValueError("canvas must be at least 12 x 12 to fit the slot layout")
        for name in ("multi_label_prob", "persistence", "geometry_fidelity", "class_fidelity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def feature_dim(self) -> int:
        return self.channels * self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ObjectAnn:
    id: int
    cls: int
    box: Box
    feature: np.ndarray


@dataclass
class TripletAnn:
    subj: int
    obj: int
    predicates: List[int]


@dataclass
class Frame:
    feature_map: np.ndarray  # C x H x W
    flow: np.ndarray  # 2 x H x W, onto the previous frame's grid
    objects: List[ObjectAnn]
    triplets: List[TripletAnn]

    def object_by_id(self, oid: int) -> ObjectAnn:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)


@dataclass
class VideoSample:
    frames: List[Frame]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.frames[0].feature_map.shape


# --------------------------------------------------------------------------
# generative model
# --------------------------------------------------------------------------


class World:
    """Quantities shared by every video generated from one config."""

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        ls = cfg.labels
        rng = np.random.default_rng([cfg.seed, 0xC0DE])
        self.prototypes = rng.normal(size=(ls.num_object_classes, cfg.channels, cfg.grid, cfg.grid))
        self.freq = ls.frequencies()
        C = ls.num_predicates
        q = cfg.multi_label_prob
        co = np.tile(self.freq, (C, 1))
        np.fill_diagonal(co, 0.0)
        sums = co.sum(axis=1, keepdims=True)
        self.cooccur = np.where(sums > 0, co / np.where(sums > 0, sums, 1.0), 0.0)
        if C == 1:
            q = 0.0
        primary = (1 + q) * np.linalg.solve(np.eye(C) + q * self.cooccur.T, self.freq)
        primary = np.clip(primary, 1e-12, None)
        self.primary = primary / primary.sum()
        self.multi_label_prob = q
        n_obj = ls.num_object_classes - 1
        self.class_given_pred = np.full((C, ls.num_object_classes), (1 - cfg.class_fidelity) / n_obj)
        self.class_given_pred[:, PERSON] = 0.0
        for p in range(C):
            self.class_given_pred[p, 1 + p % n_obj] += cfg.class_fidelity
        self.slot_given_pred = np.full((C, len(SLOTS)), (1 - cfg.geometry_fidelity) / len(SLOTS))
        for p in range(C):
            fam = FAMILY_SLOTS[p % NUM_FAMILIES]
            self.slot_given_pred[p, list(fam)] += cfg.geometry_fidelity / len(fam)

    def posterior(self, cls: int, slot: int) -> np.ndarray:
        w = self.primary * self.class_given_pred[:, cls] * self.slot_given_pred[:, slot]
        return w / w.sum()


def _slot_centre(slot: int, pc, psize, osize) -> Tuple[float, float]:
    px, py = pc
    pw, ph = psize
    ow, oh = osize
    name = SLOTS[slot]
    if name == "contact_left":
        return px - 0.25 * pw, py + 0.1 * ph
    if name == "contact_right":
        return px + 0.25 * pw, py + 0.1 * ph
    if name == "left":
        return px - pw / 2 - ow / 2 - 0.3, py
    if name == "right":
        return px + pw / 2 + ow / 2 + 0.3, py
    if name == "top":
        return px, py - ph / 2 - oh / 2 + 0.5
    return px, py + ph / 2 + oh / 2 - 0.5


def _box(centre, size, width, height) -> Box:
    cx = min(max(centre[0], size[0] / 2), width - 1 - size[0] / 2)
    cy = min(max(centre[1], size[1] / 2), height - 1 - size[1] / 2)
    return (cx - size[0] / 2, cy - size[1] / 2, cx + size[0] / 2, cy + size[1] / 2)


def _coverage(box: Box, H: int, W: int) -> np.ndarray:
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    return (xs >= box[0]) & (xs <= box[2]) & (ys >= box[1]) & (ys <= box[3])


def _render(canvas: np.ndarray, box: Box, pattern: np.ndarray) -> np.ndarray:
    """Paint ``pattern`` (C x G x G) stretched over ``box``; returns the coverage mask."""
    C, H, W = canvas.shape
    G = pattern.shape[1]
    mask = _coverage(box, H, W)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return mask
    u = (xs - box[0]) / (box[2] - box[0]) * G - 0.5
    v = (ys - box[1]) / (box[3] - box[1]) * G - 0.5
    u = np.clip(u, 0, G - 1)
    v = np.clip(v, 0, G - 1)
    u0 = np.minimum(np.floor(u).astype(int), G - 2) if G > 1 else np.zeros_like(xs)
    v0 = np.minimum(np.floor(v).astype(int), G - 2) if G > 1 else np.zeros_like(ys)
    if G == 1:
        canvas[:, ys, xs] = pattern[:, 0, 0][:, None]
        return mask
    au, av = u - u0, v - v0
    vals = (
        pattern[:, v0, u0] * (1 - au) * (1 - av)
        + pattern[:, v0, u0 + 1] * au * (1 - av)
        + pattern[:, v0 + 1, u0] * (1 - au) * av
        + pattern[:, v0 + 1, u0 + 1] * au * av
    )
    canvas[:, ys, xs] = vals
    return mask


def _generate_video(world: World, index: int) -> VideoSample:
    cfg = world.cfg
    ls = cfg.labels
    rng = np.random.default_rng([cfg.seed, index])
    H, W, T = cfg.height, cfg.width, cfg.frames
    psize = (rng.uniform(4.5, 5.5), rng.uniform(7.0, 7.8))
    pc = np.array([rng.uniform(W / 2 - 1.5, W / 2 + 0.5), rng.uniform(H / 2 - 1.0, H / 2)])

    pairs = []
    for _ in range(cfg.objects):
        p0 = int(rng.choice(ls.num_predicates, p=world.primary))
        cls = int(rng.choice(ls.num_object_classes, p=world.class_given_pred[p0]))
        slot = int(rng.choice(len(SLOTS), p=world.slot_given_pred[p0]))
        size = (rng.uniform(3.5, 5.0), rng.uniform(3.5, 5.0))
        offset = rng.uniform(-0.5, 0.5, size=2)
        drift = rng.uniform(-0.03, 0.03, size=2)
        pairs.append(dict(p0=p0, cls=cls, slot=slot, size=size, offset=offset, drift=drift))

    # trajectories
    velocity = np.zeros(2)
    person_centres, object_centres = [], []
    low = np.array([W / 2 - 2.0, H / 2 - 1.5])
    high = np.array([W / 2 + 1.0, H / 2 + 0.5])
    for t in range(T):
        if t > 0:
            velocity = 0.7 * velocity + rng.normal(scale=0.08, size=2)
            speed = np.linalg.norm(velocity)
            if speed > cfg.max_speed:
                velocity *= cfg.max_speed / speed
            nxt = pc + velocity
            bounce = (nxt < low) | (nxt > high)
            velocity[bounce] *= -1
            pc = pc + velocity
        person_centres.append(pc.copy())
        row = []
        for k, pr in enumerate(pairs):
            base = np.array(_slot_centre(pr["slot"], pc, psize, pr["size"]))
            row.append(base + pr["offset"] + pr["drift"] * t)
        object_centres.append(row)

    person_box = [_box(c, psize, W, H) for c in person_centres]
    object_boxes = [[_box(c, pr["size"], W, H) for c, pr in zip(row, pairs)] for row in object_centres]
    # clamped boxes may still move faster than max_speed when the clamp kicks in
    # only on one frame; limit per-frame displacement by construction
    for t in range(1, T):
        for k in range(len(pairs)):
            prev, cur = object_boxes[t - 1][k], object_boxes[t][k]
            d = np.array([cur[0] - prev[0], cur[1] - prev[1]])
            n = np.linalg.norm(d)
            if n > cfg.max_speed:
                d *= cfg.max_speed / n
                size = pairs[k]["size"]
                object_boxes[t][k] = (prev[0] + d[0], prev[1] + d[1], prev[0] + d[0] + size[0], prev[1] + d[1] + size[1])

    # appearance
    background = rng.normal(scale=cfg.background_noise, size=(cfg.channels, H, W))
    person_inst = world.prototypes[PERSON] + rng.normal(scale=cfg.instance_noise, size=world.prototypes[PERSON].shape)
    obj_inst = [world.prototypes[pr["cls"]] + rng.normal(scale=cfg.instance_noise, size=world.prototypes[0].shape) for pr in pairs]

    # labels
    label_sets: List[List[List[int]]] = []
    for t in range(T):
        row = []
        for k, pr in enumerate(pairs):
            if t > 0 and rng.random() < cfg.persistence:
                row.append(list(label_sets[t - 1][k]))
                continue
            if t == 0:
                p = pr["p0"]
            else:
                p = int(rng.choice(ls.num_predicates, p=world.posterior(pr["cls"], pr["slot"])))
            labels = [p]
            if rng.random() < world.multi_label_prob:
                p2 = int(rng.choice(ls.num_predicates, p=world.cooccur[p]))
                labels.append(p2)
            row.append(sorted(labels))
        label_sets.append(row)

    frames: List[Frame] = []
    ids = list(range(len(pairs) + 1))  # 0 = person
    for t in range(T):
        canvas = background + rng.normal(scale=cfg.pixel_noise, size=background.shape)
        owner = np.full((H, W), -1)
        boxes = [person_box[t]] + object_boxes[t]
        patterns = [person_inst + rng.normal(scale=cfg.frame_noise, size=person_inst.shape)]
        patterns += [inst + rng.normal(scale=cfg.frame_noise, size=inst.shape) for inst in obj_inst]
        for k, (box, pat) in enumerate(zip(boxes, patterns)):
            mask = _render(canvas, box, pat)
            owner[mask] = k
        flow = np.zeros((2, H, W))
        if t > 0:
            prev_boxes = [person_box[t - 1]] + object_boxes[t - 1]
            prev_owner = np.full((H, W), -1)
            for k, box in enumerate(prev_boxes):
                prev_owner[_coverage(box, H, W)] = k
            for k in range(len(boxes)):
                sel = prev_owner == k
                flow[0][sel] = boxes[k][0] - prev_boxes[k][0]
                flow[1][sel] = boxes[k][1] - prev_boxes[k][1]
        objects = []
        for k, box in enumerate(boxes):
            cls = PERSON if k == 0 else pairs[k - 1]["cls"]
            feat = roi_pool(canvas, box, grid=cfg.grid, mode="flatten")
            objects.append(ObjectAnn(ids[k], cls, tuple(float(v) for v in box), feat))
        triplets = [TripletAnn(0, ids[k + 1], label_sets[t][k]) for k in range(len(pairs))]
        frames.append(Frame(canvas, flow, objects, triplets))
    return VideoSample(frames)


def generate(cfg: GeneratorConfig) -> List[VideoSample]:
    """Seeded dataset; video ``i`` only depends on (seed, i)."""
    world = World(cfg)
    return [_generate_video(world, i) for i in range(cfg.videos)]


def split(videos: Sequence[VideoSample], n_train: int) -> Tuple[List[VideoSample], List[VideoSample]]:
    return list(videos[:n_train]), list(videos[n_train:])


def predicate_histogram(videos: Iterable[VideoSample], num_predicates: int) -> np.ndarray:
    counts = np.zeros(num_predicates, dtype=np.int64)
    for v in videos:
        for fr in v.frames:
            for tr in fr.triplets:
                for p in tr.predicates:
                    counts[p] += 1
    return counts


def flow_consistency_error(video: VideoSample) -> float:
    """Worst boundary distance (pixels) of a flow-warping mismatch.

    Frame t's object masks are warped onto frame t-1.  Every visible pixel
    of the object's frame t-1 region should be recovered; for each one that
    is not, its distance to the nearest edge of the t-1 box is measured.
    Returns 0 when every region is recovered exactly; a value <= 1 means
    all mismatches sit on the region border.
    """
    worst = 0.0
    prev = None
    for fr in video.frames:
        if prev is not None:
            C, H, W = fr.feature_map.shape
            ys, xs = np.mgrid[0:H, 0:W]
            for obj in fr.objects:
                before = prev.object_by_id(obj.id)
                mask = _coverage(obj.box, H, W).astype(np.float64)[None]
                got = bilinear_warp(mask, fr.flow)[0] > 0.5
                visible = _coverage(before.box, H, W)
                for other in prev.objects:
                    if other.id > obj.id:  # painted later, owns the overlap
                        visible &= ~_coverage(other.box, H, W)
                miss = visible & ~got
                if not miss.any():
                    continue
                b = before.box
                depth = np.minimum.reduce([xs - b[0], b[2] - xs, ys - b[1], b[3] - ys])
                worst = max(worst, float(depth[miss].max()))
        prev = fr
    return worst


# --------------------------------------------------------------------------
# detection simulation
# --------------------------------------------------------------------------


@dataclass
class Proposal:
    cls: int
    box: Box
    score: float
    source: Optional[int]  # ground-truth id, None for false positives


def nms(proposals: Sequence[Proposal], threshold: float = 0.4) -> List[Proposal]:
    """Per-class greedy non-maximum suppression (suppress IoU > threshold)."""
    keep: List[Proposal] = []
    for p in sorted(proposals, key=lambda p: (-p.score, p.cls, p.box)):
        if all(q.cls != p.cls or iou(q.box, p.box) <= threshold for q in keep):
            keep.append(p)
    return keep


def simulate_detections(
    video: VideoSample,
    jitter: float = 0.3,
    miss_rate: float = 0.05,
    false_positive_rate: float = 0.1,
    num_classes: Optional[int] = None,
    nms_threshold: float = 0.4,
    seed: int = 0,
) -> List[List[Proposal]]:
    """Noisy per-frame proposals for the detection task."""
    if not 0.0 <= miss_rate <= 1.0:
        raise ValueError("miss_rate must lie in [0, 1]")
    if not 0.0 <= false_positive_rate < 1.0:
        raise ValueError("false_positive_rate must lie in [0, 1)")
    rng = np.random.default_rng([seed, 0xDE7])
    C, H, W = video.shape
    if num_classes is None:
        num_classes = 1 + max(o.cls for fr in video.frames for o in fr.objects)
    out = []
    for fr in video.frames:
        props = []
        for obj in fr.objects:
            if rng.random() < miss_rate:
                continue
            if jitter > 0:
                b = np.array(obj.box) + rng.normal(scale=jitter, size=4)
                b = _clip_box(b, W, H)
            else:
                b = obj.box
            props.append(Proposal(obj.cls, tuple(float(v) for v in b), float(rng.uniform(0.6, 1.0)), obj.id))
        n_fp = int(rng.binomial(len(fr.objects), false_positive_rate)) if false_positive_rate > 0 else 0
        for _ in range(n_fp):
            w, h = rng.uniform(3, 6, size=2)
            x1, y1 = rng.uniform(0, W - 1 - w), rng.uniform(0, H - 1 - h)
            props.append(Proposal(int(rng.integers(1, num_classes)), (x1, y1, x1 + w, y1 + h), float(rng.uniform(0.0, 0.6)), None))
        out.append(nms(props, nms_threshold))
    return out


def _clip_box(b, W, H) -> Box:
    x1, y1, x2, y2 = b
    x1, x2 = sorted((float(np.clip(x1, 0, W - 1)), float(np.clip(x2, 0, W - 1))))
    y1, y2 = sorted((float(np.clip(y1, 0, H - 1)), float(np.clip(y2, 0, H - 1))))
    if x2 - x1 < 1.0:
        x2 = min(W - 1.0, x1 + 1.0)
        x1 = x2 - 1.0
    if y2 - y1 < 1.0:
        y2 = min(H - 1.0, y1 + 1.0)
        y1 = y2 - 1.0
    return (x1, y1, x2, y2)


# --------------------------------------------------------------------------
# JSON-lines persistence
# --------------------------------------------------------------------------


class SchemaError(ValueError):
    pass


def video_to_json(video: VideoSample) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "frames": [
            {
                "feature_map": fr.feature_map.tolist(),
                "flow": fr.flow.tolist(),
                "objects": [
                    {"id": o.id, "class": o.cls, "box": list(o.box), "feature": o.feature.tolist()}
                    for o in fr.objects
                ],
                "triplets": [
                    {"subj": tr.subj, "obj": tr.obj, "predicates": list(tr.predicates)} for tr in fr.triplets
                ],
            }
            for fr in video.frames
        ],
    }


def _require(d: dict, key: str, where: str, line: int):
    if key not in d:
        raise SchemaError(f"line {line}: missing required field '{key}' in {where}")
    return d[key]


def video_from_json(d: dict, line: int = 1) -> VideoSample:
    version = _require(d, "version", "video", line)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"line {line}: schema version {version!r} is not supported (expected {SCHEMA_VERSION})")
    frames = []
    for fi, fd in enumerate(_require(d, "frames", "video", line)):
        where = f"frame {fi}"
        objects = [
            ObjectAnn(
                int(_require(o, "id", f"{where} object", line)),
                int(_require(o, "class", f"{where} object", line)),
                tuple(float(v) for v in _require(o, "box", f"{where} object", line)),
                np.asarray(_require(o, "feature", f"{where} object", line), dtype=np.float64),
            )
            for o in _require(fd, "objects", where, line)
        ]
        triplets = [
            TripletAnn(
                int(_require(t, "subj", f"{where} triplet", line)),
                int(_require(t, "obj", f"{where} triplet", line)),
                [int(p) for p in _require(t, "predicates", f"{where} triplet", line)],
            )
            for t in _require(fd, "triplets", where, line)
        ]
        frames.append(
            Frame(
                np.asarray(_require(fd, "feature_map", where, line), dtype=np.float64),
                np.asarray(_require(fd, "flow", where, line), dtype=np.float64),
                objects,
                triplets,
            )
        )
    return VideoSample(frames)


def save(videos: Iterable[VideoSample], path) -> None:
    with open(path, "w") as fh:
        for v in videos:
            fh.write(json.dumps(video_to_json(v)))
            fh.write("\n")


def load(path) -> List[VideoSample]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {n}: malformed JSON ({exc.msg})") from exc
            out.append(video_from_json(d, n))
    return out


def videos_equal(a: VideoSample, b: VideoSample) -> bool:
    if len(a.frames) != len(b.frames):
        return False
    for fa, fb in zip(a.frames, b.frames):
        if not (np.array_equal(fa.feature_map, fb.feature_map) and np.array_equal(fa.flow, fb.flow)):
            return False
        if len(fa.objects) != len(fb.objects) or len(fa.triplets) != len(fb.triplets):
            return False
        for oa, ob in zip(fa.objects, fb.objects):
            if (oa.id, oa.cls, tuple(oa.box)) != (ob.id, ob.cls, tuple(ob.box)) or not np.array_equal(oa.feature, ob.feature):
                return False
        for ta, tb in zip(fa.triplets, fb.triplets):
            if (ta.subj, ta.obj, list(ta.predicates)) != (tb.subj, tb.obj, list(tb.predicates)):
                return False
    return True
