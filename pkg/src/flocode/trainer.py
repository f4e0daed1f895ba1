"""End-to-end training and inference.

One optimizer step per video.  Per video the pipeline is: IoU tracking,
flow-warped object sequences, temporal encoding with an ETF object loss,
relation features for every (subject, object, frame) instance, debiased
encoder-decoder, mixture heads with MAL and KMCL, then the combined loss.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import evalkit as ek
from .flowwarp import Detection, build_object_sequences, compose_flows, roi_pool
from .mln import KmclConfig, MixtureHeads, aleatoric, epistemic, kmcl_loss, mal_loss, predict_scores
from .numerics import DTYPE, AdamW, NonFiniteError
from .relrep import (
    GEOMETRY_DIM,
    AttentionAccumulator,
    CorrelationStore,
    RelationBatch,
    RelationFeatures,
    RelationTransformer,
    RelRepConfig,
    assign_tracks,
    box_geometry,
    commit_epoch,
    union_box,
)
from .synthdata import PERSON, VideoSample, simulate_detections
from .tfod import TEncConfig, TemporalEncoder, make_etf, object_loss, object_scores

CHECKPOINT_VERSION = 1
TASK_MIXTURES = {"PREDCLS": 6, "SGCLS": 4, "SGDET": 6}
ABLATABLE = ("kmcl", "debias", "tfod", "regularizer", "ema", "mln")
METRIC_COLUMNS = (
    "epoch", "L_o", "L_MAL", "L_KMCL", "sigma_e", "sigma_a", "total",
    "R@10", "R@20", "R@50", "mR@10", "mR@20", "mR@50",
)
SQRT_FLOOR = 1e-12


def configure_threads() -> None:
    n = os.environ.get("FLOCODE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    # False keeps "- lambda1 * sigma_e"; True penalises epistemic spread instead.
    flip_epistemic: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class DetectorConfig:
    jitter: float = 0.3
    miss_rate: float = 0.05
    false_positive_rate: float = 0.1
    nms_threshold: float = 0.4


@dataclass
class TrainConfig:
    task: str = "PREDCLS"
    regime: str = "no"
    epochs: int = 12
    seed: int = 0
    lr: float = 1e-3
    embed_lr: float = 5e-4
    weight_decay: float = 1e-2
    patience: int = 3
    lr_factor: float = 0.5
    val_fraction: float = 0.1
    mixtures: Optional[int] = None
    alpha: float = 0.999
    ema_schedule: str = "step"
    temperature: float = 0.1
    overlap: str = "jaccard"
    track_threshold: float = 0.8
    grouping: str = "instance"
    grid: int = 2
    num_object_classes: int = 36
    num_predicates: int = 26
    ablate: Tuple[str, ...] = ()
    loss: LossConfig = field(default_factory=LossConfig)
    tenc: TEncConfig = field(default_factory=TEncConfig)
    relrep: RelRepConfig = field(default_factory=RelRepConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        for name, cls in (("loss", LossConfig), ("tenc", TEncConfig), ("relrep", RelRepConfig), ("detector", DetectorConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls(**getattr(self, name)))
        if self.task not in ek.TASKS:
            raise ValueError(f"task must be one of {ek.TASKS}, got {self.task!r}")
        ek.check_regime(self.regime)
        self.ablate = tuple(sorted(set(self.ablate)))
        unknown = set(self.ablate) - set(ABLATABLE)
        if unknown:
            raise ValueError(f"unknown ablation components {sorted(unknown)}; choose from {ABLATABLE}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.ema_schedule not in ("step", "epoch"):
            raise ValueError("ema_schedule must be 'step' or 'epoch'")
        if self.grouping not in ("class", "instance"):
            raise ValueError("grouping must be 'class' or 'instance'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.mixtures is not None and self.mixtures < 1:
            raise ValueError("mixtures must be positive")
        if "tfod" not in self.ablate and self.tenc.model_dim < self.num_object_classes:
            raise ValueError("tenc.model_dim must be at least the number of object classes for the ETF")
        KmclConfig(self.temperature, self.overlap)

    @property
    def K(self) -> int:
        return self.mixtures if self.mixtures is not None else TASK_MIXTURES[self.task]

    def uses(self, component: str) -> bool:
        return component not in self.ablate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def config_from_dict(d: Mapping) -> TrainConfig:
    d = dict(d)
    if "ablate" in d:
        d["ablate"] = tuple(d["ablate"])
    return TrainConfig(**d)


# --------------------------------------------------------------------------
# loss and EMA
# --------------------------------------------------------------------------


def total_loss(L_o, L_mal, L_kmcl, sigma_e, sigma_a, cfg: LossConfig = LossConfig()):
    """L_o + L_MAL + L_KMCL - lambda1 sigma_e + lambda2 sigma_a."""
    for name, v in (("L_o", L_o), ("L_MAL", L_mal), ("L_KMCL", L_kmcl), ("sigma_e", sigma_e), ("sigma_a", sigma_a)):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise NonFiniteError(f"non-finite loss component {name}")
    sign = 1.0 if cfg.flip_epistemic else -1.0
    return L_o + L_mal + L_kmcl + sign * cfg.lambda1 * sigma_e + cfg.lambda2 * sigma_a


def ema_update(teacher: Mapping[str, torch.Tensor], student: Mapping[str, torch.Tensor], alpha: float) -> Dict[str, torch.Tensor]:
    """alpha * teacher + (1 - alpha) * student, per named tensor."""
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(t.shape)} vs {tuple(s.shape)}")
        out[k] = alpha * t + (1.0 - alpha) * s
    return out


class EmaTeacher:
    """Moving-average copy of the relation modules."""

    def __init__(self, student: nn.Module, alpha: float):
        self.alpha = alpha
        self.module = copy.deepcopy(student)
        for p in self.module.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, student: nn.Module) -> None:
        mine = dict(self.module.named_parameters())
        new = ema_update({k: v.detach() for k, v in mine.items()}, {k: v.detach() for k, v in student.named_parameters()}, self.alpha)
        for k, v in new.items():
            mine[k].copy_(v)


# --------------------------------------------------------------------------
# per-video preparation
# --------------------------------------------------------------------------


@dataclass
class PreparedVideo:
    """Model-independent tensors of one video under one detection source."""

    frame_of: List[int]  # per detection row
    nodes: List[ek.Node]
    gt_cls: List[Optional[int]]
    raw: torch.Tensor  # M x F detector features
    seq_inputs: torch.Tensor  # B x L x F warped sequences
    seq_lengths: List[int]
    seq_index: torch.Tensor  # M, flat position (b * L + l) of each row in seq_inputs
    rows_by_frame: List[List[int]]
    feature_maps: List[np.ndarray]
    shape: Tuple[int, int, int]
    labels: Dict[Tuple[int, int, int], List[int]]  # (frame, subj id, obj id) -> predicates
    union_cache: Dict[Tuple[int, int, int], Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def pair_inputs(self, t: int, s_row: int, o_row: int, grid: int):
        key = (t, s_row, o_row)
        if key not in self.union_cache:
            bs, bo = self.nodes[s_row].box, self.nodes[o_row].box
            u = roi_pool(self.feature_maps[t], union_box(bs, bo), grid=grid, mode="flatten")
            C, H, W = self.shape
            self.union_cache[key] = (u, box_geometry(bs, bo, W, H))
        return self.union_cache[key]


def _flow_lookup(video: VideoSample):
    cache: Dict[Tuple[int, int], np.ndarray] = {}

    def lookup(t_prev: int, t: int) -> np.ndarray:
        if (t_prev, t) not in cache:
            flow = video.frames[t_prev + 1].flow
            for s in range(t_prev + 2, t + 1):
                flow = compose_flows(video.frames[s].flow, flow)
            cache[(t_prev, t)] = flow
        return cache[(t_prev, t)]

    return lookup


def prepare_video(video: VideoSample, cfg: TrainConfig, source: str = "gt", detector_seed: int = 0) -> PreparedVideo:
    """Track detections, build warped sequences and collect labels.

    ``source="gt"`` uses annotated boxes (ids are ground-truth ids);
    ``"detector"`` uses simulated proposals (ids start at 1000).
    """
    dets_per_frame: List[List[Tuple[ek.Node, Optional[int], np.ndarray]]] = []
    if source == "gt":
        for fr in video.frames:
            dets_per_frame.append([(ek.Node(o.id, o.cls, tuple(o.box)), o.cls, o.feature) for o in fr.objects])
        class_known = cfg.task == "PREDCLS"
    elif source == "detector":
        d = cfg.detector
        props = simulate_detections(video, d.jitter, d.miss_rate, d.false_positive_rate, cfg.num_object_classes, d.nms_threshold, detector_seed)
        for t, ps in enumerate(props):
            fmap = video.frames[t].feature_map
            row = []
            for k, p in enumerate(ps):
                feat = roi_pool(fmap, p.box, grid=cfg.grid, mode="flatten")
                row.append((ek.Node(1000 + k, p.cls, tuple(p.box)), None, feat))
            dets_per_frame.append(row)
        class_known = True  # proposals carry detector labels
    else:
        raise ValueError(f"unknown detection source {source!r}")

    track_in = [[(n.cls if class_known else None, n.box) for n, _, _ in row] for row in dets_per_frame]
    tracks = assign_tracks(track_in, cfg.track_threshold)
    detections = [
        [Detection(n.cls if class_known else 0, n.box, feat, tracks[t][k]) for k, (n, _, feat) in enumerate(row)]
        for t, row in enumerate(dets_per_frame)
    ]
    seqs = build_object_sequences(
        detections, [fr.feature_map for fr in video.frames], _flow_lookup(video),
        grouping=cfg.grouping, grid=cfg.grid, mode="flatten",
    )

    frame_of, nodes, gt_cls, raw, rows_by_frame = [], [], [], [], []
    row_of: Dict[Tuple[int, int], int] = {}
    for t, row in enumerate(dets_per_frame):
        rows_by_frame.append([])
        for k, (n, g, feat) in enumerate(row):
            row_of[(t, k)] = len(nodes)
            rows_by_frame[t].append(len(nodes))
            frame_of.append(t)
            nodes.append(n)
            gt_cls.append(g)
            raw.append(feat)
    F = len(raw[0]) if raw else cfg.grid * cfg.grid * video.shape[0]
    L = max((len(s) for s in seqs), default=1)
    seq_inputs = torch.zeros(len(seqs), L, F, dtype=DTYPE)
    seq_index = torch.zeros(len(nodes), dtype=torch.long)
    for b, s in enumerate(seqs):
        seq_inputs[b, : len(s)] = torch.as_tensor(s.stacked(), dtype=DTYPE)
        for l, src in enumerate(s.sources):
            seq_index[row_of[src]] = b * L + l

    labels = {}
    for t, fr in enumerate(video.frames):
        for tr in fr.triplets:
            labels[(t, tr.subj, tr.obj)] = sorted(tr.predicates)
    return PreparedVideo(
        frame_of, nodes, gt_cls,
        torch.as_tensor(np.stack(raw), dtype=DTYPE) if raw else torch.zeros(0, F, dtype=DTYPE),
        seq_inputs, [len(s) for s in seqs], seq_index, rows_by_frame,
        [fr.feature_map for fr in video.frames], video.shape, labels,
    )


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


class PlainObjectEncoder(nn.Module):
    """Per-frame object features without temporal context or warping."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, dim, dtype=DTYPE), nn.GELU(), nn.Linear(dim, dim, dtype=DTYPE))

    def forward(self, x):
        return self.net(x)


class RelationModules(nn.Module):
    """The part that is EMA-averaged into the teacher."""

    def __init__(self, cfg: TrainConfig, feat_dim: int):
        super().__init__()
        d_obj = cfg.tenc.model_dim
        self.features = RelationFeatures(d_obj, feat_dim, cfg.relrep.model_dim, cfg.relrep.max_frames)
        self.transformer = RelationTransformer(cfg.relrep, d_obj)

    def forward(self, batch: RelationBatch, prior=None, training: bool = False, eta: Optional[float] = None):
        rel = self.features(batch)
        memory = self.transformer.encode(rel)
        return self.transformer.decode(batch.object_rows, memory, batch.frames, prior=prior, training=training, eta=eta)


class FloCoDeModel(nn.Module):
    def __init__(self, cfg: TrainConfig, feat_dim: int):
        super().__init__()
        self.cfg = cfg
        self.feat_dim = feat_dim
        d_obj = cfg.tenc.model_dim
        if cfg.uses("tfod"):
            self.objects = TemporalEncoder(cfg.tenc, feat_dim)
            etf = make_etf(cfg.num_object_classes, d_obj, seed=cfg.seed)
            self.register_buffer("etf_weights", etf.weights)
            self.etf = etf
        else:
            self.objects = PlainObjectEncoder(feat_dim, d_obj)
            self.object_head = nn.Linear(d_obj, cfg.num_object_classes, dtype=DTYPE)
        self.relation = RelationModules(cfg, feat_dim)
        if cfg.uses("mln"):
            self.heads = MixtureHeads(cfg.relrep.model_dim, cfg.num_predicates, cfg.K)
        else:
            self.heads = nn.Linear(cfg.relrep.model_dim, cfg.num_predicates, dtype=DTYPE)

    def embed_parameters(self):
        return list(self.relation.parameters())

    def main_parameters(self):
        ids = {id(p) for p in self.embed_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def encode_objects(self, prep: PreparedVideo) -> torch.Tensor:
        if self.cfg.uses("tfod"):
            out = self.objects(prep.seq_inputs, prep.seq_lengths)
            return out.reshape(-1, out.shape[-1])[prep.seq_index]
        return self.objects(prep.raw)

    def object_class_scores(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.uses("tfod"):
            return object_scores(x, self.etf)
        return self.object_head(x)

    def object_loss(self, x: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
        if self.cfg.uses("tfod"):
            return object_loss(x, classes, self.etf)
        return nn.functional.cross_entropy(self.object_head(x), classes)


@dataclass
class RelationInstances:
    batch: RelationBatch
    labels: torch.Tensor  # L x C_r multi-hot (zeros at inference)
    predicates: List[List[int]]
    subj_cls: List[int]
    obj_cls: List[int]
    nodes: List[Tuple[ek.Node, ek.Node]]


def relation_instances(
    prep: PreparedVideo,
    x: torch.Tensor,
    subjects: Sequence[Optional[int]],
    classes: Sequence[int],
    grid: int,
    num_predicates: int,
    training: bool,
) -> RelationInstances:
    """Every (subject, object) pair per frame, ordered by (frame, object id).

    ``subjects[t]`` is the subject row of frame t (None skips the frame).
    In training only labelled pairs are kept.
    """
    s_rows, o_rows, unions, geoms, frames, preds, nodes = [], [], [], [], [], [], []
    for t, rows in enumerate(prep.rows_by_frame):
        s = subjects[t]
        if s is None:
            continue
        others = sorted((r for r in rows if r != s), key=lambda r: prep.nodes[r].id)
        for o in others:
            lab = prep.labels.get((t, prep.nodes[s].id, prep.nodes[o].id), [])
            if training and not lab:
                continue
            u, g = prep.pair_inputs(t, s, o, grid)
            s_rows.append(s)
            o_rows.append(o)
            unions.append(u)
            geoms.append(g)
            frames.append(t)
            preds.append(lab)
            nodes.append((ek.Node(prep.nodes[s].id, classes[s], prep.nodes[s].box), ek.Node(prep.nodes[o].id, classes[o], prep.nodes[o].box)))
    n = len(s_rows)
    labels = torch.zeros(n, num_predicates, dtype=DTYPE)
    for i, ps in enumerate(preds):
        labels[i, ps] = 1.0
    s_idx = torch.as_tensor(s_rows, dtype=torch.long)
    o_idx = torch.as_tensor(o_rows, dtype=torch.long)
    F = prep.raw.shape[1]
    batch = RelationBatch(
        x[s_idx] if n else x[:0],
        x[o_idx] if n else x[:0],
        torch.as_tensor(np.stack(unions), dtype=DTYPE) if n else torch.zeros(0, F, dtype=DTYPE),
        torch.as_tensor(np.stack(geoms), dtype=DTYPE) if n else torch.zeros(0, GEOMETRY_DIM, dtype=DTYPE),
        torch.as_tensor(frames, dtype=torch.long),
        list(zip(s_rows, o_rows)),
    )
    return RelationInstances(
        batch, labels, preds,
        [classes[s] for s in s_rows], [classes[o] for o in o_rows], nodes,
    )


def gt_subjects(prep: PreparedVideo) -> List[Optional[int]]:
    out = []
    for rows in prep.rows_by_frame:
        person = [r for r in rows if prep.gt_cls[r] == PERSON]
        out.append(person[0] if person else None)
    return out


@dataclass
class StepOutput:
    total: torch.Tensor
    parts: Dict[str, float]
    raw: torch.Tensor
    instances: RelationInstances


def video_loss(model: FloCoDeModel, prep: PreparedVideo, store: Optional[CorrelationStore], training: bool = True) -> StepOutput:
    """Combined loss of one video on ground-truth boxes."""
    cfg = model.cfg
    x = model.encode_objects(prep)
    classes = torch.as_tensor(prep.gt_cls, dtype=torch.long)
    L_o = model.object_loss(x, classes)
    inst = relation_instances(prep, x, gt_subjects(prep), prep.gt_cls, cfg.grid, cfg.num_predicates, training=True)
    if len(inst.batch) == 0:
        raise ValueError("video has no labelled relation instances")
    prior = None
    if training and cfg.uses("debias") and store is not None and store.ready:
        prior = torch.tensor(
            [store.prior(s, ps, o) for s, ps, o in zip(inst.subj_cls, inst.predicates, inst.obj_cls)], dtype=DTYPE
        )
    emb, raw = model.relation(inst.batch, prior=prior, training=training)
    zero = torch.zeros((), dtype=DTYPE)
    if cfg.uses("mln"):
        mp = model.heads(emb)
        L_mal = mal_loss(mp, inst.labels)
        L_kmcl = kmcl_loss(mp, inst.labels, KmclConfig(cfg.temperature, cfg.overlap)) if cfg.uses("kmcl") and len(inst.batch) >= 2 else zero
        s_e = torch.sqrt(epistemic(mp) + SQRT_FLOOR).mean()
        s_a = torch.sqrt(aleatoric(mp) + SQRT_FLOOR).mean()
    else:
        logits = model.heads(emb)
        L_mal = nn.functional.binary_cross_entropy_with_logits(logits, inst.labels, reduction="sum") / len(inst.batch)
        L_kmcl, s_e, s_a = zero, zero, zero
    loss_cfg = cfg.loss if cfg.uses("regularizer") else LossConfig(0.0, 0.0, cfg.loss.flip_epistemic)
    total = total_loss(L_o, L_mal, L_kmcl, s_e, s_a, loss_cfg)
    parts = {k: float(v.detach()) for k, v in (("L_o", L_o), ("L_MAL", L_mal), ("L_KMCL", L_kmcl), ("sigma_e", s_e), ("sigma_a", s_a), ("total", total))}
    return StepOutput(total, parts, raw.detach(), inst)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


@torch.no_grad()
def infer_prepared(model: FloCoDeModel, relation: nn.Module, prep: PreparedVideo, task: str, regime: str = "no") -> List[ek.PredictedFrame]:
    """Per-frame scene graphs; ``relation`` is the teacher (or student) relation module."""
    cfg = model.cfg
    ek.check_regime(regime)
    out = [ek.PredictedFrame() for _ in prep.rows_by_frame]
    if len(prep.nodes) == 0:
        return out
    x = model.encode_objects(prep)
    if task == "PREDCLS":
        classes = [int(c) for c in prep.gt_cls]
        subjects = gt_subjects(prep)
    else:
        scores = model.object_class_scores(x)
        classes = [int(c) for c in torch.argmax(scores, dim=-1)]
        subjects = []
        for rows in prep.rows_by_frame:
            subjects.append(max(rows, key=lambda r: (float(scores[r, PERSON]), -r)) if rows else None)
        for s in subjects:
            if s is not None:
                classes[s] = PERSON
    inst = relation_instances(prep, x, subjects, classes, cfg.grid, cfg.num_predicates, training=False)
    if len(inst.batch) == 0:
        return out
    emb, _ = relation(inst.batch, prior=None, training=False)
    if cfg.uses("mln"):
        conf = predict_scores(model.heads(emb))
    else:
        conf = model.heads(emb)
    for i, (sn, on) in enumerate(inst.nodes):
        row = conf[i].tolist()
        if regime == "with":
            p = int(np.argmax(row))
            scores_i = {p: row[p]}
        else:
            scores_i = dict(enumerate(row))
        out[int(inst.batch.frames[i])].pairs.append(ek.PairPrediction(sn, on, scores_i))
    return out


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    model: FloCoDeModel
    teacher: Optional[EmaTeacher]
    optimizer: AdamW
    store: CorrelationStore
    epoch: int = 0  # epochs completed
    best_val: float = -math.inf
    bad_epochs: int = 0
    metrics: List[Dict[str, float]] = field(default_factory=list)

    def inference_relation(self) -> nn.Module:
        if self.cfg.uses("ema") and self.teacher is not None:
            return self.teacher.module
        return self.model.relation


def new_state(cfg: TrainConfig, feat_dim: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = FloCoDeModel(cfg, feat_dim)
    teacher = EmaTeacher(model.relation, cfg.alpha) if cfg.uses("ema") else None
    opt = AdamW(
        [
            {"params": model.main_parameters(), "lr": cfg.lr},
            {"params": model.embed_parameters(), "lr": cfg.embed_lr},
        ],
        weight_decay=cfg.weight_decay,
    )
    return TrainState(cfg, model, teacher, opt, CorrelationStore(eta=cfg.relrep.eta))


class Trainer:
    """Owns the data split, prepared-video caches and the training state."""

    def __init__(self, cfg: TrainConfig, train_videos: Sequence[VideoSample], state: Optional[TrainState] = None):
        if not train_videos:
            raise ValueError("training set is empty")
        configure_threads()
        self.cfg = cfg
        n_val = int(round(cfg.val_fraction * len(train_videos)))
        if n_val >= len(train_videos):
            n_val = 0
        self.fit_videos = list(train_videos[: len(train_videos) - n_val])
        self.val_videos = list(train_videos[len(train_videos) - n_val:])
        self._fit = [prepare_video(v, cfg, "gt") for v in self.fit_videos]
        self._val = None
        feat_dim = self._fit[0].raw.shape[1]
        self.state = state if state is not None else new_state(cfg, feat_dim)

    def val_prepared(self) -> List[PreparedVideo]:
        if self._val is None:
            self._val = [prepare_eval(v, self.cfg, i) for i, v in enumerate(self.val_videos)]
        return self._val

    def step(self, prep: PreparedVideo, acc: Optional[AttentionAccumulator]) -> Dict[str, float]:
        st = self.state
        st.model.train()
        st.optimizer.zero_grad()
        out = video_loss(st.model, prep, st.store, training=True)
        out.total.backward()
        st.optimizer.step()
        if st.teacher is not None and self.cfg.ema_schedule == "step":
            st.teacher.update(st.model.relation)
        if acc is not None:
            for s, ps, o, a in zip(out.instances.subj_cls, out.instances.predicates, out.instances.obj_cls, out.raw.tolist()):
                acc.add(s, ps, o, a)
        return out.parts

    def run_epoch(self) -> Dict[str, float]:
        st, cfg = self.state, self.cfg
        order = np.random.default_rng([cfg.seed, st.epoch]).permutation(len(self._fit))
        acc = AttentionAccumulator() if cfg.uses("debias") else None
        sums: Dict[str, float] = {}
        for i in order:
            parts = self.step(self._fit[int(i)], acc)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        if acc is not None:
            st.store = commit_epoch(st.store, acc, epoch=st.store.epoch)
        if st.teacher is not None and cfg.ema_schedule == "epoch":
            st.teacher.update(st.model.relation)
        row = {"epoch": st.epoch}
        row.update({k: sums[k] / len(order) for k in ("L_o", "L_MAL", "L_KMCL", "sigma_e", "sigma_a", "total")})
        row.update(self.validate())
        self._patience(row["mR@10"])
        st.epoch += 1
        st.metrics.append(row)
        return row

    def validate(self) -> Dict[str, float]:
        cfg = self.cfg
        if not self.val_videos:
            return {f"{m}@{k}": math.nan for m in ("R", "mR") for k in ek.DEFAULT_KS}
        preds = []
        for prep in self.val_prepared():
            preds.extend(infer_prepared(self.state.model, self.state.inference_relation(), prep, cfg.task, cfg.regime))
        gts = ek.gt_frames(self.val_videos)
        rep = ek.evaluate(preds, gts, cfg.num_predicates, cfg.task, cfg.regime)
        out = {f"R@{k}": rep.recall[k] for k in ek.DEFAULT_KS}
        out.update({f"mR@{k}": rep.mean_recall[k] for k in ek.DEFAULT_KS})
        return out

    def _patience(self, score: float) -> None:
        st = self.state
        if math.isnan(score):
            return
        if score > st.best_val:
            st.best_val, st.bad_epochs = score, 0
            return
        st.bad_epochs += 1
        if st.bad_epochs >= self.cfg.patience:
            st.optimizer.groups[1]["lr"] *= self.cfg.lr_factor
            st.bad_epochs = 0

    def fit(self, epochs: Optional[int] = None, on_epoch=None) -> TrainState:
        target = self.cfg.epochs if epochs is None else epochs
        while self.state.epoch < target:
            row = self.run_epoch()
            if on_epoch is not None:
                on_epoch(row, self.state)
        return self.state


def prepare_eval(video: VideoSample, cfg: TrainConfig, index: int) -> PreparedVideo:
    if cfg.task == "SGDET":
        return prepare_video(video, cfg, "detector", detector_seed=cfg.seed * 1_000_003 + index)
    return prepare_video(video, cfg, "gt")


def train(videos: Sequence[VideoSample], cfg: TrainConfig, seed: Optional[int] = None, on_epoch=None) -> TrainState:
    if seed is not None:
        cfg = config_from_dict({**cfg.to_dict(), "seed": seed})
    return Trainer(cfg, videos).fit(on_epoch=on_epoch)


def infer(state: TrainState, video: VideoSample, task: Optional[str] = None, regime: str = "no", index: int = 0) -> List[ek.PredictedFrame]:
    """Scene graphs of one video from the teacher relation module."""
    task = state.cfg.task if task is None else task
    cfg = state.cfg if task == state.cfg.task else config_from_dict({**state.cfg.to_dict(), "task": task})
    state.model.eval()
    return infer_prepared(state.model, state.inference_relation(), prepare_eval(video, cfg, index), task, regime)


def evaluate_state(state: TrainState, videos: Sequence[VideoSample], train_counts, task: Optional[str] = None, regime: str = "no") -> ek.EvalReport:
    task = state.cfg.task if task is None else task
    preds = []
    for i, v in enumerate(videos):
        preds.extend(infer(state, v, task, regime, index=i))
    return ek.evaluate(preds, ek.gt_frames(videos), state.cfg.num_predicates, task, regime, train_counts)


# --------------------------------------------------------------------------
# checkpoints and metrics
# --------------------------------------------------------------------------


def checkpoint_dict(state: TrainState) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.digest(),
        "epoch": state.epoch,
        "student": state.model.state_dict(),
        "teacher": state.teacher.module.state_dict() if state.teacher is not None else None,
        "optimizer": state.optimizer.state_dict(),
        "store": state.store.to_dict(),
        "best_val": state.best_val,
        "bad_epochs": state.bad_epochs,
        "metrics": list(state.metrics),
        "rng": torch.get_rng_state(),
        "feat_dim": state.model.feat_dim,
    }


def save_checkpoint(state: TrainState, path) -> None:
    torch.save(checkpoint_dict(state), path)


def load_checkpoint(path) -> TrainState:
    d = torch.load(path, weights_only=False)
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    cfg = config_from_dict(d["config"])
    state = new_state(cfg, int(d["feat_dim"]))
    state.model.load_state_dict(d["student"])
    if state.teacher is not None:
        state.teacher.module.load_state_dict(d["teacher"])
    state.optimizer.load_state_dict(d["optimizer"])
    state.store = CorrelationStore.from_dict(d["store"])
    state.epoch = int(d["epoch"])
    state.best_val = float(d["best_val"])
    state.bad_epochs = int(d["bad_epochs"])
    state.metrics = list(d["metrics"])
    torch.set_rng_state(d["rng"])
    return state


def metrics_csv(rows: Sequence[Mapping[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()
