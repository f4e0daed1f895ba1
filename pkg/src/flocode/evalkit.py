"""Recall@K / mean-recall@K for video scene graphs.

Recall is computed per frame (hits / ground-truth triplets) and averaged
over frames that have ground truth.  Per-class recall restricts both the
hits and the ground truth to one predicate and averages over the frames
where that predicate occurs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .relrep import iou

TASKS = ("PREDCLS", "SGCLS", "SGDET")
REGIMES = ("with", "no")
DEFAULT_KS = (10, 20, 50)
# Action Genome bucket cutoffs (instances) over its total predicate instances.
AG_TOTAL = 1_715_568
HEAD_FRACTION = 100_000 / AG_TOTAL
TAIL_FRACTION = 8_000 / AG_TOTAL


@dataclass(frozen=True)
class Node:
    id: int
    cls: int
    box: Tuple[float, float, float, float]


@dataclass
class PairPrediction:
    subj: Node
    obj: Node
    scores: Mapping[int, float]  # predicate -> confidence


@dataclass
class PredictedFrame:
    pairs: List[PairPrediction] = field(default_factory=list)


@dataclass
class GtFrame:
    nodes: Dict[int, Node]
    triplets: List[Tuple[int, int, int]]  # (subj id, obj id, predicate)


@dataclass(frozen=True)
class RankedTriplet:
    subj: Node
    obj: Node
    predicate: int
    confidence: float


def check_regime(regime: str) -> str:
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    return regime


def ranked_triplets(frame: PredictedFrame, regime: str) -> List[RankedTriplet]:
    """Candidate list ordered by (confidence desc, subject id, object id, predicate)."""
    check_regime(regime)
    out = []
    for pair in frame.pairs:
        items = sorted(pair.scores.items(), key=lambda kv: (-kv[1], kv[0]))
        if regime == "with":
            items = items[:1]
        out.extend(RankedTriplet(pair.subj, pair.obj, p, float(c)) for p, c in items)
    out.sort(key=lambda r: (-r.confidence, r.subj.id, r.obj.id, r.predicate))
    return out


def match_triplet(pred: RankedTriplet, gt: Tuple[Node, Node, int], task: str, iou_threshold: float = 0.5) -> bool:
    subj, obj, predicate = gt
    if pred.predicate != predicate:
        return False
    if task == "PREDCLS":
        return pred.subj.id == subj.id and pred.obj.id == obj.id
    if task == "SGCLS":
        return (
            pred.subj.id == subj.id
            and pred.obj.id == obj.id
            and pred.subj.cls == subj.cls
            and pred.obj.cls == obj.cls
        )
    if task == "SGDET":
        return (
            pred.subj.cls == subj.cls
            and pred.obj.cls == obj.cls
            and iou(pred.subj.box, subj.box) >= iou_threshold
            and iou(pred.obj.box, obj.box) >= iou_threshold
        )
    raise ValueError(f"unknown task {task!r}")


def frame_hits(pred: PredictedFrame, gt: GtFrame, k: int, regime: str, task: str) -> List[bool]:
    """One flag per ground-truth triplet: recovered within the top ``k``."""
    top = ranked_triplets(pred, regime)[:k]
    flags = []
    for s, o, p in gt.triplets:
        g = (gt.nodes[s], gt.nodes[o], p)
        flags.append(any(match_triplet(r, g, task) for r in top))
    return flags


def recall_at_k(preds: Sequence[PredictedFrame], gts: Sequence[GtFrame], k: int, regime: str = "with", task: str = "PREDCLS") -> float:
    if k < 1:
        raise ValueError("k must be positive")
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth frame counts differ")
    total, frames = 0.0, 0
    for pred, gt in zip(preds, gts):
        if not gt.triplets:
            continue
        hits = frame_hits(pred, gt, k, regime, task)
        total += sum(hits) / len(hits)
        frames += 1
    return total / frames if frames else 0.0


def per_class_recall(
    preds: Sequence[PredictedFrame], gts: Sequence[GtFrame], k: int, num_classes: int, regime: str = "with", task: str = "PREDCLS"
) -> np.ndarray:
    """Recall@k per predicate class; NaN for classes absent from the ground truth."""
    numer = np.zeros(num_classes)
    denom = np.zeros(num_classes)
    for pred, gt in zip(preds, gts):
        if not gt.triplets:
            continue
        hits = frame_hits(pred, gt, k, regime, task)
        hit_c = np.zeros(num_classes)
        cnt_c = np.zeros(num_classes)
        for (s, o, p), h in zip(gt.triplets, hits):
            cnt_c[p] += 1
            hit_c[p] += h
        seen = cnt_c > 0
        numer[seen] += hit_c[seen] / cnt_c[seen]
        denom[seen] += 1
    out = np.full(num_classes, np.nan)
    seen = denom > 0
    out[seen] = numer[seen] / denom[seen]
    return out


def mean_recall_at_k(preds, gts, k: int, num_classes: int, regime: str = "with", task: str = "PREDCLS"):
    per = per_class_recall(preds, gts, k, num_classes, regime, task)
    present = ~np.isnan(per)
    mr = float(per[present].mean()) if present.any() else 0.0
    return mr, per


def split_head_body_tail(counts: Sequence[float], head_fraction: float = HEAD_FRACTION, tail_fraction: float = TAIL_FRACTION) -> Dict[str, List[int]]:
    """Bucket classes by their share of training instances."""
    if tail_fraction >= head_fraction:
        raise ValueError("tail cutoff must be below the head cutoff")
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    share = counts / total if total > 0 else np.zeros_like(counts)
    buckets = {"HEAD": [], "BODY": [], "TAIL": []}
    for c, s in enumerate(share):
        if s >= head_fraction:
            buckets["HEAD"].append(c)
        elif s <= tail_fraction:
            buckets["TAIL"].append(c)
        else:
            buckets["BODY"].append(c)
    return buckets


def bucket_mean(per_class: np.ndarray, classes: Sequence[int]) -> float:
    vals = [per_class[c] for c in classes if not math.isnan(per_class[c])]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class EvalReport:
    task: str
    regime: str
    recall: Dict[int, float]
    mean_recall: Dict[int, float]
    per_class: Dict[int, List[float]]
    buckets: Dict[str, float]  # bucket -> mR@10
    bucket_classes: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "regime": self.regime,
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_recall": {str(k): v for k, v in self.mean_recall.items()},
            "per_class": {str(k): [None if math.isnan(x) else x for x in v] for k, v in self.per_class.items()},
            "buckets": {k: (None if math.isnan(v) else v) for k, v in self.buckets.items()},
            "bucket_classes": self.bucket_classes,
        }


def evaluate(
    preds: Sequence[PredictedFrame],
    gts: Sequence[GtFrame],
    num_classes: int,
    task: str,
    regime: str,
    train_counts: Optional[Sequence[float]] = None,
    ks: Sequence[int] = DEFAULT_KS,
    head_fraction: float = HEAD_FRACTION,
    tail_fraction: float = TAIL_FRACTION,
) -> EvalReport:
    recall, mrecall, per = {}, {}, {}
    for k in ks:
        recall[k] = recall_at_k(preds, gts, k, regime, task)
        mrecall[k], vec = mean_recall_at_k(preds, gts, k, num_classes, regime, task)
        per[k] = vec.tolist()
    buckets, classes = {}, {}
    if train_counts is not None:
        classes = split_head_body_tail(train_counts, head_fraction, tail_fraction)
        at10 = np.asarray(per[10]) if 10 in per else mean_recall_at_k(preds, gts, 10, num_classes, regime, task)[1]
        buckets = {b: bucket_mean(at10, cs) for b, cs in classes.items()}
    return EvalReport(task, regime, recall, mrecall, per, buckets, classes)


def write_reports(reports: Sequence[EvalReport], json_path, csv_path, per_class_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        ks = sorted(reports[0].recall) if reports else list(DEFAULT_KS)
        w.writerow(["task", "regime"] + [f"R@{k}" for k in ks] + [f"mR@{k}" for k in ks] + ["HEAD_mR@10", "BODY_mR@10", "TAIL_mR@10"])
        for r in reports:
            w.writerow(
                [r.task, r.regime]
                + [repr(r.recall[k]) for k in ks]
                + [repr(r.mean_recall[k]) for k in ks]
                + [repr(r.buckets.get(b, math.nan)) for b in ("HEAD", "BODY", "TAIL")]
            )
    if per_class_path is not None:
        # one row per predicate class, one column per (task, regime, k)
        with open(per_class_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = [(r, k) for r in reports for k in sorted(r.per_class)]
            w.writerow(["predicate"] + [f"{r.task}_{r.regime}_R@{k}" for r, k in cols])
            n = len(cols[0][0].per_class[cols[0][1]]) if cols else 0
            for c in range(n):
                w.writerow([c] + ["" if math.isnan(r.per_class[k][c]) else repr(r.per_class[k][c]) for r, k in cols])


# --------------------------------------------------------------------------
# conversions from dataset / prediction files
# --------------------------------------------------------------------------


def gt_frames(videos) -> List[GtFrame]:
    """Flatten ground-truth videos into per-frame triplets, one per predicate label."""
    out = []
    for v in videos:
        for fr in v.frames:
            nodes = {o.id: Node(o.id, o.cls, tuple(o.box)) for o in fr.objects}
            trips = [(t.subj, t.obj, p) for t in fr.triplets for p in t.predicates]
            out.append(GtFrame(nodes, trips))
    return out


def predictions_from_json(d: Mapping, line: int = 1) -> List[PredictedFrame]:
    """Parse one prediction line (dataset schema plus optional ``confidences``)."""
    if d.get("version") != 1:
        raise ValueError(f"line {line}: unsupported prediction schema version {d.get('version')!r}")
    frames = []
    for fd in d["frames"]:
        nodes = {int(o["id"]): Node(int(o["id"]), int(o["class"]), tuple(float(x) for x in o["box"])) for o in fd["objects"]}
        pairs = []
        for t in fd["triplets"]:
            preds = [int(p) for p in t["predicates"]]
            conf = t.get("confidences", [1.0] * len(preds))
            if len(conf) != len(preds):
                raise ValueError(f"line {line}: confidences and predicates differ in length")
            pairs.append(PairPrediction(nodes[int(t["subj"])], nodes[int(t["obj"])], dict(zip(preds, (float(c) for c in conf)))))
        frames.append(PredictedFrame(pairs))
    return frames


def load_predictions(path) -> List[PredictedFrame]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                out.extend(predictions_from_json(json.loads(line), n))
    return out


def predictions_to_json(frames: Sequence[PredictedFrame]) -> dict:
    out = []
    for fr in frames:
        nodes = {}
        for pair in fr.pairs:
            nodes[pair.subj.id] = pair.subj
            nodes[pair.obj.id] = pair.obj
        out.append(
            {
                "objects": [{"id": n.id, "class": n.cls, "box": list(n.box)} for n in sorted(nodes.values(), key=lambda n: n.id)],
                "triplets": [
                    {
                        "subj": pr.subj.id,
                        "obj": pr.obj.id,
                        "predicates": [p for p, _ in sorted(pr.scores.items())],
                        "confidences": [c for _, c in sorted(pr.scores.items())],
                    }
                    for pr in fr.pairs
                ],
            }
        )
    return {"version": 1, "frames": out}
