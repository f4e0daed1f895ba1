import csv
import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flocode import evalkit as ek


def node(i, cls=None, box=None):
    return ek.Node(i, i if cls is None else cls, box or (float(i), 0.0, float(i) + 4.0, 4.0))


# --------------------------------------------------------------------------
# independent scorer: rank every candidate explicitly instead of sorting
# --------------------------------------------------------------------------


def brute_candidates(frame, regime):
    cands = []
    for pair in frame.pairs:
        items = list(pair.scores.items())
        if regime == "with":
            best = max(items, key=lambda kv: (kv[1], -kv[0]))
            items = [best]
        cands.extend((pair.subj, pair.obj, p, c) for p, c in items)
    return cands


def ahead(a, b):
    """True when candidate a ranks before b."""
    ka = (-a[3], a[0].id, a[1].id, a[2])
    kb = (-b[3], b[0].id, b[1].id, b[2])
    return ka < kb


def brute_hits(frame, gt, k, regime, task):
    cands = brute_candidates(frame, regime)
    top = [c for c in cands if sum(ahead(o, c) for o in cands) < k]
    hits = []
    for s, o, p in gt.triplets:
        gs, go = gt.nodes[s], gt.nodes[o]
        ok = False
        for cs, co, cp, _ in top:
            if cp != p:
                continue
            if task == "PREDCLS":
                ok |= cs.id == gs.id and co.id == go.id
            elif task == "SGCLS":
                ok |= (cs.id, co.id, cs.cls, co.cls) == (gs.id, go.id, gs.cls, go.cls)
            else:
                ok |= cs.cls == gs.cls and co.cls == go.cls and ek.iou(cs.box, gs.box) >= 0.5 and ek.iou(co.box, go.box) >= 0.5
        hits.append(ok)
    return hits


def brute_recall(preds, gts, k, regime, task):
    vals = [np.mean(brute_hits(p, g, k, regime, task)) for p, g in zip(preds, gts) if g.triplets]
    return float(np.mean(vals)) if vals else 0.0


def brute_mean_recall(preds, gts, k, C, regime, task):
    per = []
    for c in range(C):
        vals = []
        for p, g in zip(preds, gts):
            flags = [h for (s, o, q), h in zip(g.triplets, brute_hits(p, g, k, regime, task)) if q == c]
            if flags:
                vals.append(np.mean(flags))
        per.append(np.mean(vals) if vals else math.nan)
    present = [x for x in per if not math.isnan(x)]
    return (float(np.mean(present)) if present else 0.0), per


def random_graphs(seed, frames=4, C=5):
    rng = random.Random(seed)
    preds, gts = [], []
    for _ in range(frames):
        n = rng.randint(2, 4)
        nodes = {i: node(i, rng.randint(0, 2), (rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(4, 7), rng.uniform(4, 7))) for i in range(n)}
        trips = [(0, o, rng.randrange(C)) for o in range(1, n) for _ in range(rng.randint(0, 2))]
        gts.append(ek.GtFrame(nodes, trips))
        pairs = []
        for o in range(1, n):
            s_node, o_node = nodes[0], nodes[o]
            if rng.random() < 0.3:  # perturbed class or box
                o_node = ek.Node(o, rng.randint(0, 2), tuple(x + rng.uniform(-1.5, 1.5) for x in o_node.box))
            # round so confidence ties happen
            scores = {p: round(rng.random(), 1) for p in rng.sample(range(C), rng.randint(1, C))}
            pairs.append(ek.PairPrediction(s_node, o_node, scores))
        preds.append(ek.PredictedFrame(pairs))
    return preds, gts


@pytest.mark.parametrize("regime", ek.REGIMES)
@pytest.mark.parametrize("task", ek.TASKS)
def test_metrics_match_brute_force(regime, task):
    for seed in range(20):
        preds, gts = random_graphs(seed)
        for k in (1, 2, 3, 10):
            assert abs(ek.recall_at_k(preds, gts, k, regime, task) - brute_recall(preds, gts, k, regime, task)) <= 1e-12
            mr, per = ek.mean_recall_at_k(preds, gts, k, 5, regime, task)
            bmr, bper = brute_mean_recall(preds, gts, k, 5, regime, task)
            assert abs(mr - bmr) <= 1e-12
            assert np.allclose(per, bper, atol=1e-12, equal_nan=True)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(ek.TASKS))
def test_recall_properties(seed, task):
    preds, gts = random_graphs(seed)
    C = 5
    for k in (1, 2, 3, 5, 10):
        w = ek.recall_at_k(preds, gts, k, "with", task)
        assert 0.0 <= w <= 1.0
        # a pair's top predicate at rank r in the constrained list sits at
        # rank <= r*C in the unconstrained one
        assert ek.recall_at_k(preds, gts, (k - 1) * C + 1, "no", task) >= w - 1e-15
    assert ek.recall_at_k(preds, gts, 1, "no", task) == ek.recall_at_k(preds, gts, 1, "with", task)
    rs = [ek.recall_at_k(preds, gts, k, "no", task) for k in (1, 2, 5, 10, 20, 50)]
    assert all(a <= b + 1e-15 for a, b in zip(rs, rs[1:]))


def test_unconstrained_can_lose_at_fixed_k():
    # extra predicates of pair (0, 1) push pair (0, 2)'s correct top-1 out of the top 2
    nodes = {0: node(0), 1: node(1), 2: node(2)}
    gt = ek.GtFrame(nodes, [(0, 2, 3)])
    pred = ek.PredictedFrame([ek.PairPrediction(nodes[0], nodes[1], {0: 0.9, 1: 0.8}), ek.PairPrediction(nodes[0], nodes[2], {3: 0.7})])
    assert ek.recall_at_k([pred], [gt], 2, "with") == 1.0
    assert ek.recall_at_k([pred], [gt], 2, "no") == 0.0
    assert ek.recall_at_k([pred], [gt], 3, "no") == 1.0


def test_ranked_list_is_sorted_by_confidence():
    preds, _ = random_graphs(3)
    for fr in preds:
        conf = [r.confidence for r in ek.ranked_triplets(fr, "no")]
        assert conf == sorted(conf, reverse=True)


def test_tie_break_is_permutation_invariant():
    preds, gts = random_graphs(7)
    shuffled = [ek.PredictedFrame(list(reversed(f.pairs))) for f in preds]
    for k in (1, 2, 3):
        assert ek.recall_at_k(preds, gts, k, "no") == ek.recall_at_k(shuffled, gts, k, "no")


# --------------------------------------------------------------------------
# examples
# --------------------------------------------------------------------------


def simple_frame():
    nodes = {0: node(0), 1: node(1), 2: node(2)}
    gt = ek.GtFrame(nodes, [(0, 1, 3), (0, 2, 4)])
    return nodes, gt


def test_all_ground_truth_recovered():
    nodes, gt = simple_frame()
    pred = ek.PredictedFrame([ek.PairPrediction(nodes[0], nodes[1], {3: 0.9}), ek.PairPrediction(nodes[0], nodes[2], {4: 0.8})])
    assert ek.recall_at_k([pred], [gt], 10) == 1.0


def test_half_recovered():
    nodes, gt = simple_frame()
    pred = ek.PredictedFrame([ek.PairPrediction(nodes[0], nodes[1], {3: 0.9}), ek.PairPrediction(nodes[0], nodes[2], {1: 0.8})])
    assert ek.recall_at_k([pred], [gt], 10) == 0.5


def test_with_constraint_keeps_only_top_predicate():
    nodes, gt = simple_frame()
    pred = ek.PredictedFrame([ek.PairPrediction(nodes[0], nodes[1], {3: 0.5, 0: 0.9}), ek.PairPrediction(nodes[0], nodes[2], {4: 0.8})])
    assert ek.recall_at_k([pred], [gt], 10, "with") == 0.5
    assert ek.recall_at_k([pred], [gt], 10, "no") == 1.0


def test_frames_without_ground_truth_are_skipped():
    nodes, gt = simple_frame()
    pred = ek.PredictedFrame([ek.PairPrediction(nodes[0], nodes[1], {3: 0.9})])
    empty = ek.GtFrame(nodes, [])
    assert ek.recall_at_k([pred, pred], [gt, empty], 10) == 0.5


def test_match_triplet_rules():
    gt = (node(0, 0, (0, 0, 10, 10)), node(1, 4, (0, 0, 10, 10)), 2)
    exact = ek.RankedTriplet(gt[0], gt[1], 2, 1.0)
    assert all(ek.match_triplet(exact, gt, t) for t in ek.TASKS)
    low_iou = ek.RankedTriplet(gt[0], ek.Node(7, 4, (0, 0, 4, 10)), 2, 1.0)
    assert ek.iou(low_iou.obj.box, gt[1].box) == pytest.approx(0.4)
    assert not ek.match_triplet(low_iou, gt, "SGDET")
    wrong_cls = ek.RankedTriplet(gt[0], ek.Node(1, 5, gt[1].box), 2, 1.0)
    assert not ek.match_triplet(wrong_cls, gt, "SGCLS") and ek.match_triplet(wrong_cls, gt, "PREDCLS")
    with pytest.raises(ValueError):
        ek.match_triplet(exact, gt, "OTHER")


def test_mean_recall_single_class_equals_recall():
    nodes = {0: node(0), 1: node(1), 2: node(2)}
    gt = ek.GtFrame(nodes, [(0, 1, 1), (0, 2, 1)])
    pred = ek.PredictedFrame([ek.PairPrediction(nodes[0], nodes[1], {1: 0.9})])
    mr, _ = ek.mean_recall_at_k([pred], [gt], 10, 3)
    assert mr == ek.recall_at_k([pred], [gt], 10) == 0.5


def test_mean_recall_two_classes():
    nodes, gt = simple_frame()
    pred = ek.PredictedFrame([ek.PairPrediction(nodes[0], nodes[1], {3: 0.9})])
    mr, per = ek.mean_recall_at_k([pred], [gt], 10, 6)
    assert mr == 0.5 and per[3] == 1.0 and per[4] == 0.0 and math.isnan(per[0])


def test_invalid_inputs():
    with pytest.raises(ValueError):
        ek.recall_at_k([], [], 0)
    with pytest.raises(ValueError):
        ek.check_regime("maybe")
    with pytest.raises(ValueError):
        ek.recall_at_k([ek.PredictedFrame()], [], 10)


# --------------------------------------------------------------------------
# buckets
# --------------------------------------------------------------------------


def test_uniform_counts_all_body():
    b = ek.split_head_body_tail([10] * 5, head_fraction=0.5, tail_fraction=0.05)
    assert b == {"HEAD": [], "BODY": [0, 1, 2, 3, 4], "TAIL": []}


def test_dominant_class_is_head():
    b = ek.split_head_body_tail([1000, 10, 10, 1], head_fraction=0.5, tail_fraction=0.005)
    assert b["HEAD"] == [0] and b["TAIL"] == [3]


def test_non_monotone_thresholds():
    with pytest.raises(ValueError):
        ek.split_head_body_tail([1, 2], head_fraction=0.1, tail_fraction=0.2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=30), st.floats(0.01, 0.5), st.floats(0.0, 0.009))
def test_buckets_partition_classes(counts, head, tail):
    b = ek.split_head_body_tail(counts, head, tail)
    assert sorted(b["HEAD"] + b["BODY"] + b["TAIL"]) == list(range(len(counts)))


def test_default_cutoffs_are_fractions():
    assert ek.HEAD_FRACTION == pytest.approx(100_000 / 1_715_568)
    assert ek.TAIL_FRACTION < ek.HEAD_FRACTION


# --------------------------------------------------------------------------
# reports and prediction files
# --------------------------------------------------------------------------


def test_report_files(tmp_path):
    preds, gts = random_graphs(1)
    reps = [ek.evaluate(preds, gts, 5, t, r, train_counts=[100, 50, 10, 2, 1]) for t in ek.TASKS for r in ek.REGIMES]
    ek.write_reports(reps, tmp_path / "r.json", tmp_path / "r.csv", tmp_path / "pc.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert {(d["task"], d["regime"]) for d in data} == {(t, r) for t in ek.TASKS for r in ek.REGIMES}
    rows = list(csv.reader(open(tmp_path / "pc.csv")))
    assert len(rows) - 1 == 5
    assert len(list(csv.reader(open(tmp_path / "r.csv")))) == 7
    for d in data:
        for v in list(d["recall"].values()) + list(d["mean_recall"].values()):
            assert 0.0 <= v <= 1.0


def test_prediction_json_round_trip():
    preds, _ = random_graphs(2)
    back = ek.predictions_from_json(json.loads(json.dumps(ek.predictions_to_json(preds))))
    assert [[(p.subj, p.obj, dict(p.scores)) for p in f.pairs] for f in back] == [
        [(p.subj, p.obj, dict(p.scores)) for p in f.pairs] for f in preds
    ]


def test_prediction_json_validation():
    with pytest.raises(ValueError, match="version"):
        ek.predictions_from_json({"version": 3, "frames": []})
    bad = {"version": 1, "frames": [{"objects": [{"id": 0, "class": 0, "box": [0, 0, 1, 1]}],
                                      "triplets": [{"subj": 0, "obj": 0, "predicates": [1, 2], "confidences": [0.5]}]}]}
    with pytest.raises(ValueError, match="line 4"):
        ek.predictions_from_json(bad, line=4)
