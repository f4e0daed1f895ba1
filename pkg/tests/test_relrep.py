import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from flocode import relrep as rr
from flocode.numerics import DTYPE
from flocode.tfod import MultiHeadAttention


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


# --------------------------------------------------------------------------
# pair matching
# --------------------------------------------------------------------------


def test_iou_hand_value():
    assert rr.iou((0, 0, 10, 10), (0, 0, 10, 9)) == pytest.approx(0.9, abs=1e-15)
    assert rr.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_match_pairs_examples():
    assert rr.match_pairs([(1, (0, 0, 10, 10))], [(1, (0, 0, 10, 10))]) == [(0, 0)]
    assert rr.match_pairs([(1, (0, 0, 10, 10))], [(1, (0, 0, 10, 9))]) == [(0, 0)]
    # IoU 0.5
    assert rr.match_pairs([(1, (0, 0, 10, 10))], [(1, (0, 0, 10, 5))]) == []
    assert rr.match_pairs([(1, (0, 0, 10, 10))], [(2, (0, 0, 10, 10))]) == []


def test_match_pairs_prefers_highest_iou():
    prev = [(1, (0, 0, 10, 9)), (1, (0, 0, 10, 10))]
    nxt = [(1, (0, 0, 10, 10))]
    assert rr.match_pairs(prev, nxt) == [(1, 0)]


boxes = st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(1, 5), st.integers(1, 5)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)
dets = st.lists(st.tuples(st.integers(0, 1), boxes), max_size=6)


@settings(max_examples=80, deadline=None)
@given(dets, dets, st.floats(0.0, 0.9))
def test_match_pairs_is_partial_matching(prev, nxt, thr):
    out = rr.match_pairs(prev, nxt, thr)
    assert len({i for i, _ in out}) == len(out) == len({j for _, j in out})
    for i, j in out:
        assert prev[i][0] == nxt[j][0] and rr.iou(prev[i][1], nxt[j][1]) > thr


def test_assign_tracks_chains_matches():
    frames = [[(1, (0, 0, 4, 4)), (2, (5, 5, 9, 9))], [(2, (5, 5, 9, 9)), (1, (0, 0, 4, 4))], [(1, (10, 10, 12, 12))]]
    assert rr.assign_tracks(frames) == [[0, 1], [1, 0], [2]]


# --------------------------------------------------------------------------
# relation features
# --------------------------------------------------------------------------


def relation_batch(L, seed=0, obj_dim=5, union_dim=6):
    boxes = [((1.0, 1.0, 4.0, 6.0), (3.0, 2.0 + i, 7.0, 6.0 + i)) for i in range(L)]
    geo = torch.tensor(np.stack([rr.box_geometry(s, o, 16, 16) for s, o in boxes]), dtype=DTYPE)
    return rr.RelationBatch(randn(L, obj_dim, seed=seed), randn(L, obj_dim, seed=seed + 1),
                            randn(L, union_dim, seed=seed + 2), geo, torch.arange(L) % 3)


def test_relation_feature_dims():
    torch.manual_seed(0)
    feats = rr.RelationFeatures(5, 6, 13)
    out = feats(relation_batch(6))
    assert out.shape == (6, 13)
    assert rr.split_dims(13) == (5, 4, 4)


def test_box_projection_is_sensitive_to_both_boxes():
    torch.manual_seed(1)
    feats = rr.RelationFeatures(5, 6, 12)
    base = rr.box_geometry((1, 1, 4, 6), (3, 2, 7, 6), 16, 16)
    moved_s = rr.box_geometry((2, 1, 5, 6), (3, 2, 7, 6), 16, 16)
    moved_o = rr.box_geometry((1, 1, 4, 6), (3, 3, 7, 7), 16, 16)
    parts = [feats.f_box(torch.tensor(g, dtype=DTYPE)) for g in (base, moved_s, moved_o)]
    assert parts[0].shape == (6,)
    assert not torch.allclose(parts[0], parts[1]) and not torch.allclose(parts[0], parts[2])


# --------------------------------------------------------------------------
# blending and debiased cross-attention
# --------------------------------------------------------------------------


def test_blend_hand_value():
    w = torch.tensor([[0.5, 0.5]], dtype=DTYPE)
    out = rr.blend_attention(w, torch.tensor([0]), torch.tensor([0.1], dtype=DTYPE), 0.7)
    # 0.7 * 0.5 + 0.3 * 0.1 = 0.38 before renormalising
    assert torch.allclose(out, torch.tensor([[0.38 / 0.88, 0.5 / 0.88]], dtype=DTYPE), atol=1e-15)


def test_blend_without_prior_is_identity():
    w = torch.softmax(randn(3, 4), -1)
    out = rr.blend_attention(w, torch.tensor([0, 2, 1]), torch.full((3,), math.nan, dtype=DTYPE), 0.2)
    assert torch.allclose(out, w, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_blended_rows_sum_to_one(seed, eta):
    gen = np.random.default_rng(seed)
    Lq, Lk = int(gen.integers(1, 6)), int(gen.integers(1, 6))
    w = torch.softmax(torch.tensor(gen.normal(size=(2, Lq, Lk))), -1)
    own = torch.tensor(gen.integers(0, Lk, size=Lq))
    prior = torch.tensor(gen.uniform(0, 1, size=Lq))
    out = rr.blend_attention(w, own, prior, eta)
    assert torch.all(torch.abs(out.sum(-1) - 1) <= 1e-9)


def attn_module(dim=8, heads=2, seed=0):
    torch.manual_seed(seed)
    return MultiHeadAttention(dim, heads)


def reference_attention(attn, query, memory, keep=None):
    """torch's stock multi-head attention with the module's weights."""
    in_w = torch.cat([attn.q.weight, attn.k.weight, attn.v.weight])
    in_b = torch.cat([attn.q.bias, torch.zeros_like(attn.q.bias), attn.v.bias])
    mask = None if keep is None else ~keep
    out, _ = F.multi_head_attention_forward(
        query[:, None], memory[:, None], memory[:, None], attn.dim, attn.heads, in_w, in_b,
        None, None, False, 0.0, attn.out.weight, attn.out.bias, training=False, need_weights=False, attn_mask=mask,
    )
    return out[:, 0]


def test_eta_one_is_vanilla_cross_attention():
    attn = attn_module()
    q, m = randn(5, 8, seed=1), randn(7, 8, seed=2)
    keep = torch.ones(5, 7, dtype=torch.bool)
    keep[0, 3:] = False
    own = torch.tensor([0, 1, 2, 3, 4])
    prior = torch.rand(5, dtype=DTYPE)
    out, raw = rr.debiased_cross_attention(attn, q, m, keep, own, prior, eta=1.0, training=True)
    assert torch.max(torch.abs(out - reference_attention(attn, q, m, keep))) <= 1e-10
    w = attn.weights(q, m, keep).mean(0)
    assert torch.allclose(raw, w[torch.arange(5), own], atol=1e-15)


def test_eta_zero_uses_stored_values():
    attn = attn_module(seed=3)
    q, m = randn(4, 8, seed=4), randn(4, 8, seed=5)
    own = torch.arange(4)
    prior = torch.tensor([0.1, 0.9, 0.5, 0.3], dtype=DTYPE)
    with torch.no_grad():
        raw_w = attn.weights(q, m)  # H x Lq x Lk
    blended = rr.blend_attention(raw_w, own, prior, 0.0)
    for h in range(2):
        for i in range(4):
            rest = raw_w[h, i].sum() - raw_w[h, i, i]
            assert float(blended[h, i, i]) == pytest.approx(float(prior[i] / (prior[i] + rest)), abs=1e-14)
    out, _ = rr.debiased_cross_attention(attn, q, m, None, own, prior, 0.0, training=True)
    assert torch.allclose(out, attn.apply_weights(blended, m), atol=1e-14)


def test_inference_ignores_the_store():
    attn = attn_module(seed=6)
    q, m = randn(3, 8, seed=7), randn(3, 8, seed=8)
    prior = torch.tensor([0.0, 1.0, 0.5], dtype=DTYPE)
    out, _ = rr.debiased_cross_attention(attn, q, m, None, torch.arange(3), prior, 0.3, training=False)
    assert torch.equal(out, attn(q, m))


def test_eta_out_of_range():
    with pytest.raises(ValueError):
        rr.debiased_cross_attention(attn_module(), randn(2, 8), randn(2, 8), None, torch.arange(2), None, 1.5, True)
    with pytest.raises(ValueError):
        rr.CorrelationStore(eta=-0.1)


# --------------------------------------------------------------------------
# correlation store
# --------------------------------------------------------------------------


def test_first_commit_stores_raw_means():
    acc = rr.AttentionAccumulator()
    acc.add(0, [3], 5, 0.2)
    acc.add(0, [3], 5, 0.4)
    acc.add(0, [1, 2], 4, 0.6)
    store = rr.commit_epoch(rr.CorrelationStore(0.9), acc)
    assert store.epoch == 1 and store.ready
    assert store[(0, 3, 5)] == pytest.approx(0.3, abs=1e-15)
    assert store[(0, 1, 4)] == store[(0, 2, 4)] == 0.6


def test_unobserved_cells_keep_their_value_and_observed_ones_blend():
    store = rr.CorrelationStore(0.7, epoch=1, cells={(0, 1, 2): 0.1, (0, 2, 2): 0.8})
    new = rr.commit_epoch(store, {(0, 1, 2): 0.5})
    assert new[(0, 2, 2)] == 0.8
    assert new[(0, 1, 2)] == pytest.approx(0.38, abs=1e-15)


def test_commit_twice_for_one_epoch():
    store = rr.commit_epoch(rr.CorrelationStore(), {(0, 0, 1): 0.5}, epoch=0)
    with pytest.raises(ValueError):
        rr.commit_epoch(store, {(0, 0, 1): 0.5}, epoch=0)


def test_prior_averages_labels():
    store = rr.CorrelationStore(cells={(0, 1, 2): 0.2, (0, 3, 2): 0.6}, epoch=1)
    assert store.prior(0, [1, 3], 2) == pytest.approx(0.4)
    assert math.isnan(store.prior(0, [5], 2))


@settings(max_examples=40, deadline=None)
@given(
    cells=st.dictionaries(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), st.floats(0, 1), max_size=20),
    eta=st.floats(0, 1),
    epoch=st.integers(0, 100),
)
def test_store_round_trip(cells, eta, epoch, tmp_path_factory):
    store = rr.CorrelationStore(eta, epoch, cells)
    path = tmp_path_factory.mktemp("store") / "s.json"
    store.save(path)
    back = rr.CorrelationStore.load(path)
    assert back == store
    assert all(back[k] == v for k, v in cells.items())


def test_store_rejects_out_of_range_weights():
    with pytest.raises(ValueError):
        rr.CorrelationStore(cells={(0, 0, 0): 1.5})


# --------------------------------------------------------------------------
# encoder-decoder
# --------------------------------------------------------------------------


def transformer(seed=0, window=10, layers=2):
    torch.manual_seed(seed)
    cfg = rr.RelRepConfig(model_dim=8, heads=2, ffn_dim=12, encoder_layers=layers, decoder_layers=layers, window=window)
    return rr.RelationTransformer(cfg, obj_dim=5)


def test_window_saturation():
    model = transformer()
    frames = torch.tensor([0, 0, 1, 2, 4, 5])
    objs, memory = randn(6, 5, seed=1), randn(6, 8, seed=2)
    a = rr.decode_predicates(model, objs, memory, frames, window=6)
    b = rr.decode_predicates(model, objs, memory, frames, window=1000)
    assert torch.equal(a, b)
    c = rr.decode_predicates(model, objs, memory, frames, window=2)
    assert not torch.allclose(a, c)


def test_single_instance():
    model = transformer()
    out = rr.decode_predicates(model, randn(1, 5), randn(1, 8), torch.tensor([3]))
    assert out.shape == (1, 8)


def test_empty_memory():
    with pytest.raises(ValueError):
        rr.decode_predicates(transformer(), randn(1, 5), torch.zeros(0, 8, dtype=DTYPE), torch.tensor([0]))


@pytest.mark.parametrize("seed", range(4))
def test_decoder_is_causal_in_its_inputs(seed):
    model = transformer(seed)
    frames = torch.tensor([0, 0, 1, 2, 2, 3, 5])
    objs, memory = randn(7, 5, seed=10 + seed), randn(7, 8, seed=20 + seed)
    base = rr.decode_predicates(model, objs, memory, frames)
    for t in (0, 1, 2, 3):
        later = frames > t
        pert = objs.clone()
        pert[later] = randn(int(later.sum()), 5, seed=30 + t)
        out = rr.decode_predicates(model, pert, memory, frames)
        assert torch.equal(out[~later], base[~later])


def reference_encoder_decoder(model, rel, objects, frames):
    """Stock-attention transformer with the same weights, no debiasing."""
    def layer_norm(x, ln):
        return F.layer_norm(x, x.shape[-1:], ln.weight, ln.bias, ln.eps)

    def ffn(x, f):
        return f.net[3](F.gelu(f.net[0](x)))

    x = rel
    for layer in model.encoder:
        x = layer_norm(x + reference_attention(layer.attn, x, x), layer.norm1)
        x = layer_norm(x + ffn(x, layer.ffn), layer.norm2)
    memory = x
    self_keep, cross_keep = rr.decoder_masks(frames, model.cfg.window)
    y = model.query(objects) + model.frame_table[frames]
    for layer in model.decoder:
        y = layer_norm(y + reference_attention(layer.self_attn, y, y, self_keep), layer.norm1)
        y = layer_norm(y + reference_attention(layer.cross_attn, y, memory, cross_keep), layer.norm2)
        y = layer_norm(y + ffn(y, layer.ffn), layer.norm3)
    return y


def test_eta_one_module_matches_standard_transformer():
    model = transformer(seed=5, window=2)
    frames = torch.tensor([0, 1, 1, 2, 4, 6])
    rel, objs = randn(6, 8, seed=40), randn(6, 5, seed=41)
    prior = torch.rand(6, dtype=DTYPE)
    memory = model.encode(rel)
    out, _ = model.decode(objs, memory, frames, prior=prior, training=True, eta=1.0)
    ref = reference_encoder_decoder(model, rel, objs, frames)
    assert torch.max(torch.abs(out - ref)) <= 1e-10
