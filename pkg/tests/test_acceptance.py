"""Exit criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the
terminal summary.  Criterion 7 trains 15 models and takes a while.
"""

import math
import time

import numpy as np
import pytest
import torch

from flocode import ablation as ab
from flocode import evalkit as ek
from flocode import flowwarp as fw
from flocode import gradsuite
from flocode import mln
from flocode import relrep as rr
from flocode import synthdata as sd
from flocode import tfod
from flocode import trainer as tr
from flocode.numerics import DTYPE

from conftest import ACCEPTANCE_LINES, small_data_config
from test_evalkit import brute_mean_recall, brute_recall, random_graphs
from test_relrep import attn_module, reference_attention


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def gen(seed):
    return torch.Generator().manual_seed(seed)


# --------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    worst, slowest, failed = 0.0, 0.0, []
    for seed in range(5):
        t0 = time.perf_counter()
        reports = gradsuite.run_suite(seed=seed, eps=1e-5, tol=1e-4)
        slowest = max(slowest, time.perf_counter() - t0)
        assert set(reports) == set(gradsuite.CHECKS)
        for name, r in reports.items():
            worst = max(worst, r.max_rel_error)
            if not r.passed:
                failed.append(f"{name}@seed{seed}")
    ok = not failed and slowest < 60.0
    record(1, ok, f"max rel error {worst:.2e} (tol 1e-4), slowest suite {slowest:.1f}s (< 60s){' failed: ' + ','.join(failed) if failed else ''}")


def test_criterion_2_etf_gram():
    worst = 0.0
    for C in (2, 3, 5, 26, 36):
        target = (C / (C - 1)) * (torch.eye(C, dtype=DTYPE) - torch.ones(C, C, dtype=DTYPE) / C)
        for d, seed in ((C, 0), (C + 7, 1), (64, 2)):
            G = tfod.make_etf(C, d, seed).gram()
            worst = max(worst, float((G - target).abs().max()))
    record(2, worst <= 1e-9, f"max Gram deviation {worst:.1e} over C in (2, 3, 5, 26, 36) (tol 1e-9)")


def test_criterion_3_causality():
    violations = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        L = int(rng.integers(2, 9))
        enc = tfod.TemporalEncoder(tfod.TEncConfig(layers=int(rng.integers(1, 3)), heads=2, model_dim=8, ffn_dim=12, max_sequence_length=16), 5)
        x = torch.randn(L, 5, generator=gen(seed), dtype=DTYPE)
        t = int(rng.integers(0, L - 1))
        y = x.clone()
        y[t + 1:] = torch.randn(L - t - 1, 5, generator=gen(10_000 + seed), dtype=DTYPE) * 10
        with torch.no_grad():
            violations += not torch.equal(tfod.tenc_forward(enc, x)[: t + 1], tfod.tenc_forward(enc, y)[: t + 1])

        cfg = rr.RelRepConfig(model_dim=8, heads=2, ffn_dim=12, encoder_layers=1, decoder_layers=int(rng.integers(1, 3)), window=int(rng.integers(1, 6)))
        model = rr.RelationTransformer(cfg, obj_dim=5)
        n = int(rng.integers(2, 10))
        frames = torch.as_tensor(np.sort(rng.integers(0, 6, size=n)))
        objs = torch.randn(n, 5, generator=gen(20_000 + seed), dtype=DTYPE)
        memory = torch.randn(n, 8, generator=gen(30_000 + seed), dtype=DTYPE)
        cut = int(rng.integers(0, 6))
        later = frames > cut
        pert = objs.clone()
        pert[later] = torch.randn(int(later.sum()), 5, generator=gen(40_000 + seed), dtype=DTYPE) * 10
        with torch.no_grad():
            a = rr.decode_predicates(model, objs, memory, frames)
            b = rr.decode_predicates(model, pert, memory, frames)
        violations += not torch.equal(a[~later], b[~later])
    record(3, violations == 0, f"{violations} exact-invariance violations over 100 seeds (encoder and decoder)")


def test_criterion_4_closed_forms():
    al = float(mln.aleatoric(mln.MixtureParams(torch.zeros(2, 1, dtype=DTYPE), torch.tensor([[0.2], [0.4]], dtype=DTYPE), torch.tensor([0.5, 0.5], dtype=DTYPE)))[0])
    ep = float(mln.epistemic(mln.MixtureParams(torch.tensor([[1.0], [-1.0]], dtype=DTYPE), torch.ones(2, 1, dtype=DTYPE), torch.tensor([0.5, 0.5], dtype=DTYPE)))[0])
    one = torch.ones(1, 1, dtype=DTYPE)
    mp_a = mln.MixtureParams(torch.zeros(1, 1, dtype=DTYPE), one, torch.ones(1, dtype=DTYPE))
    mp_b = mln.MixtureParams(2 * one, one, torch.ones(1, dtype=DTYPE))
    ks = float(mln.kernel_similarity(mp_a, mp_b, 0))
    sc = float(mln.predict_scores(mln.MixtureParams(2 * one, 0.5 * one, torch.ones(1, dtype=DTYPE)))[0, 0])
    ml = float(mln.mal_loss(mln.MixtureParams(torch.zeros(1, 1, dtype=DTYPE), 0.5 * one, torch.ones(1, dtype=DTYPE)), one))
    checks = {
        "aleatoric": abs(al - 0.3) <= 1e-12,
        "epistemic": abs(ep - 1.0) <= 1e-12,
        "kernel": abs(ks - math.exp(-0.5)) <= 1e-12,
        "score": sc == 4.0,
        "mal": abs(ml - 1.386294) <= 1e-6,
    }
    record(4, all(checks.values()), f"aleatoric {al!r}, epistemic {ep!r}, kernel {ks!r}, score {sc!r}, mal {ml:.7f}")


def test_criterion_5_debiasing_cases():
    worst_vanilla, worst_stored, worst_rows = 0.0, 0.0, 0.0
    for seed in range(10):
        attn = attn_module(seed=seed)
        Lq, Lk = 5, 7
        q = torch.randn(Lq, 8, generator=gen(seed), dtype=DTYPE)
        m = torch.randn(Lk, 8, generator=gen(100 + seed), dtype=DTYPE)
        keep = torch.rand(Lq, Lk, generator=gen(200 + seed)) < 0.7
        own = torch.arange(Lq)
        keep[own, own] = True
        prior = torch.rand(Lq, generator=gen(300 + seed), dtype=DTYPE)
        with torch.no_grad():
            out, _ = rr.debiased_cross_attention(attn, q, m, keep, own, prior, eta=1.0, training=True)
            worst_vanilla = max(worst_vanilla, float((out - reference_attention(attn, q, m, keep)).abs().max()))
            w = attn.weights(q, m, keep)
            b0 = rr.blend_attention(w, own, prior, 0.0)
            # eta = 0: the own cell is the stored value before renormalisation
            rest = w.sum(-1) - w[:, own, own]
            worst_stored = max(worst_stored, float((b0[:, own, own] - prior / (prior + rest)).abs().max()))
            unnorm = b0 * (prior + rest)[..., None]
            worst_stored = max(worst_stored, float((unnorm[:, own, own] - prior).abs().max()))
            for eta in (0.0, 0.3, 0.9):
                worst_rows = max(worst_rows, float((rr.blend_attention(w, own, prior, eta).sum(-1) - 1).abs().max()))
    ok = worst_vanilla <= 1e-10 and worst_stored <= 1e-12 and worst_rows <= 1e-9
    record(5, ok, f"eta=1 vs stock attention {worst_vanilla:.1e} (tol 1e-10), eta=0 stored {worst_stored:.1e}, row sums {worst_rows:.1e} (tol 1e-9)")


def test_criterion_6_metric_oracle():
    worst, order_failures, checked = 0.0, [], 0
    for regime in ek.REGIMES:
        for seed in range(20):
            preds, gts = random_graphs(1000 * (regime == "no") + seed)
            for task in ek.TASKS:
                for k in (1, 2, 5) + ek.DEFAULT_KS:
                    worst = max(worst, abs(ek.recall_at_k(preds, gts, k, regime, task) - brute_recall(preds, gts, k, regime, task)))
                    mr, _ = ek.mean_recall_at_k(preds, gts, k, 5, regime, task)
                    worst = max(worst, abs(mr - brute_mean_recall(preds, gts, k, 5, regime, task)[0]))
                for k in ek.DEFAULT_KS:
                    checked += 1
                    if ek.recall_at_k(preds, gts, k, "no", task) < ek.recall_at_k(preds, gts, k, "with", task):
                        order_failures.append((seed, task, k))
    ok = worst <= 1e-12 and not order_failures
    record(6, ok, f"brute-force deviation {worst:.1e} (tol 1e-12) on 20 graphs per regime; No >= With held in {checked - len(order_failures)}/{checked} cases at K in {ek.DEFAULT_KS}")


@pytest.mark.slow
def test_criterion_7_directional_ablation(tmp_path):
    t0 = time.perf_counter()
    result = ab.run_ablation(
        tr.TrainConfig(task="SGCLS", regime="no"),
        sd.GeneratorConfig(videos=250),
        seeds=(0, 1, 2),
        n_train=200,
        log=print,
    )
    elapsed = time.perf_counter() - t0
    ab.write_ablation(result, tmp_path)
    ok, lines = ab.directional_check(result)
    record(7, ok and elapsed < 7200, "; ".join(lines) + f" (TAIL mR@10, 3 seeds, {elapsed / 60:.1f} min)")


def test_criterion_8_ema_and_determinism(tmp_path):
    videos = sd.generate(sd.GeneratorConfig(videos=8, seed=4))
    train_v, test_v = videos[:6], videos[6:]
    cfg = tr.TrainConfig(task="SGCLS", epochs=3, alpha=0.0)

    state = tr.train(train_v, cfg)
    same_inference = True
    for i, v in enumerate(test_v):
        prep = tr.prepare_eval(v, cfg, i)
        state.model.eval()
        a = tr.infer_prepared(state.model, state.teacher.module, prep, cfg.task, "no")
        b = tr.infer_prepared(state.model, state.model.relation, prep, cfg.task, "no")
        same_inference &= [[p.scores for p in f.pairs] for f in a] == [[p.scores for p in f.pairs] for f in b]

    cfg = tr.config_from_dict({**cfg.to_dict(), "alpha": 0.999})
    full = tr.train(train_v, cfg)
    part = tr.Trainer(cfg, train_v).fit(epochs=1)
    tr.save_checkpoint(part, tmp_path / "ck.pt")
    resumed = tr.Trainer(cfg, train_v, state=tr.load_checkpoint(tmp_path / "ck.pt")).fit()
    resume_exact = [r["total"] for r in resumed.metrics] == [r["total"] for r in full.metrics]
    resume_exact &= all(torch.equal(a, b) for a, b in zip(full.model.state_dict().values(), resumed.model.state_dict().values()))

    csv_a = tr.metrics_csv(full.metrics).encode()
    csv_b = tr.metrics_csv(tr.train(train_v, cfg).metrics).encode()
    ok = same_inference and resume_exact and csv_a == csv_b
    record(8, ok, f"alpha=0 teacher==student {same_inference}, resume bit-exact {resume_exact}, metrics CSV identical {csv_a == csv_b}")


def test_criterion_9_flow_warp():
    rng = np.random.default_rng(0)
    identity = all(
        np.array_equal(fw.bilinear_warp(f, np.zeros((2,) + f.shape[1:])), f)
        for f in (rng.normal(size=(c, h, w)) for c, h, w in ((1, 1, 1), (3, 5, 6), (8, 16, 16)))
    )
    lin = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        f1, f2 = r.normal(size=(2, 3, 7, 6))
        flow = r.uniform(-4, 4, size=(2, 7, 6))
        a, b = r.normal(size=2)
        lin = max(lin, float(np.abs(fw.bilinear_warp(a * f1 + b * f2, flow) - a * fw.bilinear_warp(f1, flow) - b * fw.bilinear_warp(f2, flow)).max()))
    shifts = True
    f = rng.normal(size=(2, 6, 7))
    for dx, dy in ((1, 0), (-2, 0), (0, 3), (2, -1), (7, 0)):
        flow = np.zeros((2, 6, 7))
        flow[0], flow[1] = dx, dy
        want = np.zeros_like(f)
        for y in range(6):
            for x in range(7):
                if 0 <= x + dx < 7 and 0 <= y + dy < 6:
                    want[:, y, x] = f[:, y + dy, x + dx]
        shifts &= np.array_equal(fw.bilinear_warp(f, flow), want)
    videos = sd.generate(sd.GeneratorConfig())
    flow_err = max(sd.flow_consistency_error(v) for v in videos)
    ok = identity and lin <= 1e-10 and shifts and flow_err <= 1.0
    record(9, ok, f"zero-flow identity {identity}, linearity {lin:.1e} (tol 1e-10), integer shifts exact {shifts}, "
                  f"dataset flow consistency max {flow_err:.3f}px over {len(videos)} videos (<= 1px)")
