"""Finite-difference checks of every training loss on tiny seeded inputs."""

from __future__ import annotations

from typing import Dict, Mapping

import torch
from torch import nn
from torch.func import functional_call

from .mln import KmclConfig, MixtureParams, kmcl_loss, mal_loss
from .numerics import DTYPE, GradReport, grad_check
from .relrep import AttentionAccumulator, CorrelationStore, commit_epoch
from .synthdata import GeneratorConfig, LabelSpace, generate
from .tfod import make_etf, object_loss
from . import trainer as tr

CHECKS = ("object_loss", "mal_loss", "kmcl_loss", "total_loss")


def _mixture(params: Mapping[str, torch.Tensor]) -> MixtureParams:
    return MixtureParams(params["mu"], torch.sigmoid(params["var_logit"]), torch.softmax(params["pi_logit"], dim=-1))


def _mixture_inputs(gen: torch.Generator, n: int, k: int, c: int) -> Dict[str, torch.Tensor]:
    return {
        "mu": torch.randn(n, k, c, generator=gen, dtype=DTYPE),
        "var_logit": torch.randn(n, k, c, generator=gen, dtype=DTYPE),
        "pi_logit": torch.randn(n, k, generator=gen, dtype=DTYPE),
    }


def tiny_config(seed: int = 0) -> tr.TrainConfig:
    return tr.TrainConfig(
        task="SGCLS",
        seed=seed,
        mixtures=2,
        num_object_classes=4,
        num_predicates=5,
        tenc=dict(layers=1, heads=2, model_dim=8, ffn_dim=8),
        relrep=dict(model_dim=6, heads=2, ffn_dim=8, encoder_layers=1, decoder_layers=1),
    )


def tiny_video(seed: int = 0):
    gen = GeneratorConfig(labels=LabelSpace(4, 5, 1.0), videos=1, frames=2, objects=2, channels=2, grid=2, seed=seed)
    return generate(gen)[0]


class _VideoObjective(nn.Module):
    def __init__(self, model: tr.FloCoDeModel, prep: tr.PreparedVideo, store: CorrelationStore):
        super().__init__()
        self.model = model
        self.prep = prep
        self.store = store

    def forward(self):
        return tr.video_loss(self.model, self.prep, self.store, training=True).total


def total_loss_problem(seed: int = 0):
    """(objective, params) for the full combined loss on a 2-frame video.

    A store committed from one pass makes the debiasing branch active.
    """
    cfg = tiny_config(seed)
    prep = tr.prepare_video(tiny_video(seed), cfg, "gt")
    state = tr.new_state(cfg, prep.raw.shape[1])
    out = tr.video_loss(state.model, prep, None, training=True)
    acc = AttentionAccumulator()
    for s, ps, o, a in zip(out.instances.subj_cls, out.instances.predicates, out.instances.obj_cls, out.raw.tolist()):
        acc.add(s, ps, o, a)
    store = commit_epoch(CorrelationStore(cfg.relrep.eta), acc)
    wrapper = _VideoObjective(state.model, prep, store)
    params = {k: v.detach().clone() for k, v in wrapper.named_parameters()}

    def f(p):
        return functional_call(wrapper, p, ())

    return f, params


def problem(name: str, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    if name == "object_loss":
        etf = make_etf(5, 8, seed)
        labels = torch.tensor([0, 1, 2, 3, 4, 1])
        params = {"x": torch.randn(6, 8, generator=gen, dtype=DTYPE)}
        return (lambda p: object_loss(p["x"], labels, etf)), params
    if name == "mal_loss":
        labels = (torch.rand(4, 5, generator=gen) < 0.4).to(DTYPE)
        return (lambda p: mal_loss(_mixture(p), labels)), _mixture_inputs(gen, 4, 3, 5)
    if name == "kmcl_loss":
        labels = torch.tensor([[1, 0, 1, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 1, 0, 0], [1, 0, 0, 1]], dtype=DTYPE)
        cfg = KmclConfig(temperature=0.5)
        return (lambda p: kmcl_loss(_mixture(p), labels, cfg)), _mixture_inputs(gen, 5, 2, 4)
    if name == "total_loss":
        return total_loss_problem(seed)
    raise ValueError(f"unknown check {name!r}")


def _faulty_grad(f, params):
    """Autograd gradient with a deliberate error, for exercising the detector."""
    leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    grads = torch.autograd.grad(f(leaves), list(leaves.values()), allow_unused=True)
    out = {k: (g if g is not None else torch.zeros_like(v)) for (k, v), g in zip(leaves.items(), grads)}
    first = next(iter(out))
    out[first] = out[first] * 1.5 + 0.1
    return out


def run_suite(
    names=CHECKS,
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = 1e-4,
    directions: int = 4,
    inject_fault: bool = False,
) -> Dict[str, GradReport]:
    """Every parameter tensor is probed along ``directions`` random directions."""
    reports = {}
    for name in names:
        f, params = problem(name, seed)
        grad_fn = (lambda p, f=f: _faulty_grad(f, p)) if inject_fault else None
        reports[name] = grad_check(f, params, eps=eps, tol=tol, grad_fn=grad_fn, seed=seed, directions=directions)
    return reports
