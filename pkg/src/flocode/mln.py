"""Mixture logit network head and its losses.

Shapes used throughout: ``mu`` and ``var`` are N x K x C (batch, mixtures,
predicate classes); ``pi`` is N x K and is shared by every class.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numerics import DTYPE

BCE_CLAMP = 1e-12


@dataclass
class MixtureParams:
    mu: torch.Tensor
    var: torch.Tensor
    pi: torch.Tensor

    def __post_init__(self):
        if self.mu.dim() == 2:  # single sample given as K x C
            self.mu, self.var, self.pi = self.mu[None], self.var[None], self.pi[None]
        if self.mu.shape != self.var.shape or self.pi.shape != self.mu.shape[:2]:
            raise ValueError(
                f"inconsistent mixture shapes mu{tuple(self.mu.shape)} var{tuple(self.var.shape)} pi{tuple(self.pi.shape)}"
            )

    @property
    def mixtures(self) -> int:
        return self.mu.shape[1]

    @property
    def num_classes(self) -> int:
        return self.mu.shape[2]

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, idx) -> "MixtureParams":
        idx = [idx] if isinstance(idx, int) else idx
        return MixtureParams(self.mu[idx], self.var[idx], self.pi[idx])


class MixtureHeads(nn.Module):
    """Linear mean, sigmoid-variance and softmax-weight projections."""

    def __init__(self, dim: int, num_classes: int, mixtures: int):
        super().__init__()
        self.K, self.C = mixtures, num_classes
        self.f_mu = nn.Linear(dim, mixtures * num_classes, dtype=DTYPE)
        self.f_var = nn.Linear(dim, mixtures * num_classes, dtype=DTYPE)
        self.f_pi = nn.Linear(dim, mixtures, dtype=DTYPE)

    def forward(self, z: torch.Tensor) -> MixtureParams:
        N = z.shape[0]
        mu = self.f_mu(z).reshape(N, self.K, self.C)
        var = torch.sigmoid(self.f_var(z)).reshape(N, self.K, self.C)
        pi = torch.softmax(self.f_pi(z), dim=-1)
        return MixtureParams(mu, var, pi)


def mixture_heads(z: torch.Tensor, heads: MixtureHeads) -> MixtureParams:
    return heads(z)


def epistemic(mp: MixtureParams) -> torch.Tensor:
    """Per-sample sum over classes of the pi-weighted variance of mixture means (N,)."""
    pi = mp.pi[:, :, None]
    mean = (pi * mp.mu).sum(dim=1, keepdim=True)
    return (pi * (mp.mu - mean) ** 2).sum(dim=(1, 2))


def aleatoric(mp: MixtureParams) -> torch.Tensor:
    """Per-sample sum over classes of the pi-weighted mixture variances (N,)."""
    return (mp.pi[:, :, None] * mp.var).sum(dim=(1, 2))


def sigmoid_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(targets * torch.log(p) + (1.0 - targets) * torch.log1p(-p))


def mal_loss(mp: MixtureParams, labels: torch.Tensor) -> torch.Tensor:
    """Mixture of attenuated sigmoid cross-entropy, averaged over the batch.

    ``labels`` is N x C multi-hot (a single C vector is accepted for N=1).
    """
    labels = torch.as_tensor(labels, dtype=DTYPE)
    if labels.dim() == 1:
        labels = labels[None]
    bce = sigmoid_bce(mp.mu, labels[:, None, :])
    per = (mp.pi[:, :, None] * bce / mp.var).sum(dim=(1, 2))
    return per.mean()


def _log_kernel(mu_a, var_a, mu_b, var_b):
    """log rho, summing over the mixture axis (dim -2)."""
    s2 = var_a**2 + var_b**2
    log_scale = -0.5 * torch.log(s2 / (2.0 * var_a * var_b)).sum(dim=-2)
    return log_scale - 0.25 * ((mu_a - mu_b) ** 2 / s2).sum(dim=-2)


def kernel_similarity(mp_n: MixtureParams, mp_i: MixtureParams, p: int) -> torch.Tensor:
    """Gaussian-mixture kernel between two samples for predicate class ``p``."""
    if bool((mp_n.var[..., p] <= 0).any()) or bool((mp_i.var[..., p] <= 0).any()):
        raise ValueError("kernel similarity needs strictly positive variances")
    sl = slice(p, p + 1)  # keep the class axis; _log_kernel reduces over mixtures at dim -2
    return torch.exp(_log_kernel(mp_n.mu[0, :, sl], mp_n.var[0, :, sl], mp_i.mu[0, :, sl], mp_i.var[0, :, sl]))[0]


def pairwise_kernel(mp: MixtureParams) -> torch.Tensor:
    """rho for every (n, i, class): N x N x C."""
    mu_a, var_a = mp.mu[:, None], mp.var[:, None]
    mu_b, var_b = mp.mu[None, :], mp.var[None, :]
    return torch.exp(_log_kernel(mu_a, var_a, mu_b, var_b))


def jaccard_weights(labels: torch.Tensor) -> torch.Tensor:
    """|Y_n & Y_m| / |Y_n | Y_m| for every pair (0 where both sets are empty)."""
    inter = labels @ labels.T
    sizes = labels.sum(dim=1)
    union = sizes[:, None] + sizes[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1.0), torch.zeros_like(inter))


@dataclass
class KmclConfig:
    temperature: float = 0.1
    overlap: str = "jaccard"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.overlap not in ("jaccard", "uniform"):
            raise ValueError(f"unknown overlap weighting {self.overlap!r}")


def kmcl_loss(mp: MixtureParams, labels: torch.Tensor, cfg: KmclConfig = KmclConfig()) -> torch.Tensor:
    """Kernel-based multi-label contrastive loss over a batch.

    Anchors without positives contribute zero; the result is averaged
    over all N anchors.
    """
    labels = torch.as_tensor(labels, dtype=DTYPE)
    N = labels.shape[0]
    if N < 2:
        raise ValueError("contrastive loss needs a batch of at least two samples")
    logits = pairwise_kernel(mp) / cfg.temperature  # N x N x C
    eye = torch.eye(N, dtype=torch.bool)
    masked = logits.masked_fill(eye[:, :, None], float("-inf"))
    log_prob = logits - torch.logsumexp(masked, dim=1, keepdim=True)  # log softmax over i != n
    shared = labels[:, None, :] * labels[None, :, :]  # N x N x C
    shared = shared.masked_fill(eye[:, :, None], 0.0)
    positive = shared.sum(dim=-1) > 0
    if cfg.overlap == "jaccard":
        weight = jaccard_weights(labels)
    else:
        weight = torch.ones(N, N, dtype=DTYPE)
    weight = torch.where(positive, weight, torch.zeros_like(weight))
    per_pair = (shared * torch.where(shared > 0, log_prob, torch.zeros_like(log_prob))).sum(dim=-1)
    n_pos = positive.sum(dim=1)
    per_anchor = -(weight * per_pair).sum(dim=1) / n_pos.clamp(min=1)
    return per_anchor.mean()


def predict_scores(mp: MixtureParams) -> torch.Tensor:
    """Uncertainty-weighted logits sum_k pi * mu / var (N x C)."""
    return (mp.pi[:, :, None] * mp.mu / mp.var).sum(dim=1)
