"""Dense float64 tensor substrate.

torch tensors (always ``float64``) play the role of the dense tensor type;
this module adds the handful of shape-checked differentiable ops the model
uses, a finite-difference gradient checker and an AdamW optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional

import torch
import torch.nn.functional as F

DTYPE = torch.float64
# Additive mask value; exp(-1e30 - x) underflows to exactly 0 in float64.
MASK_VALUE = -1e30


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(data, dtype=DTYPE).clone().requires_grad_(requires_grad)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def transpose(a: torch.Tensor) -> torch.Tensor:
    return a.transpose(-2, -1)


def concat(parts: Iterable[torch.Tensor], dim: int = -1) -> torch.Tensor:
    parts = list(parts)
    ref = list(parts[0].shape)
    for p in parts[1:]:
        shape = list(p.shape)
        if len(shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(shape, ref)) if i != dim % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {shape}")
    return torch.cat(parts, dim=dim)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis."""
    return torch.softmax(x, dim=-1)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cannot L2-normalize a zero vector")
    return x / norm


def masked_fill(scores: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Push entries where ``keep`` is False to ``MASK_VALUE``.

    Additive rather than in-place so there is no inf - inf anywhere.
    """
    try:
        shape = torch.broadcast_shapes(keep.shape, scores.shape)
    except RuntimeError as exc:
        raise ShapeError(f"mask {tuple(keep.shape)} vs scores {tuple(scores.shape)}") from exc
    if shape != scores.shape:
        raise ShapeError(f"mask {tuple(keep.shape)} would broadcast scores {tuple(scores.shape)}")
    return scores + torch.where(keep, 0.0, MASK_VALUE).to(scores.dtype)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradReport:
    max_rel_error: float
    per_parameter_errors: Dict[str, float]
    tolerance: float
    passed: bool
    checked: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "per_parameter_errors": dict(self.per_parameter_errors),
            "checked": dict(self.checked),
        }


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    f: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    grad_fn: Optional[Callable[[Mapping[str, torch.Tensor]], Mapping[str, torch.Tensor]]] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
    directions: Optional[int] = None,
) -> GradReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    ``grad_fn`` overrides the analytic gradient (autograd by default).
    ``max_coords`` caps how many coordinates per parameter are probed; the
    probed coordinates are drawn uniformly without replacement.

    With ``directions=n`` each parameter is instead probed along ``n``
    random Gaussian directions d, comparing (f(p + eps d) - f(p - eps d)) / 2eps
    with grad . d.  Coordinates with near-zero gradient then no longer sit
    below the float64 roundoff of the difference quotient.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = {k: v.detach().clone().to(DTYPE) for k, v in params.items()}

    def evaluate(values: Mapping[str, torch.Tensor]) -> float:
        with torch.no_grad():
            out = f(values)
        val = float(out)
        if not math.isfinite(val):
            raise NonFiniteError("objective is non-finite at a probe point")
        return val

    if grad_fn is None:
        leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
        out = f(leaves)
        if not math.isfinite(float(out.detach())):
            raise NonFiniteError("objective is non-finite at the base point")
        grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
        analytic = {
            k: (g if g is not None else torch.zeros_like(base[k])).detach()
            for k, g in zip(leaves, grads)
        }
    else:
        analytic = {k: torch.as_tensor(g, dtype=DTYPE) for k, g in grad_fn(base).items()}

    # offset so probe directions never coincide with inputs drawn from the same seed
    gen = torch.Generator().manual_seed(0x5EED0000 + seed)
    errors: Dict[str, float] = {}
    checked: Dict[str, int] = {}
    for name, value in base.items():
        if directions is not None:
            worst = 0.0
            for _ in range(directions):
                # Gaussian rather than +-1 so d is never exactly orthogonal to a
                # structurally mean-free gradient (softmax or layer-norm inputs)
                d = torch.randn(value.shape, generator=gen, dtype=DTYPE)
                probe = dict(base)
                probe[name] = value + eps * d
                fp = evaluate(probe)
                probe[name] = value - eps * d
                fm = evaluate(probe)
                numeric = (fp - fm) / (2 * eps)
                worst = max(worst, relative_error(float((analytic[name] * d).sum()), numeric))
            errors[name] = worst
            checked[name] = directions
            continue
        flat = value.reshape(-1)
        n = flat.numel()
        if max_coords is not None and n > max_coords:
            coords = torch.randperm(n, generator=gen)[:max_coords].tolist()
        else:
            coords = range(n)
        worst = 0.0
        count = 0
        for i in coords:
            orig = float(flat[i])
            probe = dict(base)
            plus = value.clone()
            plus.reshape(-1)[i] = orig + eps
            probe[name] = plus
            fp = evaluate(probe)
            minus = value.clone()
            minus.reshape(-1)[i] = orig - eps
            probe[name] = minus
            fm = evaluate(probe)
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric))
            count += 1
        errors[name] = worst
        checked[name] = count
    max_err = max(errors.values()) if errors else 0.0
    return GradReport(max_err, errors, tol, max_err <= tol, checked)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam (Loshchilov & Hutter update rule).

    ``groups`` is a list of dicts with keys ``params`` (list of tensors) and
    optionally ``lr``/``weight_decay``; missing keys fall back to defaults.
    """

    def __init__(self, groups, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.groups = []
        for g in groups:
            group = dict(self.defaults)
            group.update({k: v for k, v in g.items() if k != "params"})
            group["params"] = list(g["params"])
            self.groups.append(group)
        self.step_count = 0
        self.state = [
            [(torch.zeros_like(p), torch.zeros_like(p)) for p in g["params"]] for g in self.groups
        ]

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for g, states in zip(self.groups, self.state):
            b1, b2 = g["betas"]
            lr, wd, eps = g["lr"], g["weight_decay"], g["eps"]
            bc1 = 1 - b1**t
            bc2 = 1 - b2**t
            for p, (m, v) in zip(g["params"], states):
                if p.grad is None:
                    continue
                grad = p.grad
                m.mul_(b1).add_(grad, alpha=1 - b1)
                v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
                p.mul_(1 - lr * wd)
                denom = (v / bc2).sqrt_().add_(eps)
                p.addcdiv_(m, denom, value=-lr / bc1)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "lrs": [g["lr"] for g in self.groups],
            "moments": [[(m.clone(), v.clone()) for m, v in s] for s in self.state],
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for g, lr in zip(self.groups, state["lrs"]):
            g["lr"] = lr
        for mine, theirs in zip(self.state, state["moments"]):
            for (m, v), (m2, v2) in zip(mine, theirs):
                m.copy_(m2)
                v.copy_(v2)
