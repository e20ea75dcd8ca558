"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn

MAX_CHECKED_VALUES = 10_000


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: str
    checked: int
    retried: bool = False

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (f"gradient check {verdict}: max rel error {self.max_rel_error:.3e} at {self.worst} "
                f"({self.checked} values{', retried' if self.retried else ''})")


def _projection_loss(seed: int) -> Callable[[torch.Tensor], torch.Tensor]:
    cache: dict[tuple, torch.Tensor] = {}

    def loss(out: torch.Tensor) -> torch.Tensor:
        key = (tuple(out.shape), out.dtype)
        if key not in cache:
            g = torch.Generator().manual_seed(seed)
            w = torch.randn(out.shape, generator=g, dtype=torch.float64)
            cache[key] = w.to(out.real.dtype)
        w = cache[key]
        if out.is_complex():
            return (out.real * w).sum() + (out.imag * w.flip(-1)).sum()
        return (out * w).sum()

    return loss


def _check_once(model: nn.Module, inputs: list[torch.Tensor], loss_fn, tol: float,
                eps: float, floor: float) -> GradCheckReport:
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    total = sum(p.numel() for _, p in params) + sum(x.numel() for x in inputs)
    if total > MAX_CHECKED_VALUES:
        raise ValueError(f"{total} values to check; finite differences limited to {MAX_CHECKED_VALUES}")

    for x in inputs:
        x.requires_grad_(True)
        x.grad = None
    model.zero_grad(set_to_none=True)
    loss_fn(model(*inputs)).backward()

    targets = [(f"param {n}", p) for n, p in params] + [(f"input[{i}]", x) for i, x in enumerate(inputs)]
    worst, worst_at, checked = 0.0, "-", 0
    with torch.no_grad():
        for label, t in targets:
            analytic = t.grad if t.grad is not None else torch.zeros_like(t)
            flat = t.view(-1)
            ana = analytic.reshape(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn(model(*inputs)).item()
                flat[idx] = orig - eps
                down = loss_fn(model(*inputs)).item()
                flat[idx] = orig
                num = (up - down) / (2 * eps)
                a = ana[idx].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                checked += 1
                if err > worst:
                    worst, worst_at = err, f"{label}[{idx}]"
    for x in inputs:
        x.requires_grad_(False)
    return GradCheckReport(worst <= tol, worst, worst_at, checked)


def gradient_check(model: nn.Module, inputs: torch.Tensor | Sequence[torch.Tensor],
                   tolerance: float = 1e-4, loss_fn: Callable | None = None,
                   eps: float = 1e-6, floor: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of a scalar loss with central differences.

    The model is copied to float64 first. Every trainable parameter entry and
    every input entry is perturbed. The default loss is a fixed random
    projection of the model output. On failure the inputs are jittered once and
    the check repeated, which moves them off kinks such as ReLU at 0.
    """
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs]
    model = copy.deepcopy(model).double()
    xs = [x.detach().clone().double() for x in inputs]
    loss_fn = loss_fn or _projection_loss(seed)

    report = _check_once(model, xs, loss_fn, tolerance, eps, floor)
    if report.passed:
        return report
    g = torch.Generator().manual_seed(seed + 1)
    jittered = [x.detach() + 1e-3 * torch.randn(x.shape, generator=g, dtype=x.dtype) for x in xs]
    retry = _check_once(model, jittered, loss_fn, tolerance, eps, floor)
    retry.retried = True
    return retry
