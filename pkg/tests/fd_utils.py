"""Central finite-difference gradient checking against reverse mode."""

from __future__ import annotations

from typing import Callable

import torch


def finite_difference_grad(
    loss_fn: Callable[[], torch.Tensor], param: torch.Tensor, step: float = 1e-4
) -> torch.Tensor:
    """Central differences of a scalar loss w.r.t. every element of param."""
    grad = torch.zeros_like(param, dtype=torch.float64)
    flat = param.data.view(-1)
    grad_flat = grad.view(-1)
    for idx in range(flat.numel()):
        orig = flat[idx].item()
        flat[idx] = orig + step
        up = loss_fn().item()
        flat[idx] = orig - step
        down = loss_fn().item()
        flat[idx] = orig
        grad_flat[idx] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Element-wise |a - n| / max(|a|, |n|, 1e-3), reduced by max.

    The 1e-3 floor turns the comparison absolute (at 1e-7 for the target
    1e-4) where both gradients are near zero, which is where central
    differences bottom out in float64.
    """
    diff = (analytic.double() - numeric.double()).abs()
    denom = torch.maximum(
        torch.maximum(analytic.double().abs(), numeric.double().abs()),
        torch.full_like(diff, 1e-3),
    )
    return float((diff / denom).max()) if diff.numel() else 0.0


def min_relu_margin(model: torch.nn.Module, run_fn: Callable[[], object]) -> float:
    """Smallest |pre-activation| entering any ReLU feed-forward layer during
    run_fn. Central differences are only trustworthy when this is well above
    step * sensitivity, otherwise the difference straddles a kink."""
    margins: list[float] = []
    hooks = []
    for name, module in model.named_modules():
        if name.endswith("ff1"):
            hooks.append(
                module.register_forward_hook(
                    lambda m, i, o: margins.append(float(o.detach().abs().min()))
                )
            )
    try:
        run_fn()
    finally:
        for h in hooks:
            h.remove()
    return min(margins) if margins else float("inf")


def min_pool_gap(x: torch.Tensor) -> float:
    """Smallest top-2 gap of a column-wise max pool; infinite for one row."""
    if x.shape[0] < 2:
        return float("inf")
    top2 = torch.topk(x.detach(), 2, dim=0).values
    return float((top2[0] - top2[1]).min())


def check_model_gradients(
    model: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
) -> dict[str, float]:
    """Compare reverse-mode gradients of loss_fn against central differences
    for every named parameter; returns the per-parameter relative errors."""
    loss = loss_fn()
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    errors = {}
    with torch.no_grad():
        for name, param, a_grad in zip(names, params, analytic):
            if a_grad is None:
                a_grad = torch.zeros_like(param)
            n_grad = finite_difference_grad(loss_fn, param, step=step)
            errors[name] = max_relative_error(a_grad, n_grad)
    failing = {n: e for n, e in errors.items() if e >= tol}
    assert not failing, f"gradient check failed: {failing}"
    return errors
