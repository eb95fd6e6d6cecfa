"""Central-difference gradient checking against autograd, double precision.

The finite-difference side is computed here, independently of autograd, by
re-evaluating the loss with each parameter element nudged up and down.
"""

from __future__ import annotations

import torch


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    denom = max(abs(a), abs(b))
    if denom <= floor:
        return 0.0 if abs(a - b) <= floor else abs(a - b)
    return abs(a - b) / denom


def check_gradients(
    loss_fn,
    named_params: list[tuple[str, torch.nn.Parameter]],
    rel_tol: float = 1e-4,
    base_step: float = 1e-6,
) -> list[str]:
    """Compare autograd gradients of loss_fn() with central differences.

    Returns a list of failure descriptions (empty = all good). Parameters
    must be float64; loss_fn must be deterministic and smooth.
    """
    for name, p in named_params:
        assert p.dtype == torch.float64, f"{name}: gradient check requires float64"

    params = [p for _, p in named_params]
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)

    failures: list[str] = []
    with torch.no_grad():
        for (name, p), grad in zip(named_params, analytic):
            flat = p.view(-1)
            gflat = (
                torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            )
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = base_step * max(1.0, abs(orig))
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                err = relative_error(gflat[i].item(), fd)
                if err > rel_tol:
                    failures.append(
                        f"{name}[{i}]: analytic={gflat[i].item():.3e} fd={fd:.3e} rel={err:.2e}"
                    )
    return failures
