"""Central finite-difference check of autograd gradients."""
from typing import Callable, Sequence

import torch


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                            eps: float = 1e-5) -> float:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Every tensor in ``tensors`` must be a leaf with ``requires_grad``. Returns
    the largest normwise relative error ``|g - n|_inf / max(|g|_inf, |n|_inf)``
    over the tensors. Run in float64; the loss must be deterministic.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            numeric = torch.zeros_like(t)
            flat, nflat = t.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
            scale = max(a.abs().max().item(), numeric.abs().max().item())
            if scale == 0.0:
                continue
            worst = max(worst, (a - numeric).abs().max().item() / scale)
    return worst
