"""Central finite-difference oracles, independent of autograd."""

import numpy as np
import torch


def relative_close(analytic, numeric, rtol, atol=1e-9):
    return abs(analytic - numeric) <= rtol * max(abs(analytic), abs(numeric)) + atol


def coordinate_check(fn, tensor, n_coords=20, eps=1e-6, rtol=1e-3, seed=0):
    """Compare d fn / d tensor[i] to central differences at random coordinates.

    ``fn`` is a zero-argument closure returning a scalar that reads ``tensor``
    (a leaf with requires_grad). Returns a list of (index, analytic, numeric, ok).
    """
    value = fn()
    (grad,) = torch.autograd.grad(value, tensor)
    rng = np.random.default_rng(seed)
    flat = tensor.data.view(-1)
    idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    out = []
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = grad.view(-1)[i].item()
            out.append((int(i), ana, num, relative_close(ana, num, rtol)))
    return out


def directional_check(fn, params, n_dirs=20, eps=1e-6, rtol=1e-3, seed=0):
    """Compare grad . v with central differences along random directions v over ``params``."""
    value = fn()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    gen = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        ana = sum((g * d).sum() for g, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            up = fn().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            down = fn().item()
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        num = (up - down) / (2 * eps)
        out.append((ana, num, relative_close(ana, num, rtol)))
    return out
