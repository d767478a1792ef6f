"""Central finite differences, independent of autograd."""

import torch


def central_diff(fn, tensors, eps=1e-4):
    """d fn() / d t for each tensor in ``tensors`` (perturbed in place)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    """max |a - n| / max |n| over all entries of all tensors."""
    num = max(float((a - n).abs().max()) for a, n in zip(analytic, numeric))
    den = max(float(n.abs().max()) for n in numeric)
    return num / max(den, 1e-12)
