"""Central finite differences, kept independent of autograd."""
import numpy as np
import torch


def central_difference(fn, tensor, indices=None, eps=1e-6):
    """d fn() / d tensor.flat[i] for each i in ``indices``; ``fn`` reads ``tensor`` in place."""
    flat = tensor.data.view(-1)
    if indices is None:
        indices = range(flat.numel())
    grads = []
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            grads.append((up - down) / (2 * eps))
    return np.array(grads)


def autograd_at(fn, tensor, indices=None):
    tensor.grad = None
    fn().backward()
    g = tensor.grad.detach().reshape(-1).numpy()
    return g if indices is None else g[list(indices)]
