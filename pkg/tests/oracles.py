"""Independent reference implementations used by several test modules."""

import math

import numpy as np
import torch

from mudeepiqa.train import loss_terms


def tau_b_bruteforce(x, y) -> float:
    """Kendall tau-b by explicit pair counting, O(n^2)."""
    conc = disc = tx = ty = 0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx == dy:
                conc += 1
            else:
                disc += 1
    return (conc - disc) / math.sqrt((conc + disc + tx) * (conc + disc + ty))


def gradient_mismatches(net, x, target, per_tensor=12, h=1e-6, rtol=1e-4, seed=1):
    """Compare autograd against central differences of E_wp on sampled coordinates.

    ``net`` should be float64 in eval mode. Returns (number checked, mismatches).
    """

    def loss():
        y, a = net(x)
        e_w, e_p = loss_terms(y, a, target)
        return e_w + e_p

    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    checked, bad = 0, []
    for p in net.parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
            fd = (up - down) / (2 * h)
            g = grad[i].item()
            checked += 1
            if abs(g - fd) > rtol * max(abs(g), abs(fd), 1e-3):
                bad.append((int(i), g, fd))
    return checked, bad
