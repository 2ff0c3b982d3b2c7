"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np
import torch


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_param_check(loss_fn, params, picks, eps=1e-6):
    """Compare autograd with central differences at ``picks``: list of (param_index, flat_index).

    Returns the list of relative errors.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    errs = []
    with torch.no_grad():
        for pi, fi in picks:
            flat = params[pi].view(-1)
            orig = flat[fi].item()
            flat[fi] = orig + eps
            up = loss_fn().item()
            flat[fi] = orig - eps
            down = loss_fn().item()
            flat[fi] = orig
            g = grads[pi]
            analytic = 0.0 if g is None else g.reshape(-1)[fi].item()
            errs.append(rel_err((up - down) / (2 * eps), analytic))
    return errs


def random_picks(params, n, rng):
    sizes = np.array([p.numel() for p in params], dtype=float)
    out = []
    for _ in range(n):
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        out.append((pi, int(rng.integers(0, params[pi].numel()))))
    return out
