"""Central finite-difference gradient checking.

Works on any closure that rebuilds the loss from current parameter values.
Parameters are perturbed in place through their flat storage view, so the
closure must read the live tensors (no caching of forward results).
"""

import torch

EPS = 1e-5
FLOOR = 1e-6


def analytic_grads(loss_fn, params):
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
            for _, p in params]


def max_relative_error(loss_fn, params, eps=EPS, floor=FLOOR):
    """Returns (worst relative error, description of the worst coordinate).

    Error metric: |fd - analytic| / max(|fd|, |analytic|, floor). The floor
    keeps coordinates with a genuinely tiny gradient from dividing by zero.
    """
    grads = analytic_grads(loss_fn, params)
    worst = (0.0, "no parameters")
    with torch.no_grad():
        for (name, p), grad in zip(params, grads):
            flat = p.data.view(-1)
            flat_grad = grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                an = float(flat_grad[i])
                rel = abs(fd - an) / max(abs(fd), abs(an), floor)
                if rel > worst[0]:
                    worst = (rel, f"{name}[{i}]: fd={fd:.3e} analytic={an:.3e}")
    return worst
