"""Shared test utilities, chiefly the finite-difference gradient checker."""

import numpy as np

from grafter.tensor import Tape


def analytic_gradients(loss_fn, params):
    """Gradients of loss_fn() w.r.t. each param Tensor, via one tape pass."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_gradients(loss_fn, params, eps):
    """Central finite differences, evaluated without any tape."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(a, n, floor=1e-8):
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), floor)
    return float(np.abs(a - n).max(initial=0.0)) / scale


def check_gradients(loss_fn, params, eps=1e-6, tol=1e-6):
    """Assert analytic and numeric gradients agree for every parameter.

    loss_fn must rebuild the computation from the params' current .data each
    time it is called and return a 1x1 Tensor.
    """
    analytic = analytic_gradients(loss_fn, params)
    numeric = numeric_gradients(loss_fn, params, eps)
    worst = 0.0
    for p, a, n in zip(params, analytic, numeric):
        err = relative_error(a, n)
        assert err <= tol, (
            f"gradient mismatch for param {p.shape}: rel err {err:.3e} > {tol:.1e}\n"
            f"analytic:\n{a}\nnumeric:\n{n}"
        )
        worst = max(worst, err)
    return worst
