"""Shared test utilities: central finite differences and comparison helpers."""

from __future__ import annotations

import numpy as np


def finite_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise error of a vs b, relative where |b| > 1."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


def check_grads(build_loss, params: dict, tol: float, h: float = 1e-5) -> None:
    """Tape gradients of build_loss(params) match finite differences.

    ``build_loss`` must construct a fresh forward pass from the given
    parameter dict each call (the tape is consumed by backward).
    """
    for p in params.values():
        p.grad = None
    loss = build_loss(params)
    loss.backward()
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached {name}"

        def scalar(x, name=name, p=p):
            saved = p.data
            p.data = x
            try:
                return float(build_loss(params).data)
            finally:
                p.data = saved

        fd = finite_diff(scalar, p.data.copy(), h=h)
        err = rel_err(p.grad, fd)
        assert err <= tol, f"grad mismatch on {name}: rel err {err:.3e} > {tol}"
