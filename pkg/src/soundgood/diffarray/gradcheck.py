"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .core import DiffArray, Tape, backward, no_grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_gradients(f: Callable[[DiffArray], DiffArray], x: DiffArray, h: float = 1e-5) -> float:
    """Max relative error between backward and central differences of ``f`` at ``x``.

    ``f`` maps a DiffArray to a scalar DiffArray. Every coordinate of ``x`` is
    perturbed by ``+-h``.
    """
    base = np.array(x.values, dtype=np.float64)
    probe = DiffArray(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    backward(y, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy().reshape(-1)
            shifted[i] += h
            up = f(DiffArray(shifted.reshape(base.shape))).item()
            shifted[i] -= 2 * h
            down = f(DiffArray(shifted.reshape(base.shape))).item()
            flat[i] = (up - down) / (2 * h)
    return float(np.max(_rel_err(analytic, numeric)))


def check_parameter_gradients(
    loss_fn: Callable[[], DiffArray],
    params: Iterable[DiffArray],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Check gradients of a closure with respect to parameters it reads in place.

    Returns the max relative error per parameter (keyed by ``name`` or index).
    With ``max_coords`` set, a seeded random subset of coordinates is probed
    in each parameter.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        y = loss_fn()
    backward(y, tape)

    rng = np.random.default_rng(seed)
    errors = {}
    for idx, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        with no_grad():
            for n, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[n] = (up - down) / (2 * h)
        err = _rel_err(analytic.reshape(-1)[coords], numeric)
        errors[p.name or str(idx)] = float(err.max()) if err.size else 0.0
    for p in params:
        p.grad = None
    return errors
