"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(projection)).sum()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float | None = None,
    rel_step: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection. The error
    for each input is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, floor)`` and the maximum over inputs is returned. With
    ``max_elements`` only that many randomly chosen entries per input are
    perturbed. Inputs must be float64; plain arrays are wrapped.
    """
    rng = np.random.default_rng(seed)
    inputs = [t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.requires_grad = True
        t.grad = None

    probe = fn(*inputs)
    projection = None if probe.size == 1 else rng.standard_normal(probe.shape)
    loss = _scalarize(probe, projection)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        return float(_scalarize(fn(*inputs), projection).data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        a_sel = a.reshape(-1)[idx]
        n_sel = np.empty_like(a_sel)
        for k, i in enumerate(idx):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            n_sel[k] = (fp - fm) / (2.0 * h)
        scale = max(np.abs(a_sel).max(initial=0.0), np.abs(n_sel).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(a_sel - n_sel).max(initial=0.0) / scale))
    if tolerance is not None and worst >= tolerance:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} >= {tolerance:.1e}")
    return worst
