"""Kernel maximum mean discrepancy between per-domain code sets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore.ops import take_rows, weighted_sum
from .diffcore.tensor import Tensor, as_tensor, make_op


@dataclass(frozen=True)
class KernelSpec:
    """RBF bandwidths and how the per-bandwidth kernels are combined."""

    bandwidths: tuple[float, ...] = (1.0, 5.0, 10.0)
    combination: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
        if not self.bandwidths:
            raise ValueError("at least one bandwidth is required")
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be positive")
        if self.combination not in ("mean", "sum"):
            raise ValueError(f"combination must be 'mean' or 'sum', got {self.combination!r}")

    @property
    def weights(self) -> tuple[float, ...]:
        w = 1.0 / len(self.bandwidths) if self.combination == "mean" else 1.0
        return (w,) * len(self.bandwidths)


def rbf_kernel(a, b, bandwidth: float) -> float:
    """``exp(-||a - b||^2 / (2 * bandwidth))``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * bandwidth)))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return (diff * diff).sum(axis=-1)


def _kernel_mean(x, y, kernel: KernelSpec):
    """Mean of the combined kernel over all (x_i, y_j) pairs, plus per-bandwidth matrices."""
    sq = _sq_dists(x, y)
    mats = [np.exp(-sq / (2.0 * bw)) for bw in kernel.bandwidths]
    combined = sum(w * m for w, m in zip(kernel.weights, mats))
    # fsum makes the reduction order-free, so swapping the two sets is bit-exact
    return math.fsum(combined.ravel().tolist()) / combined.size, mats


def _kernel_mean_grads(x, y, mats, kernel: KernelSpec, coef: float):
    """Gradients of ``coef * sum_ij k(x_i, y_j)`` w.r.t. ``x`` and ``y``."""
    gx = np.zeros_like(x)
    gy = np.zeros_like(y)
    for bw, w, m in zip(kernel.bandwidths, kernel.weights, mats):
        g = coef * w * m / bw
        gx += g @ y - g.sum(axis=1)[:, None] * x
        gy += g.T @ x - g.sum(axis=0)[:, None] * y
    return gx, gy


def _check_sets(h_l: np.ndarray, h_t: np.ndarray) -> None:
    if h_l.ndim != 2 or h_t.ndim != 2:
        raise ValueError("code sets must be 2-D (n, d)")
    if h_l.shape[0] < 1 or h_t.shape[0] < 1:
        raise ValueError("code sets must be non-empty")
    if h_l.shape[1] != h_t.shape[1]:
        raise ValueError(f"code dimension mismatch: {h_l.shape[1]} vs {h_t.shape[1]}")


def mmd_squared(h_l, h_t, kernel: KernelSpec = KernelSpec()) -> Tensor:
    """Biased (V-statistic) squared MMD between two code sets, clamped at 0."""
    a, b = as_tensor(h_l), as_tensor(h_t)
    _check_sets(a.data, b.data)
    n_l, n_t = a.shape[0], b.shape[0]
    k_ll, m_ll = _kernel_mean(a.data, a.data, kernel)
    k_tt, m_tt = _kernel_mean(b.data, b.data, kernel)
    k_lt, m_lt = _kernel_mean(a.data, b.data, kernel)
    raw = k_ll + k_tt - 2.0 * k_lt
    value = np.asarray(max(raw, 0.0))

    def back(g):
        if raw <= 0.0:
            return np.zeros_like(a.data), np.zeros_like(b.data)
        ga1, ga2 = _kernel_mean_grads(a.data, a.data, m_ll, kernel, 1.0 / n_l**2)
        gb1, gb2 = _kernel_mean_grads(b.data, b.data, m_tt, kernel, 1.0 / n_t**2)
        gac, gbc = _kernel_mean_grads(a.data, b.data, m_lt, kernel, -2.0 / (n_l * n_t))
        return g * (ga1 + ga2 + gac), g * (gb1 + gb2 + gbc)

    return make_op(value, (a, b), back, "mmd_squared")


def _root(x: Tensor) -> Tensor:
    r = float(np.sqrt(x.data))

    def back(g):
        return (g * 0.5 / r if r > 0 else np.zeros_like(x.data),)

    return make_op(np.asarray(r), (x,), back, "sqrt")


def multi_domain_mmd(code_sets: Sequence, kernel: KernelSpec = KernelSpec(), form: str = "squared") -> Tensor:
    """Average pairwise discrepancy over all ordered domain pairs.

    ``(1/K^2) * sum_{i,j} MMD(H_i, H_j)``; diagonal terms are zero and each
    unordered pair is counted twice.  ``form="squared"`` uses MMD^2 per pair,
    ``form="root"`` its square root.
    """
    if form not in ("squared", "root"):
        raise ValueError(f"form must be 'squared' or 'root', got {form!r}")
    sets = [as_tensor(h) for h in code_sets]
    k = len(sets)
    if k < 2:
        raise ValueError("multi-domain MMD needs at least 2 domains")
    terms = []
    for i in range(k):
        for j in range(i + 1, k):
            term = mmd_squared(sets[i], sets[j], kernel)
            terms.append(_root(term) if form == "root" else term)
    return weighted_sum(terms, [2.0 / k**2] * len(terms))


def grouped_mmd(codes: Tensor, domain_labels, kernel: KernelSpec = KernelSpec(), form: str = "squared") -> Tensor:
    """Split a batch of codes by domain label and apply :func:`multi_domain_mmd`."""
    labels = np.asarray(domain_labels)
    groups = [take_rows(codes, np.flatnonzero(labels == d)) for d in np.unique(labels)]
    return multi_domain_mmd(groups, kernel, form)
