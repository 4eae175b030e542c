"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, backward


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    mean_rel_error: float
    worst_index: tuple[int, ...]
    checked: int


@dataclass
class CheckReport:
    tolerance: float
    blocks: dict[str, BlockReport] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def worst(self) -> tuple[str, tuple[int, ...]] | None:
        if not self.blocks:
            return None
        b = max(self.blocks.values(), key=lambda r: r.max_rel_error)
        return b.name, b.worst_index

    def failures(self) -> list[str]:
        return [
            f"{b.name}{list(b.worst_index)}: rel err {b.max_rel_error:.3e}"
            for b in self.blocks.values()
            if b.max_rel_error >= self.tolerance
        ]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})"]
        for b in self.blocks.values():
            lines.append(
                f"  {b.name:<28} max {b.max_rel_error:.3e}  mean {b.mean_rel_error:.3e}"
                f"  worst {list(b.worst_index)}  ({b.checked} coords)"
            )
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def analytic_gradients(
    params: Mapping[str, np.ndarray], loss_fn: Callable[[dict[str, Tensor]], Tensor]
) -> dict[str, np.ndarray]:
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    grads = backward(loss_fn(tensors))
    return {k: grads.get(id(t), np.zeros_like(t.data)) for k, t in tensors.items()}


def finite_difference_check(
    params: Mapping[str, np.ndarray],
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    max_coords: int = 10_000,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> CheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a dict of tensors keyed like ``params`` and returns a
    scalar tensor.  When the total parameter count exceeds ``max_coords`` a
    seeded random subset of coordinates is perturbed.  ``analytic`` overrides
    the gradients under test.
    """
    for k, v in params.items():
        if np.asarray(v).dtype != np.float64:
            raise TypeError(f"finite-difference checks need float64 parameters ({k})")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays) -> float:
        return loss_fn({k: Tensor(a) for k, a in arrays.items()}).item()

    try:
        evaluate(base)
    except NonFiniteError as exc:
        raise NonFiniteError(f"loss is non-finite at the base point: {exc}") from exc

    if analytic is None:
        analytic = analytic_gradients(base, loss_fn)

    total = sum(a.size for a in base.values())
    coords: list[tuple[str, int]] = [(k, i) for k, a in base.items() for i in range(a.size)]
    if total > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(total, size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    errors: dict[str, list[tuple[float, int]]] = {k: [] for k in base}
    for name, flat in coords:
        arr = base[name]
        view = arr.reshape(-1)
        old = view[flat]
        view[flat] = old + eps
        plus = evaluate(base)
        view[flat] = old - eps
        minus = evaluate(base)
        view[flat] = old
        numeric = (plus - minus) / (2.0 * eps)
        a = float(np.asarray(analytic[name]).reshape(-1)[flat])
        errors[name].append((relative_error(a, numeric, floor), flat))

    report = CheckReport(tolerance)
    for name, errs in errors.items():
        if not errs:
            continue
        values = np.array([e for e, _ in errs])
        worst = errs[int(values.argmax())][1]
        report.blocks[name] = BlockReport(
            name,
            float(values.max()),
            float(values.mean()),
            tuple(int(i) for i in np.unravel_index(worst, base[name].shape)),
            len(errs),
        )
    return report
