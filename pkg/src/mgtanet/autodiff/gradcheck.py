"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple[float, float] | None = None  # (analytic, numeric) at the worst element


@dataclass
class GradcheckReport:
    groups: dict[str, GroupResult] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups.values()), default=0.0)

    def passed(self, tol: float) -> bool:
        return all(g.max_rel_error < tol and g.checked > 0 for g in self.groups.values())

    def summary(self) -> str:
        lines = [f"{'group':<48} {'checked':>7} {'kinks':>5} {'max rel err':>12}"]
        for g in self.groups.values():
            lines.append(f"{g.name:<48} {g.checked:>7d} {g.skipped_kinks:>5d} {g.max_rel_error:>12.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(fn: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    with Tape(record_patterns=True) as tape:
        out = fn()
    return float(out.data), tape.patterns


def gradcheck(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-5,
              max_per_tensor: int | None = None, floor: float = 1e-6,
              seed: int = 0, skip_kinks: bool = True) -> GradcheckReport:
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    ``tensors`` are perturbed in place one element at a time (and restored).
    At most ``max_per_tensor`` elements per tensor are probed, chosen with a
    seeded generator. A probe whose +h or -h evaluation flips a discrete
    branch (relu mask, max-pool winner, sampling cell, L1 sign) sits on a kink
    where the derivative is undefined; such probes are counted and replaced.
    """
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    _, base_patterns = _evaluate(fn)
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        order = rng.permutation(flat.size)
        budget = flat.size if max_per_tensor is None else min(max_per_tensor, flat.size)
        res = GroupResult(name, 0.0, 0, 0)
        for idx in order:
            if res.checked >= budget:
                break
            orig = flat[idx]
            flat[idx] = orig + h
            fp, pat_p = _evaluate(fn)
            flat[idx] = orig - h
            fm, pat_m = _evaluate(fn)
            flat[idx] = orig
            if skip_kinks and (pat_p != base_patterns or pat_m != base_patterns):
                res.skipped_kinks += 1
                continue
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[idx])
            err = relative_error(a, numeric, floor)
            if err >= res.max_rel_error:
                res.max_rel_error = err
                res.worst = (a, numeric)
            res.checked += 1
        report.groups[name] = res
    return report
