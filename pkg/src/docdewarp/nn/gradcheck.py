"""Central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from docdewarp.nn.tensor import Tensor, no_grad, zero_grads


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    rel_tol: float
    entries: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> list[ParamCheck]:
        return [e for e in self.entries if not e.passed]

    def table(self) -> str:
        lines = [f"{'parameter':<48} {'checked':>7} {'max rel err':>12}  status"]
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(f"{e.name:<48} {e.checked:>7} {e.max_rel_error:>12.3e}  {status}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
               rel_tol: float = 1e-4, eps: float = 1e-6, max_entries: int | None = None,
               floor: float = 1e-6, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``params`` should hold float64 data. ``max_entries`` caps how many
    elements of each parameter are probed (chosen at random); ``None``
    probes all of them. ``floor`` keeps the relative error meaningful for
    gradients that are numerically zero.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    named = params.items() if isinstance(params, dict) else ((p.name or f"param{i}", p) for i, p in enumerate(params))
    named = list(named)

    zero_grads(p for _, p in named)
    loss_fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    report = GradCheckReport(rel_tol=rel_tol)
    for name, p in named:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = float(loss_fn().data)
                flat[i] = orig - eps
                f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric, floor))
        report.entries.append(ParamCheck(name, worst, int(len(idx)), worst <= rel_tol))
    zero_grads(p for _, p in named)
    return report
