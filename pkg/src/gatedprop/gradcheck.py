"""Central finite-difference verification of recorded gradients.

Runs in double precision: the caller builds its parameters as float64
tensors and hands over a closure that recomputes the scalar loss from
scratch. Analytic gradients come from one taped backward pass; each
checked coordinate is then perturbed by +/-step and the symmetric
difference quotient is compared against the recorded value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad

REL_FLOOR = 1e-6


@dataclass
class TensorCheck:
    name: str
    checked: int
    max_rel_err: float
    worst_index: int
    worst_fd: float
    worst_analytic: float


@dataclass
class GradcheckReport:
    tolerance: float
    step: float
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def failures(self):
        return [t for t in self.tensors if t.max_rel_err >= self.tolerance]

    def format_lines(self):
        lines = []
        for t in sorted(self.tensors, key=lambda t: -t.max_rel_err):
            mark = "ok  " if t.max_rel_err < self.tolerance else "FAIL"
            lines.append(
                f"{mark} {t.name:<32} checked={t.checked:<3d} max_rel_err={t.max_rel_err:.3e} "
                f"(fd={t.worst_fd:+.6e} got={t.worst_analytic:+.6e} @ {t.worst_index})"
            )
        lines.append(f"overall max_rel_err={self.max_rel_err:.3e} tolerance={self.tolerance:.1e} "
                     f"-> {'PASS' if self.passed else 'FAIL'}")
        return lines


def _rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), REL_FLOOR)


def check_gradients(loss_fn, params, tolerance=1e-3, step=1e-4, max_per_tensor=64, seed=0):
    """Compare recorded gradients of ``loss_fn()`` against central differences.

    params: list of (name, Tensor) pairs, float64, requires_grad=True.
    loss_fn: recomputes the scalar loss from the current parameter values.
    A random subsample of at most ``max_per_tensor`` coordinates is probed
    per tensor.
    """
    for name, p in params:
        if p.data.dtype != np.float64:
            raise ContractError(f"gradcheck requires float64 parameters, got {p.data.dtype} for {name}")
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance, step=step)
    for name, p in params:
        flat = p.data.reshape(-1)
        k = min(max_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=k, replace=False) if k < flat.size else np.arange(flat.size)
        an_flat = analytic[name].reshape(-1)
        worst = TensorCheck(name, k, 0.0, -1, 0.0, 0.0)
        for i in idxs:
            keep = flat[i]
            with no_grad():
                flat[i] = keep + step
                lp = loss_fn().item()
                flat[i] = keep - step
                lm = loss_fn().item()
            flat[i] = keep
            fd = (lp - lm) / (2.0 * step)
            err = _rel_err(fd, an_flat[i])
            if err > worst.max_rel_err:
                worst.max_rel_err = err
                worst.worst_index = int(i)
                worst.worst_fd = float(fd)
                worst.worst_analytic = float(an_flat[i])
        report.tensors.append(worst)
    return report


def quick_check(loss_fn, tensors, **kw):
    """Convenience wrapper for op-level tests: tensors is a dict name->Tensor."""
    return check_gradients(loss_fn, list(tensors.items()), **kw)
