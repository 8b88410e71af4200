"""Central-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from mcncl.numcore.tensor import Tape, TapeTensor


class GradCheckError(RuntimeError):
    """Non-finite value during a check, or a tolerance breach when one was requested."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_path: Optional[str]
    per_param: dict = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


Params = Union[Mapping[str, TapeTensor], Sequence[TapeTensor]]


def _named(params: Params) -> list[tuple[str, TapeTensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param[{i}]", p) for i, p in enumerate(params)]


def _scalar(loss: TapeTensor, path: str) -> float:
    val = np.asarray(loss.values)
    if val.shape != ():
        raise GradCheckError(f"loss must be scalar, got shape {val.shape}", path)
    f = float(val)
    if not np.isfinite(f):
        raise GradCheckError(f"non-finite loss {f} while perturbing {path}", path)
    return f


def grad_check_report(
    loss_fn: Callable[[], TapeTensor],
    params: Params,
    h: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with (f(θ+h) − f(θ−h)) / 2h for every scalar of ``params``.

    The error per scalar is |g_tape − g_fd| / max(1, |g_tape|, |g_fd|).
    ``loss_fn`` must be deterministic and read the parameters in place.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    named = _named(params)
    for _, p in named:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        _scalar(loss, "<unperturbed>")
        tape.backward(loss)

    report = GradCheckReport(max_rel_err=0.0, worst_path=None)
    for name, p in named:
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        if not np.isfinite(analytic).all():
            bad = np.unravel_index(np.flatnonzero(~np.isfinite(analytic))[0], analytic.shape)
            path = f"{name}{list(bad)}"
            raise GradCheckError(f"non-finite tape gradient at {path}", path)
        flat = p.values.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            path = f"{name}[{i}]"
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _scalar(loss_fn(), path)
            flat[i] = orig - h
            f_minus = _scalar(loss_fn(), path)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g_tape = analytic.reshape(-1)[i]
            err = abs(g_tape - g_fd) / max(1.0, abs(g_tape), abs(g_fd))
            worst = max(worst, err)
            if report.worst_path is None or err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_path = path
        report.per_param[name] = worst
        report.n_checked += flat.size
    return report


def grad_check(
    loss_fn: Callable[[], TapeTensor],
    params: Params,
    h: float = 1e-6,
    tolerance: Optional[float] = None,
) -> float:
    """Maximum relative gradient error; raises GradCheckError if ``tolerance`` is exceeded."""
    report = grad_check_report(loss_fn, params, h)
    if tolerance is not None and not report.passed(tolerance):
        raise GradCheckError(
            f"max relative error {report.max_rel_err:.3e} at {report.worst_path} "
            f"exceeds {tolerance:.1e}",
            report.worst_path,
        )
    return report.max_rel_err
