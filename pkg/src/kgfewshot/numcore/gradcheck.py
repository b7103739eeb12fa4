"""Central finite-difference check of tape gradients."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, no_grad


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self):
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def __str__(self):
        name, err = self.worst
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: {len(self.errors)} params, worst {name} rel.err {err:.2e} (tol {self.tol:g})"


def relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(params, loss_fn, tol=1e-4, step=1e-5, names=None, analytic=None, order=2):
    """Compare analytic and central-difference gradients.

    ``order`` selects the two-point (2) or four-point (4) central stencil;
    the latter keeps truncation error negligible at steps large enough to
    avoid cancellation noise.

    ``loss_fn()`` must rebuild the forward pass from ``params`` and return a
    scalar Tensor. ``analytic`` may override the gradients under test
    (mapping name -> array); this is how a corrupted gradient is injected
    for negative controls.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    names = list(params) if names is None else list(names)
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.item()):
        raise NonFiniteLossError(f"loss is {loss.item()}")
    backward(loss)
    grads = {n: params[n].grad.copy() for n in names}
    if analytic:
        grads.update({n: np.asarray(v, dtype=np.float64) for n, v in analytic.items()})
    report = GradCheckReport(tol=tol)
    with no_grad():
        for n in names:
            value = params[n].data
            numeric = np.zeros_like(value)
            flat = value.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                vals = {}
                for off in ((1, -1) if order == 2 else (2, 1, -1, -2)):
                    flat[k] = orig + off * step
                    vals[off] = loss_fn().item()
                flat[k] = orig
                if not all(np.isfinite(v) for v in vals.values()):
                    raise NonFiniteLossError(f"non-finite loss while perturbing {n}")
                if order == 2:
                    numeric.reshape(-1)[k] = (vals[1] - vals[-1]) / (2 * step)
                else:
                    numeric.reshape(-1)[k] = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * step)
            err = relative_error(grads[n], numeric)
            report.errors[n] = float(err.max()) if err.size else 0.0
    return report
