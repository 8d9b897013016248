"""Central-difference gradient verification for layers.

The check runs the layer in float64, compares analytic gradients against
central finite differences of a fixed random linear functional of the
output, and reports one relative error per parameter group plus one for
the input.  A non-finite value anywhere is reported as a failure rather
than raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    ok: bool
    tol: float
    input_error: float
    param_errors: dict[str, float] = field(default_factory=dict)
    note: str = ""

    def max_error(self) -> float:
        errs = [self.input_error, *self.param_errors.values()]
        return max(errs) if errs else 0.0

    def __str__(self) -> str:
        parts = [f"input={self.input_error:.3e}"]
        parts += [f"{k}={v:.3e}" for k, v in self.param_errors.items()]
        status = "ok" if self.ok else "FAIL"
        msg = f"grad_check {status} (tol={self.tol:g}): " + ", ".join(parts)
        return msg + (f" [{self.note}]" if self.note else "")


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(a), initial=0.0)),
                float(np.max(np.abs(n), initial=0.0)), 1e-8)
    return float(np.max(np.abs(a - n), initial=0.0)) / denom


def grad_check(layer, input_shape, *, tol: float = 1e-4, seed: int = 0,
               train: bool = True, h: float = 1e-3) -> GradCheckReport:
    """Verify ``layer.backward`` against central differences.

    The loss is ``sum(output * c)`` for a fixed random ``c``, which keeps
    every output element in play and breaks symmetries (a plain sum has an
    identically zero input gradient through batch normalization).
    Stochastic layers see an identically seeded generator on every forward
    call so the finite differences probe one fixed realization.
    """
    rng = np.random.default_rng(seed)
    fwd_seed = int(rng.integers(2**31))
    x = rng.normal(0.0, 1.0, input_shape).astype(np.float64)
    layer.cast_(np.float64)

    def run(xv: np.ndarray) -> np.ndarray:
        return layer.forward(xv, train=train, rng=np.random.default_rng(fwd_seed))

    try:
        y0 = run(x)
        c = np.random.default_rng(seed + 1).normal(0.0, 1.0, y0.shape)

        layer.zero_grads()
        run(x)
        gx = layer.backward(c.copy())
        analytic_params = {p.name: p.grad.copy() for p in layer.params()}

        def loss() -> float:
            return float(np.sum(run(x) * c))

        def fd_grad(arr: np.ndarray) -> np.ndarray:
            # arr is mutated in place element by element; the closure over
            # x and the layer's own parameter arrays picks the change up.
            flat = arr.reshape(-1)
            out = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss()
                flat[i] = orig - h
                lm = loss()
                flat[i] = orig
                out[i] = (lp - lm) / (2.0 * h)
            return out.reshape(arr.shape)

        numeric_x = fd_grad(x)
        numeric_params = {p.name: fd_grad(p.value) for p in layer.params()}
    finally:
        layer.cast_(np.float32)

    pieces = [gx, numeric_x, *analytic_params.values(), *numeric_params.values()]
    if any(not np.all(np.isfinite(arr)) for arr in pieces if arr is not None):
        return GradCheckReport(False, tol, float("inf"),
                               note="non-finite value encountered")

    input_err = _rel_error(gx, numeric_x) if gx is not None else 0.0
    param_errs = {
        name: _rel_error(analytic_params[name], numeric_params[name])
        for name in analytic_params
    }
    ok = input_err < tol and all(e < tol for e in param_errs.values())
    return GradCheckReport(ok, tol, input_err, param_errs)
