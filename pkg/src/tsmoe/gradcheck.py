"""Finite-difference verification of the reverse-mode gradients.

The checker rebuilds the loss graph from plain arrays on every probe, so the
central-difference oracle never touches the code path it is validating.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericsError, Tensor, backward

REL_ERR_FLOOR = 1e-8


def finite_difference_gradient(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` maps an ndarray to a float; each coordinate is probed at x +- eps.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xflat = x.reshape(-1)
    for i in range(x.size):
        orig = xflat[i]
        xflat[i] = orig + eps
        hi = float(f(x))
        xflat[i] = orig - eps
        lo = float(f(x))
        xflat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericsError(f"function returned a non-finite value at probe {i}")
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_checked: int
    n_excluded: int


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    tol: float
    params: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    @property
    def n_excluded(self):
        return sum(p.n_excluded for p in self.params)

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"gradient check {status}: max rel err {self.max_rel_err:.3e} "
                f"({self.worst_param}), tol {self.tol:.1e}, "
                f"{self.n_excluded} coordinate(s) excluded")


def gradient_check(build_loss, params, eps=1e-5, tol=1e-6, exclude=None):
    """Compare analytic gradients against the central-difference oracle.

    ``build_loss`` takes a dict name -> ndarray and returns a scalar loss
    Tensor built on a fresh graph. ``exclude`` optionally maps names to
    boolean masks of coordinates to skip (e.g. near a top-k selection tie,
    where the loss is not differentiable). Failures land in the report, the
    function itself does not raise on mismatch.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    leaves = {k: Tensor(v.copy(), track=True) for k, v in values.items()}
    loss = build_loss({k: t for k, t in leaves.items()})
    analytic = backward(loss, leaves)

    report = GradCheckReport(max_rel_err=0.0, worst_param="", tol=tol)
    for name in values:
        def f(x, _name=name):
            probe = {k: (x if k == _name else v) for k, v in values.items()}
            probe_leaves = {k: Tensor(np.asarray(v, dtype=np.float64).copy(), track=True)
                            for k, v in probe.items()}
            return float(build_loss(probe_leaves).data)

        numeric = finite_difference_gradient(f, values[name], eps)
        err = relative_error(analytic[name], numeric)
        mask = None if exclude is None else exclude.get(name)
        n_excluded = 0
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            n_excluded = int(mask.sum())
            err = np.where(mask, 0.0, err)
        worst = float(err.max()) if err.size else 0.0
        report.params.append(ParamCheck(name, worst, int(err.size) - n_excluded,
                                        n_excluded))
        if worst > report.max_rel_err or report.worst_param == "":
            report.max_rel_err = worst
            report.worst_param = name
    return report
