"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cpgm.autodiff import functional
from cpgm.autodiff.tensor import backward
from cpgm.errors import ContractError


@dataclass
class GradcheckReport:
    max_error: float
    per_parameter: dict = field(default_factory=dict)
    coordinates_checked: int = 0

    def passed(self, tol=1e-4):
        return self.max_error < tol

    def worst(self):
        return max(self.per_parameter.items(), key=lambda kv: kv[1], default=(None, 0.0))


def kink_margin(loss_fn):
    """Smallest ``|x|`` fed to any PReLU while evaluating ``loss_fn()``.

    A central difference whose window straddles the kink at 0 averages two
    slopes, so gradient checks should run where this margin is comfortably
    larger than the step times the local input scale.
    """
    functional._kink_watchers.append([])
    try:
        loss_fn()
    finally:
        seen = functional._kink_watchers.pop()
    return min(seen, default=float("inf"))


def _pick_coordinates(param, grad, n_coords, rng):
    size = param.data.size
    if n_coords is None or size <= n_coords:
        return np.arange(size)
    picks = set(rng.choice(size, size=n_coords - 1, replace=False).tolist())
    # always probe the coordinate with the largest analytic gradient
    picks.add(int(np.argmax(np.abs(grad).ravel())))
    return np.array(sorted(picks))


def finite_difference_check(loss_fn, params, step=1e-5, n_coords=None, rng=None, report=False):
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` takes no arguments and returns a scalar :class:`Tensor`
    built from ``params``; it must be deterministic (re-seed any random
    source inside it). The error per coordinate is ``|analytic - numeric| /
    max(1, |numeric|)``. ``n_coords`` limits how many coordinates are probed
    per parameter tensor (all when ``None``).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    params.zero_grad()
    loss = loss_fn()
    again = loss_fn()
    if float(loss.data) != float(again.data):
        raise ContractError("loss function is not deterministic; fix its random seed")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    params.zero_grad()

    per_param = {}
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for idx in _pick_coordinates(p, analytic[name], n_coords, rng):
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(loss_fn().data)
            flat[idx] = orig - step
            down = float(loss_fn().data)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[name].reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            checked += 1
        per_param[name] = worst
    result = GradcheckReport(max(per_param.values(), default=0.0), per_param, checked)
    return result if report else result.max_error
