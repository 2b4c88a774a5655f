"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, no_grad, record_branches, replay_branches


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> max relative error
    tolerance: float = 1e-4
    coords_checked: dict = field(default_factory=dict)
    coords_frozen: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list:
        out = []
        for name, err in self.errors.items():
            status = "ok" if err <= self.tolerance else "FAIL"
            frozen = self.coords_frozen.get(name, 0)
            out.append(f"{name:<48} n={self.coords_checked[name]:<3d} frozen={frozen:<3d} "
                       f"max_rel_err={err:.3e} {status}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: max relative error {self.max_error:.3e} (tolerance {self.tolerance:.0e})")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating.

    Central-difference roundoff is about eps*|f|/h, so callers scale ``floor``
    with the magnitude of the checked function.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor] | Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``fn()`` with central differences.

    ``fn`` is re-evaluated after each perturbation of the tensors in
    ``inputs``, so it must close over them. Tensors must be float64. At most
    ``max_coords`` randomly chosen coordinates per tensor are probed.

    When a +/- perturbation flips a ReLU mask, max-pool argmax or loss clamp
    anywhere in the graph, the difference straddles a kink. Such coordinates
    are re-evaluated with the branch choices frozen at the unperturbed point,
    which differentiates the same smooth piece backprop differentiates, and
    are counted in ``coords_frozen``.
    """
    if not isinstance(inputs, Mapping):
        inputs = {f"input{i}": t for i, t in enumerate(inputs)}
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise ConfigurationError(f"grad_check needs float64 tensors; {name} is {t.dtype}")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    with record_branches() as base:
        out = fn()
    if out.size != 1:
        raise ConfigurationError(f"grad_check function must return a scalar, got {out.shape}")
    f0 = abs(out.item())
    out.backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for name, t in inputs.items()}

    def evaluate() -> tuple:
        with record_branches() as seen:
            value = fn().item()
        return value, _same_branches(seen, base)

    def evaluate_frozen() -> float:
        with replay_branches(base):
            return fn().item()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    floor = 1e-6 * max(1.0, f0)
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        k = min(max_coords, flat.size)
        idx = np.sort(rng.choice(flat.size, size=k, replace=False))
        numeric = np.empty(k)
        frozen = 0
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                f_plus, same_plus = evaluate()
                flat[i] = orig - step
                f_minus, same_minus = evaluate()
                if not (same_plus and same_minus):
                    frozen += 1
                    f_minus = evaluate_frozen()
                    flat[i] = orig + step
                    f_plus = evaluate_frozen()
                flat[i] = orig
                numeric[n] = (f_plus - f_minus) / (2 * step)
        err = relative_error(analytic[name].reshape(-1)[idx], numeric, floor=floor)
        report.errors[name] = float(err.max()) if k else 0.0
        report.coords_checked[name] = k
        report.coords_frozen[name] = frozen
    return report
