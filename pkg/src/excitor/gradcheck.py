"""Finite-difference verification of the autodiff backward pass."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import ContractError, Parameter, Tensor, current_dtype, no_grad


def _analytic_grads(f: Callable[[], Tensor], params: Sequence[Parameter]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar objective, got shape {out.shape}")
    out.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def _numeric_grad(f: Callable[[], Tensor], p: Parameter, h: float) -> np.ndarray:
    flat = p.data.reshape(-1)
    num = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = f().item()
            flat[i] = saved - h
            fm = f().item()
            flat[i] = saved
            num[i] = (fp - fm) / (2.0 * h)
    return num.reshape(p.data.shape)


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    # entries near zero are held to an absolute tolerance (the floor) so
    # finite-difference noise on vanishing gradients does not register
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _validate(params: Sequence[Parameter]) -> None:
    if not params:
        raise ContractError("grad_check needs at least one parameter")
    for p in params:
        if getattr(p, "frozen", False):
            raise ContractError(f"cannot gradient-check frozen parameter {p.name!r}")
        if not p.requires_grad:
            raise ContractError(f"parameter {p.name!r} does not require grad")
    if current_dtype() != np.float64:
        raise ContractError("grad_check requires f64 precision; call set_precision('f64') first")


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-4,
               floor: float = 1e-5) -> float:
    """Max relative error between analytic gradients of f() and centered
    differences, over every element of every parameter. f must rebuild its
    graph from current parameter values on each call."""
    params = list(params)
    _validate(params)
    analytic = _analytic_grads(f, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = _numeric_grad(f, p, h)
        worst = max(worst, _max_rel_err(a, n, floor))
    return worst


def grad_check_groups(
    f: Callable[[], Tensor],
    groups: Mapping[str, Sequence[Parameter]],
    h: float = 1e-4,
    floor: float = 1e-5,
) -> dict[str, float]:
    """Per-group max relative error; one analytic pass shared by all groups."""
    flat: list[Parameter] = []
    for name, ps in groups.items():
        if not ps:
            raise ContractError(f"gradient-check group {name!r} is empty")
        flat.extend(ps)
    _validate(flat)
    analytic = dict(zip(map(id, flat), _analytic_grads(f, flat)))
    report: dict[str, float] = {}
    for name, ps in groups.items():
        worst = 0.0
        for p in ps:
            n = _numeric_grad(f, p, h)
            worst = max(worst, _max_rel_err(analytic[id(p)], n, floor))
        report[name] = worst
    return report


def warm_parameters(params: Sequence[Parameter], seed: int = 0, std: float = 0.3) -> None:
    """Move parameters to a generic healthy-magnitude point so derivative
    checks are not dominated by the near-zero cold-start regime."""
    from .rng import SplitMix64, derive_seed

    rng = SplitMix64(derive_seed(seed, "gradcheck-warm"))
    for p in params:
        p.data = np.asarray(rng.normal(p.data.shape, std=std), dtype=p.data.dtype)
