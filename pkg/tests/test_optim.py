"""Optimizer: decoupled decay identity, frozen-parameter invariance,
convex convergence oracle, schedule shape."""

import math

import numpy as np
import pytest

from excitor.optim import AdamW, GradientError, LrSchedule
from excitor.tensor import ContractError, Parameter


def test_zero_gradient_decay_identity():
    # zero gradient, zero moments: the whole update is the decay term,
    # so one step scales the parameter by exactly (1 - lr * wd)
    p = Parameter(np.array([2.0, -3.0, 0.5]))
    opt = AdamW([p], lr=0.1, weight_decay=0.02)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.allclose(p.data, np.array([2.0, -3.0, 0.5]) * (1 - 0.1 * 0.02), atol=1e-12)


def test_no_decay_into_moments():
    # decoupled: with wd on and zero grads the moments must stay zero
    p = Parameter(np.ones(4))
    opt = AdamW([p], lr=0.05, weight_decay=0.5)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.all(opt._m[0] == 0.0)
    assert np.all(opt._v[0] == 0.0)


def test_frozen_param_bit_unchanged():
    p = Parameter(np.array([1.0, 2.0]), frozen=True)
    q = Parameter(np.array([1.0, 2.0]))
    before = p.data.copy()
    opt = AdamW([p, q], lr=0.1, weight_decay=0.1)
    p.grad = np.full(2, 100.0)
    q.grad = np.full(2, 1.0)
    opt.step()
    assert p.data.tobytes() == before.tobytes()
    assert not np.array_equal(q.data, before)


def test_param_without_grad_skipped_entirely():
    # no gradient at all: no update and no decay either
    p = Parameter(np.array([5.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.9)
    opt.step()
    assert p.data[0] == 5.0


def test_quadratic_convergence():
    # 1-D convex oracle: f(x) = 0.5 (x - 3)^2 reaches the minimum
    p = Parameter(np.array([-4.0]))
    opt = AdamW([p], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        p.grad = p.data - 3.0
        opt.step()
    assert abs(p.data[0] - 3.0) < 1e-3


def test_nan_gradient_aborts_with_step_index():
    p = Parameter(np.ones(2))
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(GradientError) as err:
        opt.step()
    assert "step 1" in str(err.value)


def test_duplicate_params_deduplicated():
    p = Parameter(np.ones(2))
    opt = AdamW([p, p], lr=0.1)
    assert len(opt.params) == 1


def test_optimizer_validation():
    p = Parameter(np.ones(1))
    with pytest.raises(ContractError):
        AdamW([p], lr=0.0)
    with pytest.raises(ContractError):
        AdamW([p], lr=0.1, weight_decay=-1.0)
    with pytest.raises(ContractError):
        AdamW([p], lr=0.1, betas=(1.0, 0.9))
    with pytest.raises(ContractError):
        AdamW([])


def test_per_step_lr_override():
    p = Parameter(np.array([1.0]))
    opt = AdamW([p], lr=1.0)
    p.grad = np.array([1.0])
    opt.step(0.0)  # zero rate: nothing can move
    assert p.data[0] == 1.0


def test_schedule_linear_warmup_then_cosine():
    s = LrSchedule(base_lr=2.0, total_steps=10, warmup_steps=4)
    # warmup hits the base rate exactly at the last warmup step
    assert np.isclose(s.value(0), 2.0 * 1 / 4)
    assert np.isclose(s.value(3), 2.0)
    # cosine: halfway through decay the rate is half the base
    assert np.isclose(s.value(7), 2.0 * 0.5 * (1 + math.cos(math.pi * 0.5)))
    # final step is near zero
    assert s.value(9) < s.value(8) < s.value(4)


def test_schedule_no_warmup_and_all_warmup():
    s = LrSchedule(1.0, 4, 0)
    assert np.isclose(s.value(0), 1.0)
    s2 = LrSchedule(1.0, 4, 4)
    for t in range(4):
        assert np.isclose(s2.value(t), 1.0 * (t + 1) / 4)


def test_schedule_bounds_checked():
    s = LrSchedule(1.0, 5, 2)
    with pytest.raises(ContractError):
        s.value(-1)
    with pytest.raises(ContractError):
        s.value(5)
    with pytest.raises(ContractError):
        LrSchedule(1.0, 5, 6)


def test_adamw_matches_reference_step():
    # one-step oracle: textbook AdamW update computed by hand
    x0, g, lr, b1, b2, eps, wd = 1.5, 0.3, 0.01, 0.9, 0.999, 1e-8, 0.1
    p = Parameter(np.array([x0]))
    opt = AdamW([p], lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps)
    p.grad = np.array([g])
    opt.step()
    m = (1 - b1) * g / (1 - b1)
    v = (1 - b2) * g * g / (1 - b2)
    want = x0 - lr * (m / (np.sqrt(v) + eps) + wd * x0)
    assert np.isclose(p.data[0], want, atol=1e-12)
