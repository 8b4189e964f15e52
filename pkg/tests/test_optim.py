import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vislang.autodiff import Tensor
from vislang.optim import ADAM_EPS, Adam, GradientNaN, lr_at

from oracles import adam_scalar_reference


def make_adam(value, base_lr=0.1, **kw):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name="w")
    return p, Adam({"w": p}, base_lr=base_lr, **kw)


def test_zero_gradient_leaves_params_unchanged():
    p, opt = make_adam([1.0, -2.0, 3.0])
    before = p.data.copy()
    opt.step({"w": np.zeros(3)})
    assert np.array_equal(p.data, before)
    assert opt.step_count == 1


def test_first_step_bias_corrected():
    p, opt = make_adam([5.0], base_lr=0.1)
    opt.step({"w": np.array([1.0])})
    # m_hat = v_hat = 1 at t=1, so the update is lr / (1 + eps)
    expected = 5.0 - 0.1 / (1.0 + ADAM_EPS)
    assert abs(p.data[0] - expected) < 1e-15


def test_quadratic_convergence_matches_scalar_reference():
    p, opt = make_adam([0.0], base_lr=0.1)
    for _ in range(100):
        opt.step({"w": np.array([2.0 * (p.data[0] - 3.0)])})
    assert abs(p.data[0] - 3.0) < 0.05
    ref = adam_scalar_reference(lambda w: 2.0 * (w - 3.0), 0.0, 0.1, 100)
    assert abs(p.data[0] - ref) < 1e-12


def test_nan_gradient_refused_naming_parameter():
    p, opt = make_adam([1.0])
    before = p.data.copy()
    with pytest.raises(GradientNaN, match="'w'"):
        opt.step({"w": np.array([np.nan])})
    assert np.array_equal(p.data, before)
    assert opt.step_count == 0


def test_step_reads_param_grad():
    p, opt = make_adam([1.0])
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] < 1.0


def test_shape_mismatch_rejected():
    p, opt = make_adam([1.0, 2.0])
    with pytest.raises(ValueError, match="shape"):
        opt.step({"w": np.zeros(3)})


# -- schedule ---------------------------------------------------------------


def sched(base_lr=5e-4, warmup=500, total=2000):
    _, opt = make_adam([0.0], base_lr=base_lr, warmup_steps=warmup, total_steps=total)
    return opt


def test_lr_ramp_start_is_zero():
    assert lr_at(sched(), 0) == 0.0


def test_lr_linear_midpoint():
    assert lr_at(sched(base_lr=5e-4, warmup=500), 250) == pytest.approx(2.5e-4, abs=0)


def test_lr_cosine_endpoint_zero():
    opt = sched(total=2000)
    assert lr_at(opt, 2000) == pytest.approx(0.0, abs=1e-18)


def test_lr_peak_at_warmup():
    opt = sched(base_lr=5e-4, warmup=500, total=2000)
    assert lr_at(opt, 500) == 5e-4


def test_lr_out_of_range_rejected():
    opt = sched(total=100, warmup=10)
    with pytest.raises(ValueError):
        lr_at(opt, -1)
    with pytest.raises(ValueError):
        lr_at(opt, 101)


def test_lr_constant_mode():
    opt = sched(base_lr=0.1, warmup=0, total=0)
    for step in (0, 1, 10, 100000):
        assert lr_at(opt, step) == 0.1


@settings(max_examples=60, deadline=None)
@given(base=st.floats(1e-6, 1.0), warmup=st.integers(1, 400), extra=st.integers(1, 400))
def test_lr_continuous_at_warmup(base, warmup, extra):
    opt = sched(base_lr=base, warmup=warmup, total=warmup + extra)
    gap = abs(lr_at(opt, warmup) - lr_at(opt, warmup - 1))
    assert gap <= base / warmup + 1e-12
    assert lr_at(opt, warmup) == base


@settings(max_examples=40, deadline=None)
@given(warmup=st.integers(0, 50), extra=st.integers(1, 50), base=st.floats(1e-6, 1.0))
def test_lr_monotone_after_warmup(warmup, extra, base):
    opt = sched(base_lr=base, warmup=warmup, total=warmup + extra)
    values = [lr_at(opt, s) for s in range(warmup, warmup + extra + 1)]
    assert all(a >= b - 1e-18 for a, b in zip(values, values[1:]))


def test_lr_closed_form_after_warmup():
    opt = sched(base_lr=1.0, warmup=100, total=300)
    for step in (100, 150, 200, 299, 300):
        expected = 0.5 * (1 + math.cos(math.pi * (step - 100) / 200))
        assert lr_at(opt, step) == pytest.approx(expected, rel=0, abs=1e-15)
