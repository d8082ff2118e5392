import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowemg.model import ModelConfig, VelocityNet
from flowemg.sampler import (IntegrationError, SampleRequest, SolverConfig, balanced_labels,
                             bench_json, bench_throughput, guided_velocity, integrate, nfe_plan,
                             sample_batch)


class Field:
    """Callable velocity stub that counts forward passes."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x, t, y):
        self.calls += 1
        return self.fn(np.asarray(x, dtype=np.float64), t, np.asarray(y))


def run(fn, x0, method, budget, w=1.0):
    x0 = np.asarray(x0, dtype=np.float64)
    x, _ = integrate(Field(fn), x0, np.ones(1, int), SolverConfig(method, budget, w))
    return x


# --- fixed-answer examples ------------------------------------------------------


@pytest.mark.parametrize("method,budget", [("euler", 7), ("heun", 8), ("rk4", 12)])
def test_constant_field_exact(method, budget):
    c = np.array([[0.5, -1.5, 2.0]])
    x = run(lambda x, t, y: np.broadcast_to(c, x.shape), np.zeros((1, 3)), method, budget)
    assert np.allclose(x, c, atol=1e-12)


def test_linear_growth_euler():
    x = run(lambda x, t, y: x, np.ones(1), "euler", 100)
    assert x[0] == pytest.approx(1.01 ** 100, rel=1e-12)
    assert x[0] == pytest.approx(2.704814, abs=1e-6)


def test_linear_growth_rk4_closed_form():
    h = 0.1
    factor = 1 + h + h ** 2 / 2 + h ** 3 / 6 + h ** 4 / 24
    x = run(lambda x, t, y: x, np.ones(1), "rk4", 40)
    assert x[0] == pytest.approx(factor ** 10, rel=1e-13)
    assert abs(x[0] - math.e) < 2.2e-6


@pytest.mark.xfail(strict=True, reason="closed-form RK4 error at 10 steps is 2.08e-6, above the stated 1e-6")
def test_linear_growth_rk4_stated_bound():
    x = run(lambda x, t, y: x, np.ones(1), "rk4", 40)
    assert abs(x[0] - math.e) < 1e-6


@pytest.mark.parametrize("method,budget", [("heun", 2), ("heun", 10), ("rk4", 4), ("rk4", 20)])
def test_time_linear_field_exact(method, budget):
    # v = a + b t integrates to a + b/2; trapezoid and Simpson rules are exact here
    x = run(lambda x, t, y: np.broadcast_to(2.0 + 3.0 * np.asarray(t), x.shape), np.zeros(1),
            method, budget)
    assert x[0] == pytest.approx(3.5, abs=1e-12)


@pytest.mark.parametrize("method,order,tol", [("euler", 1, 0.2), ("heun", 2, 0.2), ("rk4", 4, 0.5)])
def test_convergence_order(method, order, tol):
    budgets = [8, 16, 32, 64]
    errs = [abs(run(lambda x, t, y: x, np.ones(1), method, b)[0] - math.e) for b in budgets]
    slope = -np.polyfit(np.log(budgets), np.log(errs), 1)[0]
    assert abs(slope - order) <= tol


# --- guidance -------------------------------------------------------------------------


def stub(cond, uncond):
    return Field(lambda x, t, y: np.where(y[:, None] == 0, uncond, cond) * np.ones_like(x))


def test_guidance_combination():
    x = np.zeros((2, 3))
    y = np.array([1, 2])
    assert np.allclose(guided_velocity(stub(2.0, 1.0), x, 0.1, y, 2.0), 3.0)
    assert np.allclose(guided_velocity(stub(2.0, 1.0), x, 0.1, y, 0.0), 1.0)
    assert np.allclose(guided_velocity(stub(2.0, 1.0), x, 0.1, y, 1.0), 2.0)


def test_guidance_one_skips_unconditional_pass():
    f = stub(2.0, 1.0)
    guided_velocity(f, np.zeros((1, 3)), 0.0, [1], 1.0)
    assert f.calls == 1
    guided_velocity(f, np.zeros((1, 3)), 0.0, [1], 1.5)
    assert f.calls == 3


def test_guidance_rejects_null():
    with pytest.raises(ValueError):
        guided_velocity(stub(1.0, 0.0), np.zeros((2, 3)), 0.0, [1, 0], 2.0)


@settings(max_examples=40, deadline=None)
@given(c=st.floats(-5, 5), u=st.floats(-5, 5), w=st.floats(0, 6))
def test_guidance_equals_affine_blend(c, u, w):
    got = guided_velocity(stub(c, u), np.zeros((1, 2)), 0.3, [1], w)
    assert np.allclose(got, u + w * (c - u), atol=1e-9)


def test_identical_branches_make_weight_irrelevant():
    base = run(lambda x, t, y: -x + np.sin(t), np.ones((1, 2)), "heun", 16, 1.0)
    for w in (0.0, 2.0, 4.5):
        assert np.allclose(run(lambda x, t, y: -x + np.sin(t), np.ones((1, 2)), "heun", 16, w), base)


# --- NFE accounting -----------------------------------------------------------------


def test_nfe_plan_examples():
    assert nfe_plan("heun", 40) == {"steps": 20, "nfe": 40, "effective_nfe": 40}
    assert nfe_plan("euler", 16, 2.0) == {"steps": 16, "nfe": 16, "effective_nfe": 32}
    assert nfe_plan("rk4", 32)["steps"] == 8


@pytest.mark.parametrize("method,budget", [("heun", 7), ("rk4", 10), ("rk4", 0), ("euler", 0)])
def test_nfe_plan_rejects(method, budget):
    with pytest.raises(ValueError):
        nfe_plan(method, budget)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("midpoint")
    with pytest.raises(ValueError):
        SolverConfig("heun", 40, -1.0)
    assert SolverConfig("heun", 8).grid().tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]


@pytest.mark.parametrize("method", ["euler", "heun", "rk4"])
@pytest.mark.parametrize("w", [1.0, 2.0])
def test_counted_forward_passes(method, w):
    budget = 16
    f = Field(lambda x, t, y: -x)
    _, used = integrate(f, np.ones((3, 2, 4)), np.ones(3, int), SolverConfig(method, budget, w))
    assert f.calls == used == budget * (1 if w == 1 else 2)


def test_times_visited_end_at_one():
    seen = []

    def fn(x, t, y):
        seen.append(float(np.max(t)))
        return np.zeros_like(x)

    integrate(Field(fn), np.zeros((1, 1, 2)), np.ones(1, int), SolverConfig("rk4", 12))
    assert seen[0] == 0.0 and seen[-1] == 1.0
    assert all(0 <= s <= 1 for s in seen)


def test_nan_state_aborts():
    with pytest.raises(IntegrationError, match="step 3"):
        run(lambda x, t, y: np.full_like(x, np.nan) if t > 0.25 else x, np.ones(1), "euler", 8)


# --- batched sampling with a real network --------------------------------------------

CFG = ModelConfig(C=2, L=16, K=3, base_width=4, groups=2, embed_dim=8, time_embed_dim=16)


def test_sample_batch_shape_and_determinism():
    net = VelocityNet(CFG, seed=0)
    req = SampleRequest(balanced_labels(3, 7), seed=4, solver=SolverConfig("euler", 4))
    a = sample_batch(net, req, batch_size=3)
    b = sample_batch(net, req, batch_size=7)
    assert a.windows.shape == (7, 2, 16) and a.split == "synthetic"
    # noise is keyed per sample index, so batching does not change results
    assert np.allclose(a.windows, b.windows, atol=1e-6)
    c = sample_batch(net, SampleRequest(req.labels, seed=5, solver=req.solver))
    assert not np.allclose(a.windows, c.windows)


def test_sample_batch_label_range():
    net = VelocityNet(CFG, seed=0)
    with pytest.raises(ValueError):
        sample_batch(net, SampleRequest([1, 4]))
    with pytest.raises(ValueError):
        sample_batch(net, SampleRequest([0, 1]))


def test_balanced_labels():
    labels = balanced_labels(4, 10)
    assert np.bincount(labels).tolist() == [0, 3, 3, 2, 2]


def test_bench_reports_effective_nfe():
    net = VelocityNet(CFG, seed=1)
    r = bench_throughput(net, SolverConfig("heun", 40), 4)
    assert r["nfe"] == 40 and r["method"] == "heun" and r["samples_per_sec"] > 0
    r = bench_throughput(net, SolverConfig("heun", 40, 2.0), 4)
    assert r["nfe"] == 80
    assert set(json.loads(bench_json(r))) == {"method", "nfe", "w", "samples_per_sec", "wall_ms"}
