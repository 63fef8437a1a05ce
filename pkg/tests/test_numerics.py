import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from ccot.numerics import checksum, grad_check, matmul, softmax_rows
from ccot.training import loss_scaled_mse


def test_matmul_examples():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[5.0], [6.0]])
    assert torch.equal(matmul(a, b), torch.tensor([[17.0], [39.0]]))
    B = torch.randn(2, 5)
    assert torch.equal(matmul(torch.eye(2), B), B)
    assert torch.equal(matmul(torch.randn(3, 4), torch.zeros(4, 2)), torch.zeros(3, 2))


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ValueError):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    with pytest.raises(ValueError):
        matmul(torch.zeros(3), torch.zeros(3, 1))


def test_matmul_identity_associativity_exact():
    g = torch.Generator().manual_seed(0)
    A = torch.randn(4, 5, generator=g, dtype=torch.float64)
    B = torch.randn(5, 3, generator=g, dtype=torch.float64)
    assert torch.equal(matmul(matmul(A, torch.eye(5, dtype=torch.float64)), B), matmul(A, B))


def test_softmax_examples():
    assert torch.allclose(softmax_rows(torch.full((1, 4), 2.5)), torch.full((1, 4), 0.25))
    out = softmax_rows(torch.tensor([[1000.0, 0.0]]))
    assert torch.isfinite(out).all() and out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-12)
    out = softmax_rows(torch.tensor([[0.0, math.log(3.0)]], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([[0.25, 0.75]], dtype=torch.float64))


def test_softmax_masked_row():
    out = softmax_rows(torch.tensor([[0.0, -math.inf, 0.0]]))
    assert torch.allclose(out, torch.tensor([[0.5, 0.0, 0.5]]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=3), min_size=1, max_size=6))
def test_softmax_rows_sum_to_one(rows):
    out = softmax_rows(torch.tensor(rows, dtype=torch.float32))
    assert (out >= 0).all()
    assert torch.allclose(out.sum(-1), torch.ones(len(rows)), atol=1e-6)


def test_grad_check_quadratic():
    x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (x ** 2).sum(), [x]) < 1e-8


def test_grad_check_constant_function():
    x = torch.randn(4, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: torch.tensor(5.0, dtype=torch.float64) + 0 * x.sum(), [x]) == 0.0


def test_grad_check_mlp_scaled_mse():
    g = torch.Generator().manual_seed(1)
    w1 = torch.randn(6, 8, generator=g, dtype=torch.float64, requires_grad=True)
    w2 = torch.randn(8, 5, generator=g, dtype=torch.float64, requires_grad=True)
    x = torch.randn(3, 6, generator=g, dtype=torch.float64)
    gold = torch.randn(3, 5, generator=g, dtype=torch.float64)
    f = lambda: loss_scaled_mse(torch.tanh(x @ w1) @ w2, gold)
    assert grad_check(f, [w1, w2]) < 1e-4


def test_grad_check_detects_wrong_gradient():
    x = torch.tensor([1.5, -0.5], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            ctx.save_for_backward(v)
            return (v ** 3).sum()

        @staticmethod
        def backward(ctx, g):
            (v,) = ctx.saved_tensors
            return g * 2 * v  # should be 3 v^2

    assert grad_check(lambda: Wrong.apply(x), [x]) > 0.1


def test_grad_check_non_finite_and_eps_range():
    x = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (1.0 / x).sum(), [x]) == math.inf
    with pytest.raises(ValueError):
        grad_check(lambda: x.sum(), [x], eps=1e-2)


def test_checksum_sensitive_to_single_bit():
    t = torch.zeros(4)
    a = checksum([t])
    t[2] = 1e-30
    assert checksum([t]) != a
