import math

import pytest
import torch

from src.gradcheck import (
    REL_TOLERANCE,
    check_cross_attention,
    check_ft_loss,
    check_swin_stage,
    check_td_loss,
    directional_check,
    gradients_or_zero,
    relative_error,
    run_all,
)
from src.model.config import ModelConfig


def test_relative_error():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert relative_error(0.0, 0.0) == 0.0


def test_directional_check_on_quadratic():
    w = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    assert directional_check(lambda: (w**2).sum() + w.prod(), [w], seed=3) < 1e-8


def test_directional_check_catches_wrong_gradient():
    class WrongGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**3

        @staticmethod
        def backward(ctx, grad):
            return grad * 0.0 + 1.0

    w = torch.nn.Parameter(torch.tensor([1.5, 2.0], dtype=torch.float64))
    assert directional_check(lambda: WrongGrad.apply(w).sum(), [w], seed=0) > REL_TOLERANCE


def test_cross_attention_gradients():
    assert check_cross_attention().passed


def test_swin_stage_gradients():
    assert check_swin_stage().passed


@pytest.mark.slow
def test_td_loss_gradients():
    report = check_td_loss()
    assert report.passed, report.rel_error


@pytest.mark.slow
def test_ft_loss_push_forward_gradients():
    report = check_ft_loss()
    assert report.passed, report.rel_error


@pytest.mark.slow
def test_run_all_rows():
    rows = [r.as_row() for r in run_all()]
    assert [r["suite"] for r in rows] == ["cross_attention", "swin_stage", "td_loss", "ft_loss"]
    assert all(r["passed"] for r in rows)
    assert math.isnan(rows[0]["rel_error"])


def test_gradients_or_zero_fills_unreached_parameters():
    used = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    unused = torch.nn.Parameter(torch.ones(3))
    (used**2).sum().backward()
    grads = gradients_or_zero([used, unused])
    assert torch.equal(grads[0], torch.tensor([2.0, 4.0]))
    assert torch.equal(grads[1], torch.zeros(3))
    assert unused.grad is None


@pytest.mark.slow
def test_ft_loss_with_decoder_time_encoding_off():
    assert not ModelConfig.preset("desk").decoder_time_encoding
    report = check_ft_loss(seed=1)
    assert report.name == "ft_loss"
    assert report.passed, report.rel_error
