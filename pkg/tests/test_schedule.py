import math

import pytest
import torch

from src.errors import ConfigError
from src.training.schedule import OptimSchedule, build_optimizer, lr_at


def test_defaults():
    schedule = OptimSchedule()
    assert lr_at(0, schedule) == 5e-5
    assert schedule.weight_decay == 5e-6


def test_restart_at_every_period():
    schedule = OptimSchedule(base_lr=1e-3, period=10, floor=1e-5)
    assert lr_at(10, schedule) == lr_at(0, schedule) == pytest.approx(1e-3)
    assert lr_at(25, schedule) == lr_at(5, schedule)
    assert lr_at(9, schedule) < lr_at(1, schedule)


def test_midpoint_closed_form():
    schedule = OptimSchedule(base_lr=1e-3, period=100, floor=1e-4)
    assert lr_at(50, schedule) == pytest.approx((1e-3 + 1e-4) / 2)
    expected = 1e-4 + 0.9e-3 * (1 + math.cos(math.pi * 0.25)) / 2
    assert lr_at(25, schedule) == pytest.approx(expected)


def test_monotone_within_period():
    schedule = OptimSchedule(period=20)
    values = [lr_at(t, schedule) for t in range(20)]
    assert all(a > b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("kwargs", [{"period": 0}, {"floor": 1.0}, {"base_lr": -1.0}])
def test_invalid_schedules(kwargs):
    with pytest.raises(ConfigError):
        OptimSchedule(**kwargs)


def test_negative_step():
    with pytest.raises(ValueError):
        lr_at(-1, OptimSchedule())


def test_scheduler_follows_closed_form():
    schedule = OptimSchedule(base_lr=1e-3, period=4, floor=1e-5)
    param = torch.nn.Parameter(torch.zeros(1))
    optimizer, scheduler = build_optimizer([param], schedule)
    assert optimizer.param_groups[0]["weight_decay"] == schedule.weight_decay
    for step in range(10):
        assert optimizer.param_groups[0]["lr"] == pytest.approx(lr_at(step, schedule), rel=1e-9)
        optimizer.step()
        scheduler.step()
