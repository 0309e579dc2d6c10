import json

import numpy as np
import pytest
import torch

from src.data_model import compute_norm_stats
from src.errors import DataError, NumericalFailure
from src.model import BiodiversityEmulator, ModelConfig
from src.training import OptimSchedule, Trainer, TrainingWindow, VariableWeights, lr_at, make_windows, state_sequence

from .conftest import make_series, make_smooth_series


def test_state_sequence(mini_series):
    states = state_sequence(mini_series)
    assert len(states) == 7
    assert [str(s.timestamps[0]) for s in states][:3] == ["2010-01", "2010-02", "2010-03"]
    assert torch.equal(states[-1].to_channels(), mini_series[-1].slice(1).to_channels())


def test_state_sequence_rejects_gaps(desk_schema, mini_grid):
    first = make_series(desk_schema, mini_grid, "2010-01", count=1)
    later = make_series(desk_schema, mini_grid, "2010-05", count=1)
    with pytest.raises(DataError):
        state_sequence(first + later)
    with pytest.raises(DataError):
        state_sequence([])


def test_windows(mini_series, mini_stats):
    windows = make_windows(state_sequence(mini_series), mini_stats, steps=2)
    assert len(windows) == 4
    assert len(windows[0].states) == 4
    assert windows[1].timestamps[0] == np.datetime64("2010-02", "M")
    with pytest.raises(DataError):
        make_windows(state_sequence(mini_series), mini_stats, steps=6)


def test_training_reduces_loss(tiny_model, mini_series, mini_stats, tmp_path):
    windows = make_windows(state_sequence(mini_series), mini_stats, steps=1)[:1]
    log_path = tmp_path / "train_log.jsonl"
    trainer = Trainer(
        tiny_model,
        VariableWeights.default(),
        OptimSchedule(base_lr=3e-3, period=1000),
        log_path=str(log_path),
    )
    losses = trainer.fit(windows, steps=40, progress=False)
    assert len(losses) == 40
    assert np.mean(losses[-5:]) < losses[0]

    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(40))
    assert set(records[0]) == {"step", "lr", "loss", "group_losses"}
    assert set(records[0]["group_losses"]) == {"surface", "atmospheric", "species"}


def test_lr_follows_schedule(tiny_model, mini_series, mini_stats):
    schedule = OptimSchedule(base_lr=1e-3, period=3, floor=1e-4)
    trainer = Trainer(tiny_model, VariableWeights.default(), schedule)
    windows = make_windows(state_sequence(mini_series), mini_stats, steps=1)
    trainer.fit(windows, steps=4, progress=False)
    assert trainer.lr == pytest.approx(lr_at(4, schedule))


def test_rollout_training_step(tiny_model, mini_series, mini_stats):
    windows = make_windows(state_sequence(mini_series), mini_stats, steps=3)
    trainer = Trainer(tiny_model, VariableWeights.default(), OptimSchedule(), rollout_steps=3)
    assert np.isfinite(trainer.train_step(windows[0]))


def test_non_finite_loss(tiny_model, mini_series, mini_stats):
    window = make_windows(state_sequence(mini_series), mini_stats, steps=1)[0]
    states = [s.clone() for s in window.states]
    states[2][0, 0, 0, 0] = float("nan")
    trainer = Trainer(tiny_model, VariableWeights.default(), OptimSchedule())
    with pytest.raises(NumericalFailure) as err:
        trainer.train_step(TrainingWindow(states, window.timestamps))
    assert err.value.diagnostics["step"] == 0
    assert "group_losses" in err.value.diagnostics


def test_frozen_model_rejected(tiny_model):
    for p in tiny_model.parameters():
        p.requires_grad_(False)
    with pytest.raises(NumericalFailure):
        Trainer(tiny_model, VariableWeights.default(), OptimSchedule())


def test_fit_needs_windows(tiny_model):
    with pytest.raises(DataError):
        Trainer(tiny_model, VariableWeights.default(), OptimSchedule()).fit([], steps=1, progress=False)


@pytest.mark.slow
def test_overfits_single_pair(desk_schema, desk_grid):
    series = make_smooth_series(desk_schema, desk_grid, count=2, seed=7)
    stats = compute_norm_stats(series)
    window = make_windows(state_sequence(series), stats, steps=1)
    torch.manual_seed(0)
    model = BiodiversityEmulator(ModelConfig.preset("desk"), desk_schema, desk_grid)
    schedule = OptimSchedule()
    assert schedule.base_lr == 5e-5
    trainer = Trainer(model, VariableWeights.default(), schedule)
    losses = trainer.fit(window, steps=500, progress=False)
    assert len(losses) == 500
    assert np.mean(losses[-10:]) <= 0.1 * losses[0]
