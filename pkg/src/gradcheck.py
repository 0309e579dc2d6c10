"""
Finite-difference gradient suites run in double precision.

Small blocks are checked with torch.autograd.gradcheck over inputs and
parameters; the full model and the rollout objective are checked along one
random direction in parameter space with a central difference.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
import torch
from torch.func import functional_call

from .data_model import BatchSchema, GridSpec
from .model.config import ModelConfig
from .model.emulator import BiodiversityEmulator
from .model.perceiver import AttentionConfig, CrossAttentionBlock
from .model.swin import SwinConfig, SwinStage
from .seeding import torch_generator
from .training.losses import VariableWeights, ft_loss, td_loss

logger = logging.getLogger(__name__)

REL_TOLERANCE = 1e-4


@dataclass
class GradcheckReport:
    name: str
    passed: bool
    rel_error: float

    def as_row(self) -> dict:
        return {"suite": self.name, "passed": self.passed, "rel_error": self.rel_error}


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def module_gradcheck(module: torch.nn.Module, inputs: Sequence[torch.Tensor]) -> bool:
    """torch.autograd.gradcheck over the inputs and every parameter of a module."""
    names = [n for n, _ in module.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())
    inputs = tuple(x.detach().clone().requires_grad_(True) for x in inputs)
    n_in = len(inputs)

    def fn(*args):
        return functional_call(module, dict(zip(names, args[n_in:])), args[:n_in])

    return torch.autograd.gradcheck(
        fn, inputs + params, eps=1e-6, atol=1e-6, rtol=REL_TOLERANCE, fast_mode=True, raise_exception=False
    )


def gradients_or_zero(params: Sequence[torch.nn.Parameter]) -> List[torch.Tensor]:
    """Current gradients, with zeros for parameters the last backward pass did not reach."""
    return [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]


def directional_check(
    objective: Callable[[], torch.Tensor], params: Sequence[torch.nn.Parameter], seed: int, eps: float = 1e-6
) -> float:
    """
    Relative error between the analytic directional derivative of
    `objective` and its central difference along a random unit direction.
    """
    generator = torch_generator(seed, "init", 1)
    direction = [torch.randn(p.shape, generator=generator, dtype=p.dtype) for p in params]
    norm = torch.sqrt(sum((d**2).sum() for d in direction))
    direction = [d / norm for d in direction]

    for p in params:
        p.grad = None
    objective().backward()
    analytic = float(sum((p.grad * d).sum() for p, d in zip(params, direction) if p.grad is not None))

    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(eps * d)
        plus = float(objective())
        for p, d in zip(params, direction):
            p.sub_(2 * eps * d)
        minus = float(objective())
        for p, d in zip(params, direction):
            p.add_(eps * d)
    numeric = (plus - minus) / (2 * eps)
    return relative_error(analytic, numeric)


def check_cross_attention(seed: int = 0) -> GradcheckReport:
    torch.manual_seed(seed)
    block = CrossAttentionBlock(AttentionConfig(8, 2, 1, 0)).double()
    q = torch.randn(1, 2, 8, dtype=torch.float64)
    ctx = torch.randn(1, 3, 8, dtype=torch.float64)
    return GradcheckReport("cross_attention", module_gradcheck(block, (q, ctx)), float("nan"))


def check_swin_stage(seed: int = 0) -> GradcheckReport:
    torch.manual_seed(seed)
    config = SwinConfig((2,), (2,), (1, 2, 2))
    stage = SwinStage(8, 2, 2, (2, 4, 4), config, [0.0, 0.0]).double()
    with torch.no_grad():
        for block in stage:
            block.attn.relative_position_bias_table.normal_(std=0.5)
    x = torch.randn(1, 2, 4, 4, 8, dtype=torch.float64)
    return GradcheckReport("swin_stage", module_gradcheck(stage, (x,)), float("nan"))


def _desk_setup(seed: int):
    torch.manual_seed(seed)
    schema, grid = BatchSchema.desk(), GridSpec.mini()
    config = ModelConfig.preset("desk", patch_size=2, latent_grid=(2, 2, 2), embed_dim=16, depth=1)
    model = BiodiversityEmulator(config, schema, grid).double().eval()
    for p in model.heads.parameters():
        torch.nn.init.normal_(p, std=0.1)
    C, (H, W) = schema.channel_count, grid.shape
    generator = torch_generator(seed, "data")
    states = [torch.randn(1, C, H, W, generator=generator, dtype=torch.float64) for _ in range(4)]
    months = [np.datetime64("2010-01", "M") + np.timedelta64(i, "M") for i in range(4)]
    weights = VariableWeights.default().for_schema(schema)
    return model, states, months, weights


def check_td_loss(seed: int = 0) -> GradcheckReport:
    model, states, months, weights = _desk_setup(seed)

    def objective():
        delta = model.step_normalized(states[0], states[1], months[:2], 1)
        return td_loss(delta, states[1], states[2], weights)

    err = directional_check(objective, [p for p in model.parameters() if p.requires_grad], seed)
    return GradcheckReport("td_loss", err <= REL_TOLERANCE, err)


def check_ft_loss(seed: int = 0) -> GradcheckReport:
    """
    Two-step rollout loss against a truncated objective in which the first
    prediction is frozen at the current parameters.
    """
    model, states, months, weights = _desk_setup(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    with torch.no_grad():
        first = model.step_normalized(states[0], states[1], months[:2], 1)
        first_loss = td_loss(first, states[1], states[2], weights)
        frozen = states[1] + first

    def truncated():
        delta = model.step_normalized(states[1], frozen, months[1:3], 1)
        return (first_loss + td_loss(delta, frozen, states[3], weights)) / 2

    for p in params:
        p.grad = None
    ft_loss(model, states, months, weights, 2).backward()
    push_forward = gradients_or_zero(params)
    for p in params:
        p.grad = None
    truncated().backward()
    mismatch = max(float((a - b).abs().max()) for a, b in zip(push_forward, gradients_or_zero(params)))

    err = directional_check(truncated, params, seed)
    passed = err <= REL_TOLERANCE and mismatch <= 1e-10
    return GradcheckReport("ft_loss", passed, max(err, mismatch))


def run_all(seed: int = 0) -> List[GradcheckReport]:
    reports = [check_cross_attention(seed), check_swin_stage(seed), check_td_loss(seed), check_ft_loss(seed)]
    for r in reports:
        logger.info(f"gradcheck {r.name}: {'ok' if r.passed else 'FAILED'} (rel error {r.rel_error:.3g})")
    return reports
