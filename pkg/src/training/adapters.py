"""
Vector-based random matrix adaptation of the backbone attention projections.

Every adapted linear layer W becomes W + diag(lambda_b) B diag(lambda_d) A,
where A and B are slices of one pair of frozen random matrices shared by all
sites and only the scaling vectors are trained.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import torch
import torch.nn as nn

from ..errors import ConfigError
from ..seeding import torch_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    targets: Tuple[str, ...] = field(default=("attn.qkv", "attn.proj"))
    d_init: float = 0.1
    train_heads: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.rank < 1:
            raise ConfigError(f"adapters.rank must be positive, got {self.rank}")
        if not self.targets:
            raise ConfigError("adapters.targets is empty")

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d


class VeRALinear(nn.Module):
    def __init__(self, base: nn.Linear, shared_a: torch.Tensor, shared_b: torch.Tensor, d_init: float):
        super().__init__()
        rank = shared_a.shape[0]
        self.base = base
        self.register_buffer("proj_a", shared_a[:, : base.in_features].clone())
        self.register_buffer("proj_b", shared_b[: base.out_features, :].clone())
        self.lambda_d = nn.Parameter(torch.full((rank,), d_init, dtype=base.weight.dtype))
        self.lambda_b = nn.Parameter(torch.zeros(base.out_features, dtype=base.weight.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = ((x @ self.proj_a.T) * self.lambda_d) @ self.proj_b.T
        return self.base(x) + update * self.lambda_b


def _find_sites(scope: nn.Module, targets: Tuple[str, ...]) -> List[Tuple[str, nn.Linear]]:
    sites, matched = [], set()
    for name, module in scope.named_modules():
        if not isinstance(module, nn.Linear):
            continue
        for target in targets:
            if name == target or name.endswith("." + target):
                sites.append((name, module))
                matched.add(target)
                break
    missing = [t for t in targets if t not in matched]
    if missing:
        raise ConfigError(f"Adapter targets {missing} match no linear layer in the backbone")
    return sites


def inject_adapters(model: nn.Module, config: AdapterConfig) -> nn.Module:
    """
    Freeze the model and wrap every targeted backbone projection.

    Only the scaling vectors are trainable afterwards, plus the output heads
    when `config.train_heads` is set. Modifies the model in place.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    sites = _find_sites(model.backbone, config.targets)

    dtype = sites[0][1].weight.dtype
    max_in = max(m.in_features for _, m in sites)
    max_out = max(m.out_features for _, m in sites)
    generator = torch_generator(config.seed, "adapters")
    # kaiming-uniform bounds for fan-in max_in and rank respectively
    bound_a = math.sqrt(3.0 / max_in)
    bound_b = math.sqrt(3.0 / config.rank)
    shared_a = (torch.rand(config.rank, max_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound_a
    shared_b = (torch.rand(max_out, config.rank, generator=generator, dtype=torch.float64) * 2 - 1) * bound_b

    for name, module in sites:
        parent_name, _, child = name.rpartition(".")
        parent = model.backbone.get_submodule(parent_name) if parent_name else model.backbone
        adapted = VeRALinear(module, shared_a.to(dtype), shared_b.to(dtype), config.d_init)
        adapted.to(module.weight.device)
        setattr(parent, child, adapted)

    if config.train_heads:
        for p in model.heads.parameters():
            p.requires_grad_(True)
    model.adapter_config = config
    trainable, total = parameter_census(model)
    logger.info(f"Injected {len(sites)} adapters: {trainable} of {total} parameters trainable")
    return model


def parameter_census(model: nn.Module) -> Tuple[int, int]:
    """(trainable, total) parameter counts."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return trainable, total
