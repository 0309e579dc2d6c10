import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from ..batching.container import read_container, write_container
from ..data_model import BatchSchema, GridSpec, NormStats
from ..errors import ContainerError
from ..training.adapters import AdapterConfig, inject_adapters
from .config import ModelConfig
from .emulator import BiodiversityEmulator

logger = logging.getLogger(__name__)


def save_checkpoint(
    path: str,
    model: BiodiversityEmulator,
    stats: Optional[NormStats] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """Write every parameter and persistent buffer to a `checkpoint` container."""
    adapter_config = getattr(model, "adapter_config", None)
    metadata = {
        "model_config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "grid": model.grid.to_dict(),
        "adapters": adapter_config.to_dict() if adapter_config is not None else None,
        "norm_stats": stats.to_dict() if stats is not None else None,
        "extra": extra or {},
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    data = write_container("checkpoint", metadata, arrays)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"Saved checkpoint with {len(arrays)} arrays to {path}")


def load_checkpoint(path: str) -> Tuple[BiodiversityEmulator, Optional[NormStats], Dict[str, Any]]:
    """Rebuild the model (with adapters when the checkpoint has them)."""
    with open(path, "rb") as f:
        kind, metadata, arrays = read_container(f.read())
    if kind != "checkpoint":
        raise ContainerError(f"{path} holds a '{kind}', not a checkpoint")
    model = BiodiversityEmulator(
        ModelConfig.from_dict(metadata["model_config"]),
        BatchSchema.from_dict(metadata["schema"]),
        GridSpec.from_dict(metadata["grid"]),
    )
    if metadata.get("adapters") is not None:
        inject_adapters(model, AdapterConfig(**metadata["adapters"]))
    if any(a.dtype == np.float64 for a in arrays.values()):
        model.double()
    state = {name: torch.from_numpy(a) for name, a in arrays.items()}
    model.load_state_dict(state, strict=True)
    stats = NormStats.from_dict(metadata["norm_stats"]) if metadata.get("norm_stats") else None
    return model, stats, metadata.get("extra", {})
