"""
Pipeline stages behind the `main.py` subcommands. Each takes the resolved
RunConfig and returns a process exit code; failures surface as EmulatorError
subclasses carrying their own code.
"""

import glob
import logging
import os
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import yaml

from .batching import MonthWindow, SourceDescriptor, assemble_batch, load_batch, save_batch, save_map
from .config_manager import (
    RunConfig,
    log_resolved_config,
    resolve_adapters,
    resolve_grid,
    resolve_model_config,
    resolve_schedule,
    resolve_schema,
    resolve_weights,
)
from .csv_writer import CsvWriter
from .data_model import Batch, NormStats, compute_norm_stats
from .errors import ConfigError, DataError, NumericalFailure
from .gradcheck import run_all
from .metrics import f1_sites, r_squared, richness_map, rollout_scorecard, sorensen_map, species_cumulative_mean
from .model import BiodiversityEmulator
from .model.checkpoint import load_checkpoint, save_checkpoint
from .seeding import seed_everything
from .training import Trainer, inject_adapters, make_windows, parameter_census, state_sequence

logger = logging.getLogger(name="Commands")

BATCH_PATTERN = "batch_*.bbc"


def load_sources(path: str) -> List[SourceDescriptor]:
    """Read the source list; relative paths resolve against the list's folder."""
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot read source list {path}: {e}") from e
    entries = raw.get("sources")
    if not entries:
        raise ConfigError(f"Source list {path} declares no sources")
    base = os.path.dirname(os.path.abspath(path))
    sources = []
    for entry in entries:
        entry = dict(entry)
        if not os.path.isabs(entry["path"]):
            entry["path"] = os.path.join(base, entry["path"])
        sources.append(SourceDescriptor(**entry))
    return sources


def load_batches(folder: str) -> List[Batch]:
    files = sorted(glob.glob(os.path.join(folder, BATCH_PATTERN)))
    if not files:
        raise DataError(f"No batch containers in {folder}")
    return [load_batch(f) for f in files]


def _load_stats(cfg: RunConfig) -> NormStats:
    if not os.path.exists(cfg.paths.stats):
        raise DataError(f"Normalization statistics {cfg.paths.stats} not found; run compute-stats first")
    return NormStats.load(cfg.paths.stats)


def _load_model(cfg: RunConfig) -> Tuple[BiodiversityEmulator, NormStats]:
    if cfg.paths.checkpoint is None:
        raise ConfigError("paths.checkpoint is not set")
    model, stats, _ = load_checkpoint(cfg.paths.checkpoint)
    return model, stats if stats is not None else _load_stats(cfg)


def _output_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.paths.output, exist_ok=True)
    return cfg.paths.output


def cmd_build_batches(cfg: RunConfig) -> int:
    grid, schema = resolve_grid(cfg), resolve_schema(cfg)
    sources = load_sources(cfg.paths.sources)
    os.makedirs(cfg.paths.batches, exist_ok=True)
    report: Dict[str, List[str]] = {}
    manifest = os.path.join(cfg.paths.batches, "manifest.csv")
    with CsvWriter(manifest, overwrite=True) as writer:
        for window in MonthWindow.series(cfg.run.first_month, cfg.run.num_windows):
            missing: List[str] = []
            batch = assemble_batch(sources, window, grid, schema, missing=missing)
            filename = f"batch_{window.label}.bbc"
            checksum = save_batch(os.path.join(cfg.paths.batches, filename), batch)
            writer.write_row({"window": window.label, "file": filename, "checksum": checksum, "missing": len(missing)})
            if missing:
                report[window.label] = missing
            logger.info(f"Wrote {filename} ({len(missing)} missing entries)")
    with open(os.path.join(cfg.paths.batches, "ingest_report.yaml"), "w") as f:
        yaml.safe_dump({"missing": report}, f, sort_keys=True)
    return 0


def cmd_compute_stats(cfg: RunConfig) -> int:
    stats = compute_norm_stats(load_batches(cfg.paths.batches))
    stats.save(cfg.paths.stats)
    logger.info(f"Saved statistics for {len(stats.entries)} channels to {cfg.paths.stats}")
    return 0


def _train(cfg: RunConfig, model: BiodiversityEmulator, stats: NormStats, rollout_steps: int, steps: int, name: str):
    states = state_sequence(load_batches(cfg.paths.batches))
    windows = make_windows(states, stats, rollout_steps)
    out = _output_dir(cfg)
    trainer = Trainer(
        model,
        resolve_weights(cfg),
        resolve_schedule(cfg),
        rollout_steps=rollout_steps,
        log_path=os.path.join(out, f"{name}_{cfg.logging.train_log}"),
        seed=cfg.run.seed,
    )
    losses = trainer.fit(windows, steps, progress=cfg.training.progress)
    path = os.path.join(out, f"{name}.bbc")
    save_checkpoint(path, model, stats, extra={"steps": steps, "rollout_steps": rollout_steps, "loss": losses[-1]})
    return 0


def cmd_train(cfg: RunConfig) -> int:
    seed_everything(cfg.run.seed)
    stats = _load_stats(cfg)
    model = BiodiversityEmulator(resolve_model_config(cfg), resolve_schema(cfg), resolve_grid(cfg))
    return _train(cfg, model, stats, cfg.training.rollout_steps, cfg.training.steps, "pretrained")


def cmd_finetune(cfg: RunConfig) -> int:
    seed_everything(cfg.run.seed)
    model, stats = _load_model(cfg)
    if cfg.finetune.use_adapters:
        inject_adapters(model, resolve_adapters(cfg))
        trainable, total = parameter_census(model)
        logger.info(f"Adapters: {trainable} of {total} parameters trainable ({100.0 * trainable / total:.2f}%)")
    return _train(cfg, model, stats, cfg.finetune.rollout_steps, cfg.finetune.steps, "finetuned")


def _rollout_from_batches(cfg: RunConfig, steps: int):
    model, stats = _load_model(cfg)
    states = state_sequence(load_batches(cfg.paths.batches))
    truth = states[2 : 2 + steps]
    trajectory = model.rollout(states[0], states[1], steps, stats, truth=truth)
    return model, trajectory, truth


def cmd_rollout(cfg: RunConfig) -> int:
    _, trajectory, _ = _rollout_from_batches(cfg, cfg.evaluation.rollout_steps)
    out = _output_dir(cfg)
    with CsvWriter(os.path.join(out, "trajectory.csv"), overwrite=True) as writer:
        for k, step in enumerate(trajectory.steps):
            diagnostics = trajectory.diagnostics[k] if k < len(trajectory.diagnostics) else {}
            filename = f"rollout_step_{k + 1:02d}.bbc"
            checksum = save_batch(os.path.join(out, filename), step)
            row = {"step": k + 1, "month": str(step.timestamps[0]), "file": filename, "checksum": checksum}
            row["mae"] = float(np.mean(list(diagnostics.values()))) if diagnostics else ""
            writer.write_row(row)
    logger.info(f"Wrote {len(trajectory)} rollout steps to {out}")
    return 0


def _land_mask(cfg: RunConfig, batch: Batch) -> Optional[np.ndarray]:
    if cfg.evaluation.land_channel is None:
        return None
    labels = [f"{k.group}/{k.variable}" for k in batch.schema.channel_keys()]
    if cfg.evaluation.land_channel not in labels:
        raise ConfigError(f"evaluation.land_channel {cfg.evaluation.land_channel!r} is not a schema channel")
    index = labels.index(cfg.evaluation.land_channel)
    return batch.to_channels()[0, index].detach().cpu().numpy() > 0.5


def _species_presence(batch: Batch, threshold: float) -> np.ndarray:
    """(S, H, W) presence cube of a single-month batch."""
    return batch.groups["species"][0].detach().cpu().numpy() > threshold


def cmd_evaluate(cfg: RunConfig) -> int:
    _, trajectory, truth = _rollout_from_batches(cfg, cfg.evaluation.rollout_steps)
    if len(truth) < len(trajectory):
        logger.warning(f"Only {len(truth)} observed months to score against")
        trajectory.steps = trajectory.steps[: len(truth)]
    if not truth:
        raise DataError("No observed months after the initial pair; nothing to evaluate")
    out = _output_dir(cfg)
    card = rollout_scorecard(trajectory, truth)
    card.to_csv(os.path.join(out, "scorecard.csv"))
    summary = {
        "steps": len(truth),
        "mae_by_step": [float(v) for v in card.row_sums()],
    }
    try:
        summary["r2"] = r_squared(
            torch.cat([s.to_channels() for s in trajectory.steps]),
            torch.cat([t.to_channels() for t in truth]),
        )
    except ValueError as e:
        logger.warning(f"Skipping R^2: {e}")
    if "species" in truth[0].schema:
        threshold = cfg.evaluation.presence_threshold
        land = _land_mask(cfg, truth[0])
        pred_last = _species_presence(trajectory.steps[-1], threshold)
        true_last = _species_presence(truth[-1], threshold)
        similarity = sorensen_map(pred_last, true_last, land)
        S = pred_last.shape[0]
        summary["sorensen_mean"] = similarity.mean
        summary["f1_sites"] = f1_sites(pred_last.reshape(S, -1).T, true_last.reshape(S, -1).T)
        summary["species_mean_by_step"] = species_cumulative_mean(trajectory.steps).tolist()
        meta = {"month": str(truth[-1].timestamps[0]), "grid": truth[0].grid.to_dict()}
        save_map(os.path.join(out, "sorensen_map.bbc"), similarity.values, meta)
        save_map(os.path.join(out, "richness_predicted.bbc"), richness_map(pred_last, land), meta)
        save_map(os.path.join(out, "richness_observed.bbc"), richness_map(true_last, land), meta)
    with open(os.path.join(out, "metrics.yaml"), "w") as f:
        yaml.safe_dump(summary, f, sort_keys=False)
    logger.info(f"Evaluation over {len(truth)} steps: {summary}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    reports = run_all(cfg.run.seed)
    with CsvWriter(os.path.join(_output_dir(cfg), "gradcheck.csv"), overwrite=True) as writer:
        writer.write_rows(r.as_row() for r in reports)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise NumericalFailure(f"Gradient checks failed: {failed}", diagnostics={r.name: r.rel_error for r in reports})
    return 0


COMMAND_TABLE: Dict[str, Callable[[RunConfig], int]] = {
    "build-batches": cmd_build_batches,
    "compute-stats": cmd_compute_stats,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def run_command(command: str, cfg: RunConfig) -> int:
    logging.getLogger().setLevel(cfg.logging.log_level.upper())
    log_resolved_config(cfg)
    return COMMAND_TABLE[command](cfg)
