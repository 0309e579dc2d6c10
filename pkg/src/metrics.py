"""
Evaluation metrics. Everything is computed in float64 numpy; torch inputs
are detached and copied to the host first.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import linalg

from .csv_writer import CsvWriter
from .data_model import Batch

logger = logging.getLogger(__name__)


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"Shape mismatch: prediction {pred.shape} vs target {target.shape}")


@dataclass
class MetricResult:
    per_variable: np.ndarray
    aggregate: float


def mae(pred, target) -> MetricResult:
    """Spatial mean absolute error per variable (axis 0), averaged over variables."""
    pred, target = _as_array(pred), _as_array(target)
    _check_same_shape(pred, target)
    per_var = np.abs(pred - target).reshape(pred.shape[0], -1).mean(axis=1)
    return MetricResult(per_var, float(per_var.mean()))


def rmse(pred, target) -> MetricResult:
    pred, target = _as_array(pred), _as_array(target)
    _check_same_shape(pred, target)
    per_var = np.sqrt(((pred - target) ** 2).reshape(pred.shape[0], -1).mean(axis=1))
    return MetricResult(per_var, float(per_var.mean()))


def to_presence(values, threshold: float = 0.0) -> np.ndarray:
    """Presence iff the value exceeds the threshold."""
    return _as_array(values) > threshold


def f1_sites(pred_presence, obs_presence) -> float:
    """
    Mean per-site F1, TP / (TP + (FP + FN) / 2), over N sites.

    Inputs are (N, species) boolean arrays. A site with nothing observed and
    nothing predicted scores 1.
    """
    pred = np.asarray(pred_presence, dtype=bool)
    obs = np.asarray(obs_presence, dtype=bool)
    _check_same_shape(pred, obs)
    if pred.shape[0] == 0:
        raise ValueError("F1 needs at least one site")
    pred, obs = pred.reshape(pred.shape[0], -1), obs.reshape(obs.shape[0], -1)
    tp = (pred & obs).sum(axis=1).astype(np.float64)
    fp = (pred & ~obs).sum(axis=1).astype(np.float64)
    fn = (~pred & obs).sum(axis=1).astype(np.float64)
    denom = tp + 0.5 * (fp + fn)
    scores = np.ones_like(tp)
    np.divide(tp, denom, out=scores, where=denom > 0)
    return float(scores.mean())


@dataclass
class SimilarityMap:
    """Per-cell similarity in [0, 1]; NaN marks undefined cells."""

    values: np.ndarray
    mean: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)


def sorensen_map(pred_presence, truth_presence, land_mask: Optional[np.ndarray] = None) -> SimilarityMap:
    """
    Incidence-form Sorensen-Dice 2a / (2a + b + c) per cell over the species
    axis (axis 0). Cells with no species in either set are undefined and left
    out of the mean, as are cells outside `land_mask`.
    """
    pred = np.asarray(pred_presence, dtype=bool)
    truth = np.asarray(truth_presence, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"Species axes differ: {pred.shape} vs {truth.shape}")
    a = (pred & truth).sum(axis=0).astype(np.float64)
    b = (truth & ~pred).sum(axis=0).astype(np.float64)
    c = (pred & ~truth).sum(axis=0).astype(np.float64)
    denom = 2 * a + b + c
    values = np.full(a.shape, np.nan)
    np.divide(2 * a, denom, out=values, where=denom > 0)
    scored = ~np.isnan(values)
    if land_mask is not None:
        scored &= np.asarray(land_mask, dtype=bool)
    mean = float(values[scored].mean()) if scored.any() else float("nan")
    return SimilarityMap(values, mean)


def r_squared(pred, target) -> float:
    pred, target = _as_array(pred).ravel(), _as_array(target).ravel()
    _check_same_shape(pred, target)
    if target.size < 2:
        raise ValueError("R^2 needs at least two observations")
    ss_tot = float(((target - target.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for a constant target")
    return 1.0 - float(((target - pred) ** 2).sum()) / ss_tot


def richness_map(presence, land_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Species count per cell; cells outside the land mask are NaN."""
    counts = np.asarray(presence, dtype=bool).sum(axis=0).astype(np.float64)
    if land_mask is not None:
        counts[~np.asarray(land_mask, dtype=bool)] = np.nan
    return counts


def per_channel_mae(pred: Batch, truth: Batch) -> Dict[str, float]:
    """MAE per channel label between two single-timestep batches."""
    if pred.schema != truth.schema:
        raise ValueError("Prediction and truth use different schemas")
    result = mae(pred.to_channels()[0], truth.to_channels()[0])
    return {k.label(): float(v) for k, v in zip(pred.schema.channel_keys(), result.per_variable)}


@dataclass
class Scorecard:
    """MAE per variable (rows) and rollout step (columns)."""

    variables: List[str]
    values: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def to_csv(self, path: str) -> None:
        with CsvWriter(path, overwrite=True) as writer:
            for name, row in zip(self.variables, self.values):
                writer.write_row({"variable": name, **{f"step_{k + 1}": float(v) for k, v in enumerate(row)}})


def rollout_scorecard(trajectory, truth: Sequence[Batch]) -> Scorecard:
    steps = list(getattr(trajectory, "steps", trajectory))
    if len(steps) != len(truth):
        raise ValueError(f"Trajectory has {len(steps)} steps but {len(truth)} truth slices were given")
    if not steps:
        raise ValueError("Empty trajectory")
    labels = [k.label() for k in steps[0].schema.channel_keys()]
    columns = [mae(p.to_channels()[0], t.to_channels()[0]).per_variable for p, t in zip(steps, truth)]
    return Scorecard(labels, np.stack(columns, axis=1))


def species_cumulative_mean(steps: Sequence[Batch]) -> np.ndarray:
    """Mean of all species distributions at each step."""
    return np.array([float(_as_array(b.groups["species"]).mean()) for b in steps])


@dataclass
class PCADiagnostics:
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    correlation: np.ndarray


def pca_diagnostics(embeddings, tol: float = 1e-12) -> PCADiagnostics:
    """
    Principal components of (samples, D) embeddings.

    Null directions get a zero ratio and an identity row in the score
    correlation matrix.
    """
    x = _as_array(embeddings)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"PCA needs a (samples >= 2, D) matrix, got {x.shape}")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    eigvals, eigvecs = linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = np.clip(eigvals[order], 0.0, None), eigvecs[:, order]
    total = eigvals.sum()
    ratios = eigvals / total if total > 0 else np.zeros_like(eigvals)

    scores = centred @ eigvecs
    std = scores.std(axis=0)
    live = std > tol * max(1.0, float(std.max()))
    corr = np.eye(eigvals.size)
    if live.sum() > 1:
        corr[np.ix_(live, live)] = np.corrcoef(scores[:, live], rowvar=False)
    return PCADiagnostics(ratios, eigvecs.T, corr)
