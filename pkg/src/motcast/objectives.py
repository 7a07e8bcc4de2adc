"""Latitude-weighted Charbonnier loss, per-candidate MAE and latitude-weighted RMSE."""

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import ConfigError, ShapeError


@dataclass
class LossConfig:
    eps: float = 1e-3
    horizon: int = 4
    discount: float = 1.0
    merged_weight: float = 1.0
    candidate_weight: float = 0.25

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if not 0 < self.discount <= 1:
            raise ConfigError("discount must lie in (0, 1]")


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else None
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _ocean_weights(weights, mask, shape, like):
    """Broadcast (H,) latitude weights times the ocean mask to ``shape``."""
    w = _as_tensor(weights, like).to(like.dtype)
    ocean = _as_tensor(mask).to(torch.bool)
    if ocean.shape[-2:] != tuple(shape[-2:]) or w.shape[-1] != shape[-2]:
        raise ShapeError(f"weights {tuple(w.shape)} / mask {tuple(ocean.shape)} do not fit {tuple(shape)}")
    return w[:, None], torch.broadcast_to(ocean, shape)


def charbonnier_loss(pred, target, weights, mask, eps=1e-3):
    """Mean over ocean cells (and channels, batch) of w_lat * sqrt(err^2 + eps^2)."""
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    w, ocean = _ocean_weights(weights, mask, pred.shape, pred)
    # where() keeps land values (even non-finite ones) out of the graph
    diff = torch.where(ocean, pred - target, torch.zeros((), dtype=pred.dtype))
    per_cell = w * torch.sqrt(diff * diff + eps * eps)
    per_cell = torch.where(ocean, per_cell, torch.zeros((), dtype=pred.dtype))
    return per_cell.sum() / ocean.sum()


def discounted_mean(step_losses, discount=1.0):
    """sum_k discount**k * L_k / n over a rollout of n step losses."""
    n = len(step_losses)
    if n == 0:
        raise ValueError("empty rollout")
    total = step_losses[0]
    for k in range(1, n):
        total = total + discount**k * step_losses[k]
    return total / n


def multi_step_loss(rollout_preds, targets, cfg, weights, mask):
    if len(rollout_preds) != len(targets):
        raise ShapeError(f"{len(rollout_preds)} predictions but {len(targets)} targets")
    if len(rollout_preds) > cfg.horizon:
        raise ShapeError(f"rollout length {len(rollout_preds)} exceeds horizon {cfg.horizon}")
    losses = [charbonnier_loss(p, t, weights, mask, cfg.eps) for p, t in zip(rollout_preds, targets)]
    return discounted_mean(losses, cfg.discount)


def channel_candidate_mae(candidates, target, mask):
    """(C, N) matrix of mean |candidate_i - target| over ocean cells, per channel.

    ``candidates`` is (N, C, H, W) or batched (B, N, C, H, W); batches are
    pooled. Channels without ocean cells get NaN.
    """
    cand = _as_tensor(candidates).detach()
    tgt = _as_tensor(target, cand).detach()
    if cand.ndim == 4:
        cand, tgt = cand[None], tgt[None]
    if cand.ndim != 5 or tgt.shape != cand.shape[:1] + cand.shape[2:]:
        raise ShapeError(f"candidates {tuple(cand.shape)} do not match target {tuple(tgt.shape)}")
    B, N, C, H, W = cand.shape
    m = _as_tensor(mask).to(torch.bool)
    if m.shape[-2:] != (H, W):
        raise ShapeError(f"mask {tuple(m.shape)} does not match grid {(H, W)}")
    ocean = torch.broadcast_to(m, (C, H, W))
    err = torch.where(ocean, (cand - tgt[:, None]).abs(), torch.zeros((), dtype=cand.dtype))
    counts = ocean.sum(dim=(-2, -1)).to(cand.dtype) * B  # (C,)
    mae = err.sum(dim=(0, 3, 4)) / counts  # (N, C)
    mae = torch.where(counts > 0, mae, torch.full_like(mae, float("nan")))
    return mae.T.contiguous()


@dataclass
class MetricTable:
    """Latitude-weighted RMSE per (channel, lead); leads are counted in 6-hour steps."""

    rmse: np.ndarray  # (C, L)
    n_inits: np.ndarray  # (C, L)
    lead_steps: list = field(default_factory=list)

    def rows(self, layout, grid):
        for c in range(self.rmse.shape[0]):
            var, d = layout.channel(c)
            for j, lead in enumerate(self.lead_steps):
                yield {
                    "variable": var,
                    "depth_m": grid.depth_levels[d],
                    "lead_hours": 6 * lead,
                    "rmse": float(self.rmse[c, j]),
                    "n_inits": int(self.n_inits[c, j]),
                }

    def to_csv(self, path, layout, grid):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, ["variable", "depth_m", "lead_hours", "rmse", "n_inits"])
            writer.writeheader()
            for row in self.rows(layout, grid):
                row["rmse"] = f"{row['rmse']:.9g}"
                writer.writerow(row)


class MetricError(ValueError):
    pass


def latitude_rmse(forecasts, truths, weights, mask, lead_steps=None):
    """Latitude-weighted RMSE: square root per initialisation, then averaged.

    Within one initialisation the squared errors are averaged with weights
    a_i over the counted cells, so a constant error d gives exactly d with or
    without land.

    ``forecasts`` and ``truths`` are (D, L, C, H, W) for D initialisations and
    L leads. ``mask`` broadcasts against that shape (True = counted cell), so
    a per-init observation mask is accepted as well as a static ocean mask.
    Initialisations with no counted cells for a channel are skipped.
    """
    f = np.asarray(forecasts, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if f.ndim != 5 or f.shape != t.shape:
        raise ShapeError(f"forecasts {f.shape} and truths {t.shape} must both be (D, L, C, H, W)")
    if f.shape[0] == 0:
        raise MetricError("no forecast initialisations")
    w = np.asarray(weights, dtype=np.float64)[:, None]
    counted = np.broadcast_to(np.asarray(mask, dtype=bool), f.shape)
    sq = np.where(counted, w * (f - t) ** 2, 0.0)
    # normalising by the summed weight of counted cells equals 1/(HW) on an all-ocean grid
    wsum = np.where(counted, w, 0.0).sum(axis=(-2, -1))  # (D, L, C)
    n = counted.sum(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        per_init = np.sqrt(sq.sum(axis=(-2, -1)) / wsum)
    valid = n > 0
    n_inits = valid.sum(axis=0)
    if not n_inits.any():
        raise MetricError("no overlapping forecast/truth cells")
    with np.errstate(invalid="ignore", divide="ignore"):
        rmse = np.where(valid, per_init, 0.0).sum(axis=0) / n_inits
    lead_steps = list(lead_steps) if lead_steps is not None else list(range(1, f.shape[1] + 1))
    return MetricTable(rmse.T.copy(), n_inits.T.copy(), lead_steps)


def squared_error_maps(forecasts, truths, mask):
    """Per-cell mean squared error over initialisations, shape (L, C, H, W); NaN where never counted."""
    f = np.asarray(forecasts, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    counted = np.broadcast_to(np.asarray(mask, dtype=bool), f.shape)
    sq = np.where(counted, (f - t) ** 2, 0.0).sum(axis=0)
    n = counted.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, sq / np.maximum(n, 1), np.nan)
