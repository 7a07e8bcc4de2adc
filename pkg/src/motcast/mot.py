"""Channel-wise routing across temporal-skip forecast candidates.

The reliability matrix V has one row per channel and one column per
temporal window; smaller entries are more reliable. Candidates are merged by
averaging the K columns with the smallest V, and V is tracked as an
exponential moving average of the softmax (across windows) of each
candidate's spatially averaged absolute error.
"""

import csv
import threading
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, ShapeError
from .objectives import channel_candidate_mae


class SelectorError(ValueError):
    pass


@dataclass
class SelectionMatrix:
    values: np.ndarray  # (C, N) float64, rows sum to 1
    alpha: float = 0.99
    k: int = 1

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("selection matrix must be 2-D")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 1 <= self.k <= self.values.shape[1]:
            raise ConfigError(f"k must lie in 1..{self.values.shape[1]}, got {self.k}")

    @classmethod
    def uniform(cls, n_channels, n_windows=4, alpha=0.99, k=1):
        return cls(np.full((n_channels, n_windows), 1.0 / n_windows), alpha, k)

    @property
    def n_channels(self):
        return self.values.shape[0]

    @property
    def n_windows(self):
        return self.values.shape[1]

    def copy(self):
        return SelectionMatrix(self.values.copy(), self.alpha, self.k)

    def to_csv(self, path, labels=None):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["channel"] + [f"i={i}" for i in range(self.n_windows)])
            for c, row in enumerate(self.values):
                name = labels[c] if labels is not None else str(c)
                writer.writerow([name] + [repr(float(v)) for v in row])


def topk_select(V, k=None):
    """Boolean (C, N) indicator of the k smallest entries per row; ties go to smaller i."""
    if isinstance(V, SelectionMatrix):
        k = V.k if k is None else k
        V = V.values
    V = np.asarray(V)
    if k is None or not 1 <= k <= V.shape[1]:
        raise ConfigError(f"k must lie in 1..{V.shape[1]}, got {k}")
    order = np.argsort(V, axis=1, kind="stable")[:, :k]
    sel = np.zeros(V.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=1)
    return sel


def merge_candidates(candidates, selector, k, mask=None):
    """Per-channel mean of the selected candidates.

    ``candidates`` is (N, C, H, W) or (B, N, C, H, W), numpy or torch (the
    torch path is differentiable). ``selector`` is a (C, N) boolean matrix
    with exactly ``k`` True entries per row.
    """
    sel = np.asarray(selector, dtype=bool)
    counts = sel.sum(axis=1)
    if np.any(counts != k):
        bad = np.flatnonzero(counts != k).tolist()
        raise SelectorError(f"selector rows {bad} do not have exactly {k} entries")
    idx = np.stack([np.flatnonzero(row) for row in sel])  # (C, k) ascending
    is_numpy = not isinstance(candidates, torch.Tensor)
    cand = torch.as_tensor(np.asarray(candidates)) if is_numpy else candidates
    batched = cand.ndim == 5
    if not batched:
        cand = cand[None]
    B, N, C, H, W = cand.shape
    if sel.shape != (C, N):
        raise ShapeError(f"selector shape {sel.shape} does not match candidates (C={C}, N={N})")
    # gather candidate idx[c, j] for channel c -> (B, k, C, H, W)
    gidx = torch.as_tensor(idx.T.copy(), device=cand.device)[None, :, :, None, None].expand(B, k, C, H, W)
    picked = torch.gather(cand, 1, gidx)
    out = picked.sum(dim=1) / k if k > 1 else picked[:, 0]
    if mask is not None:
        if isinstance(mask, torch.Tensor):
            ocean = mask.to(device=cand.device, dtype=torch.bool)
        else:
            ocean = torch.as_tensor(np.array(mask, dtype=bool), device=cand.device)
        out = torch.where(ocean, out, torch.zeros((), dtype=out.dtype))
    if not batched:
        out = out[0]
    return out.numpy() if is_numpy else out


def update_selection(V, candidates, target, mask):
    """Return the EMA-updated selection matrix; rows without ocean cells are left as they were."""
    mae = channel_candidate_mae(candidates, target, mask).to(torch.float64).numpy()
    if mae.shape != V.values.shape:
        raise ShapeError(f"MAE matrix {mae.shape} does not match V {V.values.shape}")
    new = V.values.copy()
    rows = ~np.isnan(mae).any(axis=1)
    z = mae[rows] - mae[rows].max(axis=1, keepdims=True)
    soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    new[rows] = V.alpha * V.values[rows] + (1.0 - V.alpha) * soft
    return SelectionMatrix(new, V.alpha, V.k)


class MixtureOfTime(BaseEstimator):
    """Estimator wrapper around the selection matrix.

    Parameters
    ----------
    n_channels : int
    n_windows : int
        Number of temporal-skip candidates (4 for the full model).
    k : int
        Candidates averaged per channel.
    alpha : float
        EMA momentum of the reliability update.
    routing : {"topk", "mean"}
        ``"mean"`` disables routing: every candidate is averaged and V is
        never updated (the ablation without MoT).
    """

    def __init__(self, n_channels, n_windows=4, k=1, alpha=0.99, routing="topk"):
        self.n_channels = n_channels
        self.n_windows = n_windows
        self.k = k
        self.alpha = alpha
        self.routing = routing

    def _init(self):
        if self.routing not in ("topk", "mean"):
            raise ConfigError(f"unknown routing {self.routing!r}")
        self.selection_ = SelectionMatrix.uniform(self.n_channels, self.n_windows, self.alpha, self.k)
        self._lock = threading.Lock()

    def fit(self, candidates=None, target=None, mask=None):
        """Reset V to uniform, then absorb one batch of errors if given."""
        self._init()
        if candidates is not None:
            self.partial_fit(candidates, target, mask)
        return self

    def partial_fit(self, candidates, target, mask):
        if not hasattr(self, "selection_"):
            self._init()
        if self.routing == "mean":
            return self
        updated = update_selection(self.selection_, candidates, target, mask)
        with self._lock:
            self.selection_ = updated
        return self

    def selector(self):
        check_is_fitted(self, "selection_")
        if self.routing == "mean":
            return np.ones((self.n_channels, self.n_windows), dtype=bool)
        return topk_select(self.selection_)

    def effective_k(self):
        return self.n_windows if self.routing == "mean" else self.k

    def merge(self, candidates, mask=None):
        return merge_candidates(candidates, self.selector(), self.effective_k(), mask)

    transform = merge
    predict = merge

    def set_selection(self, selection):
        if not hasattr(self, "_lock"):
            self._init()
        with self._lock:
            self.selection_ = selection.copy()
        return self

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()
