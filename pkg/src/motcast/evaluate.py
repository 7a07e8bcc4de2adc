"""Autoregressive rollout, daily means, sparse-observation gridding, reports and ablations."""

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from datetime import timedelta

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ConfigError, ShapeError
from .data import STEP, OceanNormalizer, SeriesStore, export_store, format_timestamp
from .grid import FILL_VALUE, apply_mask, latitude_weights
from .mot import MixtureOfTime
from .objectives import MetricError, MetricTable, latitude_rmse, squared_error_maps

log = logging.getLogger(__name__)


class RolloutError(FloatingPointError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"non-finite prediction at rollout step {step}")


@dataclass
class InferenceModel:
    """Frozen network + routing matrix + normalisation, everything a rollout needs."""

    net: torch.nn.Module
    mot: MixtureOfTime
    stats: object
    grid: object
    layout: object
    mask: object
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_checkpoint(cls, ckpt, checkpoint_hash=None):
        net = ckpt.build_net().eval()
        mot = MixtureOfTime(ckpt.layout.total_channels, ckpt.net_config.n_inputs, ckpt.selection.k,
                            ckpt.selection.alpha, ckpt.train_config.routing).fit()
        mot.set_selection(ckpt.selection)
        prov = {"checkpoint_sha256": checkpoint_hash, "config_hash": ckpt.config_hash(),
                "stage": ckpt.stage, "iteration": ckpt.iteration}
        return cls(net, mot, ckpt.norm_stats, ckpt.grid, ckpt.layout, ckpt.mask, prov)

    @property
    def n_inputs(self):
        return self.net.cfg.n_inputs

    def normalizer(self):
        return OceanNormalizer.from_stats(self.stats, self.mask.for_layout(self.layout))


@dataclass
class ForecastRun:
    init_time: object  # newest input instant t0
    states: np.ndarray  # (L, C, H, W) normalised merged predictions
    provenance: dict = field(default_factory=dict)

    @property
    def timestamps(self):
        return [self.init_time + (k + 1) * STEP for k in range(len(self.states))]


def rollout(inputs, init_time, steps, model, window_hook=None):
    """Feed merged predictions back as the newest window member for ``steps`` steps.

    ``inputs`` holds the normalised initial window (N, C, H, W), oldest first,
    ending at ``init_time``. Parameters and V are never modified.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    net = model.net
    dtype = next(net.parameters()).dtype
    window = torch.as_tensor(np.asarray(inputs), dtype=dtype)[None]
    if window.shape[1] != model.n_inputs:
        raise ShapeError(f"initial window has {window.shape[1]} states, model expects {model.n_inputs}")
    ocean = torch.from_numpy(np.array(model.mask.for_layout(model.layout)))
    out = np.empty((steps,) + tuple(window.shape[2:]), dtype=np.float32)
    with torch.no_grad():
        for k in range(steps):
            if window_hook is not None:
                window_hook(k, window)
            valid = init_time + (k + 1) * STEP
            cands = net(window, [valid.hour // 6], [valid.timetuple().tm_yday])
            pred = model.mot.merge(cands, ocean)
            if not torch.isfinite(pred).all():
                raise RolloutError(k + 1)
            out[k] = pred[0].numpy()
            window = torch.cat([window[:, 1:], pred[:, None]], dim=1)
    return ForecastRun(init_time, out, dict(model.provenance))


def rollout_from_store(store, model, init_index, steps, window_hook=None):
    """Rollout initialised from ground-truth states ending at ``store.timestamps[init_index]``."""
    N = model.n_inputs
    if init_index - (N - 1) < 0:
        raise ValueError(f"index {init_index} has fewer than {N} states of history")
    inputs = model.normalizer().transform(store.values[init_index - N + 1:init_index + 1])
    return rollout(inputs, store.timestamps[init_index], steps, model, window_hook)


def daily_average(run):
    """Means of consecutive groups of four 6-hourly states; a partial trailing day is dropped."""
    states = run.states if isinstance(run, ForecastRun) else np.asarray(run)
    n_days = len(states) // 4
    if n_days == 0:
        warnings.warn("fewer than 4 steps: no complete day to average", RuntimeWarning, stacklevel=2)
        return np.empty((0,) + states.shape[1:])
    return states[:n_days * 4].reshape((n_days, 4) + states.shape[1:]).mean(axis=1, dtype=np.float64)


# ---------------------------------------------------------------------------
# sparse observations


@dataclass
class SparseObsSet:
    """Point observations. ``variable`` names a layout variable; ``depth_index`` defaults to the surface."""

    times: list
    lat: np.ndarray
    lon: np.ndarray
    variable: list
    value: np.ndarray
    depth_index: np.ndarray = None

    def __post_init__(self):
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.depth_index is None:
            self.depth_index = np.zeros(len(self.lat), dtype=int)
        n = len(self.lat)
        if not (len(self.times) == len(self.lon) == len(self.variable) == len(self.value) == n):
            raise ShapeError("observation fields have different lengths")

    def __len__(self):
        return len(self.lat)


def nearest_cells(lat, lon, grid):
    """Nearest cell-centre indices per axis; longitude wraps on periodic grids, ties go low.

    Returns (i, j, inside) where ``inside`` flags points within the grid's
    latitude (and, for regional grids, longitude) extent.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    lats, lons = grid.lat, grid.lon
    i = np.argmin(np.abs(lat[:, None] - lats[None]), axis=1)
    half_lat = np.abs(np.diff(lats)).max() / 2 if len(lats) > 1 else 90.0
    inside = (lat >= lats.min() - half_lat) & (lat <= lats.max() + half_lat) & (np.abs(lat) <= 90)
    if grid.is_periodic:
        d = np.mod(lon[:, None] - lons[None], 360.0)
        d = np.minimum(d, 360.0 - d)
    else:
        d = np.abs(lon[:, None] - lons[None])
        half_lon = np.diff(lons).max() / 2 if len(lons) > 1 else 180.0
        inside &= (lon >= lons.min() - half_lon) & (lon <= lons.max() + half_lon)
    j = np.argmin(d, axis=1)
    return i, j, inside


@dataclass
class GriddedObs:
    values: np.ndarray  # (C, H, W), 0 where unobserved
    observed: np.ndarray  # (C, H, W) bool
    valid_time: object
    n_used: int = 0
    n_rejected: int = 0


def grid_sparse_obs(obs, grid, layout, valid_time, half_width=timedelta(hours=3)):
    """Average observations within +-3 h of ``valid_time`` into their nearest grid cells."""
    C = layout.total_channels
    sums = np.zeros((C,) + grid.shape)
    counts = np.zeros((C,) + grid.shape, dtype=np.int64)
    in_bin = np.array([valid_time - half_width <= t < valid_time + half_width for t in obs.times], dtype=bool)
    idx = np.flatnonzero(in_bin)
    i, j, inside = nearest_cells(obs.lat[idx], obs.lon[idx], grid)
    rejected = int((~inside).sum())
    used = 0
    for n, k in enumerate(idx):
        if not inside[n]:
            continue
        c = layout.index(obs.variable[k], int(obs.depth_index[k]))
        sums[c, i[n], j[n]] += obs.value[k]
        counts[c, i[n], j[n]] += 1
        used += 1
    if rejected:
        log.warning("rejected %d out-of-bounds observations", rejected)
    observed = counts > 0
    values = np.where(observed, sums / np.maximum(counts, 1), 0.0)
    return GriddedObs(values, observed, valid_time, used, rejected)


class SparseObsGridder(TransformerMixin, BaseEstimator):
    """Transformer view of :func:`grid_sparse_obs`: SparseObsSet -> list of GriddedObs per valid time."""

    def __init__(self, grid=None, layout=None, valid_times=None):
        self.grid = grid
        self.layout = layout
        self.valid_times = valid_times

    def fit(self, X=None, y=None):
        if self.grid is None or self.layout is None:
            raise ConfigError("grid and layout are required")
        return self

    def transform(self, X):
        times = self.valid_times if self.valid_times is not None else sorted(set(X.times))
        return [grid_sparse_obs(X, self.grid, self.layout, t) for t in times]


def synthetic_buoys(store, stats, times, n_per_time, variable="T", depth_index=0, sigma=0.1, seed=0):
    """Random ocean point observations of the truth plus N(0, sigma) noise in normalised units."""
    rng = np.random.default_rng(seed)
    grid, c = store.grid, store.layout.index(variable, depth_index)
    ocean_cells = np.argwhere(store.mask.ocean)
    dlat = np.abs(np.diff(grid.lat)).min() if grid.n_lat > 1 else 1.0
    dlon = 360.0 / grid.n_lon
    out_t, out_lat, out_lon, out_val = [], [], [], []
    for t in times:
        k = store.index_of(t)
        picks = ocean_cells[rng.integers(len(ocean_cells), size=n_per_time)]
        jitter = rng.uniform(-0.45, 0.45, size=(n_per_time, 2))
        lat = grid.lat[picks[:, 0]] + jitter[:, 0] * dlat
        lon = np.mod(grid.lon[picks[:, 1]] + jitter[:, 1] * dlon, 360.0)
        truth = store.values[k, c, picks[:, 0], picks[:, 1]]
        out_t += [t] * n_per_time
        out_lat.append(lat)
        out_lon.append(lon)
        out_val.append(truth + sigma * stats.std[c] * rng.standard_normal(n_per_time))
    return SparseObsSet(out_t, np.concatenate(out_lat), np.concatenate(out_lon),
                        [variable] * len(out_t), np.concatenate(out_val),
                        np.full(len(out_t), depth_index))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ForecastReport:
    table: MetricTable
    mse_maps: np.ndarray  # (L, C, H, W)
    daily: MetricTable = None
    obs_table: MetricTable = None
    layout: object = None
    grid: object = None

    def depth_profile(self, variable):
        """(depth_m, lead_hours) -> rmse rows for one variable."""
        return [r for r in self.table.rows(self.layout, self.grid) if r["variable"] == variable]


def _physical_runs(runs, model):
    norm = model.normalizer()
    return np.stack([norm.inverse_transform(r.states) for r in runs])


def evaluate(runs, truth, model, obs=None):
    """Latitude-weighted RMSE report of ``runs`` against a truth store (and optional point obs)."""
    if not runs:
        raise MetricError("no forecast runs")
    L = min(len(r.states) for r in runs)
    runs = [replace(r, states=r.states[:L]) for r in runs]
    fc = _physical_runs(runs, model)  # (D, L, C, H, W)
    grid, layout = model.grid, model.layout
    weights = latitude_weights(grid.lat)
    ocean = np.asarray(model.mask.for_layout(layout))
    tr = np.zeros_like(fc)
    valid = np.zeros(fc.shape[:2], dtype=bool)
    for d, r in enumerate(runs):
        for k, t in enumerate(r.timestamps):
            if t in truth._index:
                tr[d, k] = truth.values[truth.index_of(t)]
                valid[d, k] = True
    if not valid.any():
        raise MetricError("no overlapping (init, lead) pairs between forecasts and truth")
    counted = ocean[None, None] & valid[:, :, None, None, None]
    table = latitude_rmse(fc, tr, weights, counted)
    maps = squared_error_maps(fc, tr, counted)
    daily = None
    if L >= 4:
        dfc = np.stack([daily_average(f) for f in fc])
        dtr = np.stack([daily_average(t) for t in tr])
        dvalid = valid[:, :(L // 4) * 4].reshape(len(runs), L // 4, 4).all(axis=2)
        if dvalid.any():
            daily = latitude_rmse(dfc, dtr, weights, ocean[None, None] & dvalid[:, :, None, None, None],
                                  lead_steps=[4 * (d + 1) for d in range(L // 4)])
    obs_table = None
    if obs is not None:
        obs_table = evaluate_obs(runs, fc, obs, model)
    return ForecastReport(table, maps, daily, obs_table, layout, grid)


def evaluate_obs(runs, physical, obs, model):
    """RMSE against gridded point observations; unobserved cells are excluded."""
    grid, layout = model.grid, model.layout
    fields = np.zeros_like(physical)
    observed = np.zeros(physical.shape, dtype=bool)
    ocean = np.asarray(model.mask.for_layout(layout))
    for d, r in enumerate(runs):
        for k, t in enumerate(r.timestamps):
            g = grid_sparse_obs(obs, grid, layout, t)
            fields[d, k] = g.values
            observed[d, k] = g.observed & ocean
    if not observed.any():
        return None
    return latitude_rmse(physical, fields, latitude_weights(grid.lat), observed)


def write_report(report, out_dir, ablation=None):
    """Emit ``rmse.csv``, ``rmse_by_depth.csv``, spatial error grids and optional extra tables."""
    os.makedirs(out_dir, exist_ok=True)
    layout, grid = report.layout, report.grid
    report.table.to_csv(os.path.join(out_dir, "rmse.csv"), layout, grid)
    with open(os.path.join(out_dir, "rmse_by_depth.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variable", "lead_hours"] + [f"{d:g}" for d in grid.depth_levels])
        for var in layout.variables:
            for j, lead in enumerate(report.table.lead_steps):
                row = [report.table.rmse[layout.index(var, d), j] for d in range(layout.n_depths)]
                writer.writerow([var, 6 * lead] + [f"{v:.9g}" for v in row])
    index = []
    for c in range(layout.total_channels):
        var, d = layout.channel(c)
        for j, lead in enumerate(report.table.lead_steps):
            name = f"rmse_map_{var}{int(grid.depth_levels[d])}m_{6 * lead:03d}h.f32"
            report.mse_maps[j, c].astype("<f4").tofile(os.path.join(out_dir, name))
            index.append({"file": name, "variable": var, "depth_m": grid.depth_levels[d],
                          "lead_hours": 6 * lead, "quantity": "mean_squared_error",
                          "shape": list(grid.shape), "dtype": "float32", "nan": "never observed"})
    with open(os.path.join(out_dir, "maps.json"), "w") as f:
        json.dump({"maps": index}, f, indent=2)
    if report.daily is not None:
        report.daily.to_csv(os.path.join(out_dir, "rmse_daily.csv"), layout, grid)
        if "T" in layout.variables:
            c = layout.index("T", 0)
            with open(os.path.join(out_dir, "daily_sst.csv"), "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["day", "rmse", "n_inits"])
                for j in range(len(report.daily.lead_steps)):
                    writer.writerow([j + 1, f"{report.daily.rmse[c, j]:.9g}", int(report.daily.n_inits[c, j])])
    if report.obs_table is not None:
        report.obs_table.to_csv(os.path.join(out_dir, "obs_eval.csv"), layout, grid)
    if ablation is not None:
        ablation.to_csv(os.path.join(out_dir, "ablation_compare.csv"))


def persist_run(run, model, directory):
    """Write a forecast run in the raw store format (physical units)."""
    values = model.normalizer().inverse_transform(run.states)
    values = apply_mask(values, model.mask, FILL_VALUE).astype(np.float32)
    store = SeriesStore(model.grid, model.layout, model.mask, run.timestamps, values)
    export_store(store, directory, init_time=format_timestamp(run.init_time), provenance=run.provenance)
    return store


# ---------------------------------------------------------------------------
# ablations

VARIANTS = {
    "full": {"routing": "topk", "n_inputs": 4},
    "woMoT": {"routing": "mean", "n_inputs": 4},
    "woMoT_2times": {"routing": "mean", "n_inputs": 2},
}


@dataclass
class AblationVariant:
    kind: str

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {self.kind!r}")

    @property
    def n_inputs(self):
        return VARIANTS[self.kind]["n_inputs"]

    @property
    def routing(self):
        return VARIANTS[self.kind]["routing"]

    def configure(self, net_cfg, train_cfg):
        return replace(net_cfg, n_inputs=self.n_inputs), replace(train_cfg, routing=self.routing)


@dataclass
class AblationResult:
    """RMSE tables keyed by (variant, seed), plus each run's final V and loss curve."""

    tables: dict
    layout: object
    grid: object
    selections: dict = field(default_factory=dict)
    loss_histories: dict = field(default_factory=dict)

    def step_rmse(self, variant, seed, channel, lead=1):
        t = self.tables[(variant, seed)]
        return float(t.rmse[channel, t.lead_steps.index(lead)])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["variant", "seed", "variable", "depth_m", "lead_hours", "rmse", "n_inits"])
            for (variant, seed), table in sorted(self.tables.items()):
                for row in table.rows(self.layout, self.grid):
                    writer.writerow([variant, seed, row["variable"], row["depth_m"], row["lead_hours"],
                                     f"{row['rmse']:.9g}", row["n_inits"]])


def evaluation_inits(store, index_range, n_inputs, steps, max_inits=None):
    """Initialisation indices inside ``index_range`` with full history (4 states) and ``steps`` future states."""
    history = max(n_inputs, 4)
    inits = [t for t in index_range if t - (history - 1) >= index_range.start and t + steps < index_range.stop]
    if max_inits is not None and len(inits) > max_inits:
        pick = np.linspace(0, len(inits) - 1, max_inits).round().astype(int)
        inits = [inits[p] for p in pick]
    return inits


def evaluate_model(model, store, inits, steps):
    runs = [rollout_from_store(store, model, t, steps) for t in inits]
    return evaluate(runs, store, model)


def run_ablation(variants, store, stats, net_cfg, train_cfg, seeds, eval_range=None, steps=8,
                 max_inits=40, train_range=None):
    """Train each variant for each seed under one budget and compare test RMSE by lead.

    ``train_cfg`` is one :class:`TrainConfig` or a dict of them keyed by
    variant name; everything except ``routing`` and ``seed`` must agree.
    """
    from .train import Trainer

    variants = [v if isinstance(v, AblationVariant) else AblationVariant(v) for v in variants]
    per_variant = train_cfg if isinstance(train_cfg, dict) else {v.kind: train_cfg for v in variants}
    missing = [v.kind for v in variants if v.kind not in per_variant]
    if missing:
        raise ConfigError(f"no training config for variants {missing}")
    budgets = {json.dumps(replace(per_variant[v.kind], routing="topk", seed=0).to_dict(), sort_keys=True)
               for v in variants}
    if len(budgets) != 1:
        raise ConfigError("ablation variants must share one training budget")
    if eval_range is None:
        eval_range = store.split()[2]
    inits = evaluation_inits(store, eval_range, 4, steps, max_inits)
    if not inits:
        raise ConfigError("evaluation range too short for the requested lead")
    tables, selections, losses = {}, {}, {}
    for v in variants:
        ncfg, tcfg = v.configure(net_cfg, per_variant[v.kind])
        for s in seeds:
            trainer = Trainer(store, stats, ncfg, replace(tcfg, seed=s), train_range=train_range)
            trainer.run()
            model = InferenceModel.from_checkpoint(trainer.checkpoint())
            tables[(v.kind, s)] = evaluate_model(model, store, inits, steps).table
            selections[(v.kind, s)] = trainer.mot.selection_.copy()
            losses[(v.kind, s)] = list(trainer.loss_history)
            log.info("ablation %s seed %d done", v.kind, s)
    return AblationResult(tables, store.layout, store.grid, selections, losses)
