"""Synthetic series generation, ingestion/export, normalisation and sample windows."""

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, ShapeError, check_field
from .grid import ChannelLayout, GridSpec, LandSeaMask, apply_mask, read_grid_metadata, write_grid_metadata

STEP = timedelta(hours=6)
N_INPUTS = 4
DEFAULT_START = datetime(2006, 1, 1, tzinfo=timezone.utc)
KINDS = ("diurnal", "slow_ar", "eddy", "lagged_copy")
# physical offsets so generated values look like the variables they stand for
_BASELINE = {"T": 15.0, "S": 35.0, "U": 0.0, "V": 0.0, "SSH": 0.0}
_SCALE = {"T": 2.0, "S": 0.5, "U": 0.2, "V": 0.2, "SSH": 0.3}


class IngestionError(IOError):
    pass


class DataGapError(KeyError):
    def __init__(self, instant):
        self.instant = instant
        super().__init__(f"missing timestep {format_timestamp(instant)}")

    def __str__(self):
        return self.args[0]


class DegenerateChannelError(ValueError):
    pass


def format_timestamp(t):
    return t.astimezone(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def parse_timestamp(s):
    """Parse basic (20060101T060000Z) or extended ISO 8601; naive input is taken as UTC."""
    s = s.strip()
    try:
        t = datetime.strptime(s, "%Y%m%dT%H%M%SZ")
    except ValueError:
        t = datetime.fromisoformat(s.replace("Z", "+00:00"))
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def check_six_hourly(t):
    if t.minute or t.second or t.microsecond or t.hour % 6:
        raise ValueError(f"{t.isoformat()} is not on a 6-hour boundary")
    return t


@dataclass(frozen=True)
class ContextSignals:
    """Time-of-day bin, day of year and static spatial context for one forecast step."""

    phase: int
    day_of_year: int
    lat: np.ndarray
    lon: np.ndarray
    land: np.ndarray

    def __post_init__(self):
        if self.phase not in (0, 1, 2, 3):
            raise ValueError(f"phase must be in 0..3, got {self.phase}")
        if not 1 <= self.day_of_year <= 366:
            raise ValueError(f"day_of_year must be in 1..366, got {self.day_of_year}")

    @classmethod
    def at(cls, t, grid, mask):
        lat, lon = grid.mesh()
        land = (~mask.ocean).astype(np.float32)
        return cls(t.hour // 6, t.timetuple().tm_yday, lat, lon, land)


@dataclass
class SeriesStore:
    """Six-hourly sequence of raw (physical-unit) states on one grid."""

    grid: GridSpec
    layout: ChannelLayout
    mask: LandSeaMask
    timestamps: list
    values: np.ndarray  # (T, C, H, W) float32

    def __post_init__(self):
        self.timestamps = [check_six_hourly(t) for t in self.timestamps]
        self.values = check_field(self.values, self.layout.total_channels, self.grid.shape,
                                  name="store values", ndim=4).astype(np.float32, copy=False)
        if len(self.timestamps) != self.values.shape[0]:
            raise ShapeError("number of timestamps and states differ")
        if self.mask.shape != self.grid.shape:
            raise ShapeError("mask does not match grid")
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b - a != STEP:
                raise ValueError(f"timestamps {a.isoformat()} -> {b.isoformat()} are not 6 hours apart")
        self._index = {t: i for i, t in enumerate(self.timestamps)}

    def __len__(self):
        return len(self.timestamps)

    def index_of(self, t):
        try:
            return self._index[t]
        except KeyError:
            raise DataGapError(t) from None

    def channel_mask(self):
        return self.mask.for_layout(self.layout)

    def split(self, fractions=(0.7, 0.1, 0.2)):
        """Chronological train/val/test index ranges."""
        n = len(self)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n)

    def equals(self, other):
        return (
            self.grid == other.grid
            and self.layout == other.layout
            and self.mask == other.mask
            and self.timestamps == other.timestamps
            and self.values.tobytes() == other.values.tobytes()
        )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticRecipe:
    """Per-channel dynamics for the synthetic generator.

    ``channels`` holds one dict per channel with keys ``kind`` (one of
    ``KINDS``), optional ``amplitude`` and, for ``lagged_copy``, ``lag``.
    """

    channels: list
    noise: float = 0.05
    seed: int = 0
    n_eddies: int = 6

    def __post_init__(self):
        for i, ch in enumerate(self.channels):
            kind = ch.get("kind")
            if kind not in KINDS:
                raise ConfigError(f"channel {i}: unknown dynamic kind {kind!r}")
            if kind == "lagged_copy" and ch.get("lag") not in (1, 2, 3, 4):
                raise ConfigError(f"channel {i}: lagged_copy lag must be 1..4")
        if not 0 <= self.noise < 1:
            raise ConfigError("noise must lie in [0, 1)")

    @property
    def lag_decay(self):
        """Contraction of the lag map; keeps lagged-copy channels at unit stationary variance."""
        return math.sqrt(1.0 - self.noise**2)

    def to_dict(self):
        return {"channels": [dict(c) for c in self.channels], "noise": self.noise,
                "seed": self.seed, "n_eddies": self.n_eddies}


def default_recipe(layout, seed=0, noise=0.05):
    """Routing recipe: one lag-4 channel, one lag-1 channel, the rest distractors.

    The lag-4 channel is the deepest salinity level when S exists, the lag-1
    channel the deepest temperature level; remaining channels cycle through
    diurnal / eddy / slow-AR dynamics.
    """
    C = layout.total_channels
    channels = [None] * C
    lag4 = layout.index("S", layout.n_depths - 1) if "S" in layout.variables else min(1, C - 1)
    lag1 = layout.index("T", layout.n_depths - 1) if "T" in layout.variables else 0
    if lag1 == lag4:
        lag1 = (lag4 + 1) % C
    channels[lag4] = {"kind": "lagged_copy", "lag": 4}
    if C > 1:
        channels[lag1] = {"kind": "lagged_copy", "lag": 1}
    cycle = ["diurnal", "eddy", "slow_ar"]
    k = 0
    for c in range(C):
        if channels[c] is None:
            channels[c] = {"kind": cycle[k % len(cycle)]}
            k += 1
    return SyntheticRecipe(channels, noise=noise, seed=seed)


def routing_channels(recipe):
    """Return {lag: [channel indices]} for lagged-copy channels."""
    out = {}
    for c, ch in enumerate(recipe.channels):
        if ch["kind"] == "lagged_copy":
            out.setdefault(ch["lag"], []).append(c)
    return out


def _smooth_field(rng, grid, n_modes=4):
    """Unit-variance random field built from low-order harmonics (periodic in longitude)."""
    lat, lon = grid.mesh()
    y = (lat - lat.min()) / max(lat.max() - lat.min(), 1e-9) * np.pi
    x = np.deg2rad(lon)
    f = np.zeros(grid.shape)
    for _ in range(n_modes):
        k = rng.integers(1, 4)
        m = rng.integers(1, 4)
        f += rng.normal() * np.cos(k * x + rng.uniform(0, 2 * np.pi)) * np.cos(m * y + rng.uniform(0, 2 * np.pi))
    std = f.std()
    return f / std if std > 0 else f


def lag_map(x, decay):
    """The fixed smooth map g of lagged-copy channels: X[t+1] = g(X[t+1-L]) + innovation."""
    return decay * x


def _eddy_series(rng, grid, n_steps, n_eddies):
    H, W = grid.shape
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    amp = rng.uniform(0.5, 1.5, n_eddies) * rng.choice([-1, 1], n_eddies)
    radius = rng.uniform(1.0, 2.5, n_eddies) * max(H, W) / 32
    pos = np.column_stack([rng.uniform(1, H - 2, n_eddies), rng.uniform(0, W, n_eddies)])
    speed = 0.4 * max(W, 1) / 32

    def velocity(y, x):
        # streamfunction psi = sin(pi y / H) cos(2 pi x / W); (u, v) = (-dpsi/dy, dpsi/dx)
        a, b = np.pi / H, 2 * np.pi / W
        vy = -speed * b * np.sin(a * y) * np.sin(b * x) * W / (2 * np.pi)
        vx = -speed * a * np.cos(a * y) * np.cos(b * x) * H / np.pi
        return vy, vx

    out = np.empty((n_steps, H, W))
    for t in range(n_steps):
        dx = np.abs(xx[None] - pos[:, 1, None, None])
        dx = np.minimum(dx, W - dx)
        dy = yy[None] - pos[:, 0, None, None]
        out[t] = np.sum(amp[:, None, None] * np.exp(-(dx**2 + dy**2) / (2 * radius[:, None, None] ** 2)), axis=0)
        vy, vx = velocity(pos[:, 0], pos[:, 1])
        pos[:, 0] = np.clip(pos[:, 0] + vy, 0, H - 1)
        pos[:, 1] = np.mod(pos[:, 1] + vx, W)
    return out


def generate_synthetic(recipe, grid, layout, n_steps, start=DEFAULT_START, mask=None):
    """Generate a deterministic :class:`SeriesStore` from ``recipe``."""
    if n_steps < 6:
        raise ConfigError("n_steps must be at least 6")
    C = layout.total_channels
    if len(recipe.channels) != C:
        raise ConfigError(f"recipe has {len(recipe.channels)} channels, layout has {C}")
    if layout.n_depths != len(grid.depth_levels):
        raise ConfigError("layout n_depths does not match grid depth levels")
    if mask is None:
        from .grid import synthetic_mask
        mask = synthetic_mask(grid, seed=recipe.seed)
    rng = np.random.default_rng(recipe.seed)
    H, W = grid.shape
    values = np.empty((n_steps, C, H, W))
    steps = np.arange(n_steps)
    for c, spec in enumerate(recipe.channels):
        var, d = layout.channel(c)
        amplitude = spec.get("amplitude", 1.0)
        kind = spec["kind"]
        crng = np.random.default_rng(rng.integers(2**63))
        base = _smooth_field(crng, grid)
        if kind == "diurnal":
            amp = 0.5 + 0.5 * np.abs(_smooth_field(crng, grid))
            phase = np.pi * _smooth_field(crng, grid) / 4
            series = base[None] * 0.5 + amp[None] * np.cos(2 * np.pi * (steps % 4)[:, None, None] / 4 + phase[None])
            series = series + recipe.noise * crng.standard_normal((n_steps, H, W))
        elif kind == "slow_ar":
            rho = 0.995
            series = np.empty((n_steps, H, W))
            x = _smooth_field(crng, grid)
            for t in range(n_steps):
                series[t] = base + 0.5 * x
                x = rho * x + recipe.noise * _smooth_field(crng, grid)
        elif kind == "eddy":
            series = 0.3 * base[None] + _eddy_series(crng, grid, n_steps, recipe.n_eddies)
            series = series + recipe.noise * crng.standard_normal((n_steps, H, W))
        else:
            lag = spec["lag"]
            series = np.empty((n_steps, H, W))
            for t in range(lag):
                series[t] = _smooth_field(crng, grid)
            for t in range(lag, n_steps):
                series[t] = lag_map(series[t - lag], recipe.lag_decay) + recipe.noise * _smooth_field(crng, grid)
        depth_factor = 1.0 / (1.0 + grid.depth_levels[d] / 500.0)
        values[:, c] = _BASELINE.get(var, 0.0) + amplitude * _SCALE.get(var, 1.0) * depth_factor * series
    values = apply_mask(values, mask, 0.0).astype(np.float32)
    timestamps = [start + k * STEP for k in range(n_steps)]
    return SeriesStore(grid, layout, mask, timestamps, values)


# ---------------------------------------------------------------------------
# raw binary format


def state_filename(t):
    return f"state_{format_timestamp(t)}.f32"


def export_store(store, directory, **extra):
    """Write ``grid.json``, the mask payload and one little-endian float32 file per step."""
    os.makedirs(directory, exist_ok=True)
    write_grid_metadata(
        directory, store.grid, store.layout, store.mask,
        timestamps=[format_timestamp(t) for t in store.timestamps],
        value_format={"dtype": "float32", "byteorder": "little", "order": "C,H,W"},
        **extra,
    )
    for t, v in zip(store.timestamps, store.values):
        v.astype("<f4").tofile(os.path.join(directory, state_filename(t)))


def ingest_raw(directory):
    """Load and validate a store written by :func:`export_store` (or by external tools)."""
    try:
        meta, grid, layout, mask = read_grid_metadata(directory)
    except FileNotFoundError as exc:
        raise IngestionError(f"{exc.filename}: not found") from exc
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise IngestionError(f"grid.json: malformed metadata ({exc})") from exc
    try:
        timestamps = [parse_timestamp(s) for s in meta["timestamps"]]
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"grid.json: bad timestamp list ({exc})") from exc
    if not timestamps:
        raise IngestionError("grid.json: empty timestamp list")
    for a, b in zip(timestamps, timestamps[1:]):
        if b - a != STEP:
            raise IngestionError(f"{state_filename(b)}: spacing {b - a} from previous step is not 6-hourly")
    n_values = layout.total_channels * grid.n_lat * grid.n_lon
    values = np.empty((len(timestamps), layout.total_channels, grid.n_lat, grid.n_lon), dtype=np.float32)
    for k, t in enumerate(timestamps):
        name = state_filename(t)
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise IngestionError(f"{name}: missing")
        size = os.path.getsize(path)
        if size != n_values * 4:
            raise IngestionError(f"{name}: expected {n_values * 4} bytes, found {size}")
        values[k] = np.fromfile(path, dtype="<f4").reshape(values.shape[1:])
    try:
        return SeriesStore(grid, layout, mask, timestamps, values)
    except ValueError as exc:
        raise IngestionError(str(exc)) from exc


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


class OceanNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel z-score over ocean cells; land cells are filled with 0 after scaling.

    Parameters
    ----------
    ocean_mask : array of shape (H, W) or (C, H, W), optional
        True on ocean cells. All cells count as ocean when omitted.
    min_std : float
        Channels whose standard deviation falls below this are rejected.
    """

    def __init__(self, ocean_mask=None, min_std=1e-12):
        self.ocean_mask = ocean_mask
        self.min_std = min_std

    def _mask(self, shape):
        if self.ocean_mask is None:
            return np.ones(shape[-3:], dtype=bool)
        m = np.asarray(self.ocean_mask, dtype=bool)
        return np.broadcast_to(m, shape[-3:])

    def fit(self, X, y=None):
        X = check_field(X, ndim=4, name="X")
        ocean = self._mask(X.shape)
        C = X.shape[1]
        mean = np.empty(C)
        std = np.empty(C)
        for c in range(C):
            vals = X[:, c][:, ocean[c]].astype(np.float64)
            mean[c] = vals.mean()
            std[c] = np.sqrt(np.mean((vals - mean[c]) ** 2))
        bad = np.flatnonzero(~(std >= self.min_std))
        if bad.size:
            raise DegenerateChannelError(f"channels {bad.tolist()} have standard deviation below {self.min_std}")
        self.mean_ = mean
        self.std_ = std
        self.n_features_in_ = C
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_field(X, self.n_features_in_, ndim=None, name="X")
        out = (X - self.mean_[:, None, None]) / self.std_[:, None, None]
        return np.where(self._mask(X.shape), out, 0.0).astype(np.float32)

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_field(X, self.n_features_in_, ndim=None, name="X")
        return (np.asarray(X, dtype=np.float64) * self.std_[:, None, None] + self.mean_[:, None, None])

    @property
    def stats_(self):
        return NormStats(self.mean_, self.std_)

    @classmethod
    def from_stats(cls, stats, ocean_mask=None):
        obj = cls(ocean_mask=ocean_mask)
        obj.mean_ = np.asarray(stats.mean, dtype=np.float64)
        obj.std_ = np.asarray(stats.std, dtype=np.float64)
        obj.n_features_in_ = obj.mean_.size
        return obj


def compute_norm_stats(store, train_range=None):
    """Mean/std per channel over ocean cells of the states inside ``train_range``.

    ``train_range`` is a (first, last) pair of timestamps (inclusive), a
    ``range``/``slice`` of indices, or None for the whole store.
    """
    if train_range is None:
        idx = slice(None)
    elif isinstance(train_range, (range, slice)):
        idx = train_range if isinstance(train_range, slice) else slice(train_range.start, train_range.stop)
    else:
        first, last = train_range
        idx = slice(store.index_of(first), store.index_of(last) + 1)
    X = store.values[idx]
    if X.shape[0] == 0:
        raise ValueError("train_range selects no timesteps")
    return OceanNormalizer(store.channel_mask()).fit(X).stats_


def normalize(store, stats, values):
    norm = OceanNormalizer.from_stats(stats, store.channel_mask())
    return norm.transform(values)


def denormalize(store, stats, values):
    norm = OceanNormalizer.from_stats(stats, store.channel_mask())
    return norm.inverse_transform(values)


@dataclass
class SampleWindow:
    """N consecutive normalised input states (oldest first) plus the next-step target."""

    inputs: np.ndarray  # (N, C, H, W)
    target: np.ndarray  # (C, H, W), None past the end of the store
    timestamps: list  # N input instants followed by the target instant
    context: ContextSignals = field(repr=False)

    @property
    def t(self):
        return self.timestamps[len(self.inputs) - 1]


def make_window(store, stats, t, n_inputs=N_INPUTS, require_target=True):
    """Window ending at ``t``: inputs t-(N-1)*6h .. t, target t+6h."""
    if isinstance(t, (int, np.integer)):
        t = store.timestamps[t]
    instants = [t - k * STEP for k in range(n_inputs - 1, -1, -1)] + [t + STEP]
    idx = []
    for k, inst in enumerate(instants):
        if k == n_inputs and not require_target:
            if inst not in store._index:
                idx.append(None)
                continue
        idx.append(store.index_of(inst))
    norm = OceanNormalizer.from_stats(stats, store.channel_mask())
    inputs = norm.transform(store.values[idx[:n_inputs]])
    target = norm.transform(store.values[idx[-1]]) if idx[-1] is not None else None
    ctx = ContextSignals.at(t + STEP, store.grid, store.mask)
    return SampleWindow(inputs, target, instants, ctx)


def valid_window_indices(store, index_range=None, n_inputs=N_INPUTS, horizon=1):
    """Indices t with history t-(N-1) and ``horizon`` future steps inside ``index_range``."""
    r = range(len(store)) if index_range is None else index_range
    return [t for t in r if t - (n_inputs - 1) >= r.start and t + horizon < r.stop]
