"""Spatial grid, channel layout, land-sea masking and latitude weights."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import ConfigError, ShapeError, check_mask

FILL_VALUE = 0.0
DEFAULT_VARIABLES = ("T", "S", "U", "V")
UNITS = {"T": "degC", "S": "psu", "U": "m/s", "V": "m/s", "SSH": "m"}


class LayoutError(ConfigError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular latitude/longitude grid with a list of depth levels (meters)."""

    latitudes: tuple
    longitudes: tuple
    depth_levels: tuple = (0.0,)

    def __post_init__(self):
        lat = np.asarray(self.latitudes, dtype=float)
        lon = np.asarray(self.longitudes, dtype=float)
        depths = np.asarray(self.depth_levels, dtype=float)
        if lat.ndim != 1 or lat.size == 0 or lon.ndim != 1 or lon.size == 0:
            raise ConfigError("latitudes and longitudes must be nonempty 1-D lists")
        if np.any(np.abs(lat) >= 90):
            raise ConfigError("latitudes must lie strictly inside (-90, 90)")
        dlat = np.diff(lat)
        if lat.size > 1 and not (np.all(dlat > 0) or np.all(dlat < 0)):
            raise ConfigError("latitudes must be strictly monotonic")
        if lon.size > 1 and not np.all(np.diff(lon) > 0):
            raise ConfigError("longitudes must be strictly increasing")
        if lon[-1] - lon[0] >= 360:
            raise ConfigError("longitudes span 360 degrees or more")
        if depths.size == 0 or depths[0] != 0 or np.any(np.diff(depths) <= 0):
            raise ConfigError("depth_levels must start at 0 and strictly increase")
        # normalise to tuples of floats so the spec stays hashable and immutable
        object.__setattr__(self, "latitudes", tuple(float(x) for x in lat))
        object.__setattr__(self, "longitudes", tuple(float(x) for x in lon))
        object.__setattr__(self, "depth_levels", tuple(float(x) for x in depths))

    @property
    def n_lat(self):
        return len(self.latitudes)

    @property
    def n_lon(self):
        return len(self.longitudes)

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)

    @property
    def lat(self):
        return np.asarray(self.latitudes)

    @property
    def lon(self):
        return np.asarray(self.longitudes)

    @property
    def is_periodic(self):
        """True when the longitudes are uniformly spaced around the full circle."""
        if self.n_lon < 2:
            return False
        spacing = np.diff(self.lon)
        return bool(np.allclose(spacing, 360.0 / self.n_lon))

    def mesh(self):
        """Return (lat, lon) 2-D arrays of cell-center coordinates."""
        lon2, lat2 = np.meshgrid(self.lon, self.lat)
        return lat2, lon2

    def to_dict(self):
        return {
            "n_lat": self.n_lat,
            "n_lon": self.n_lon,
            "latitudes_deg": list(self.latitudes),
            "longitudes_deg": list(self.longitudes),
            "depth_levels_m": list(self.depth_levels),
        }

    @classmethod
    def from_dict(cls, d):
        grid = cls(d["latitudes_deg"], d["longitudes_deg"], d["depth_levels_m"])
        if grid.n_lat != d.get("n_lat", grid.n_lat) or grid.n_lon != d.get("n_lon", grid.n_lon):
            raise ConfigError("n_lat/n_lon disagree with the coordinate lists")
        return grid


def regular_grid(n_lat, n_lon, depth_levels=(0.0, 50.0, 200.0, 1000.0)):
    """Cell-centred global grid: latitudes symmetric about the equator, longitudes from 0."""
    if n_lat < 1 or n_lon < 1:
        raise ConfigError("grid dimensions must be positive")
    half = 90.0 - 90.0 / n_lat
    lat = np.linspace(-half, half, n_lat) if n_lat > 1 else np.zeros(1)
    lon = np.arange(n_lon) * (360.0 / n_lon)
    return GridSpec(lat, lon, depth_levels)


@dataclass(frozen=True)
class ChannelLayout:
    variables: tuple
    n_depths: int
    has_ssh: bool = True

    def __post_init__(self):
        variables = tuple(self.variables)
        if not variables:
            raise LayoutError("at least one 3-D variable is required")
        if len(set(variables)) != len(variables):
            raise LayoutError(f"duplicate variable names in {variables}")
        if "SSH" in variables:
            raise LayoutError("SSH is a surface channel, enable it with has_ssh")
        if int(self.n_depths) < 1:
            raise LayoutError("n_depths must be at least 1")
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "n_depths", int(self.n_depths))
        object.__setattr__(self, "has_ssh", bool(self.has_ssh))

    @property
    def total_channels(self):
        return len(self.variables) * self.n_depths + int(self.has_ssh)

    @property
    def ssh_index(self):
        return len(self.variables) * self.n_depths if self.has_ssh else None

    def index(self, variable, depth=0):
        if variable == "SSH":
            if not self.has_ssh:
                raise LayoutError("layout has no SSH channel")
            return self.ssh_index
        if variable not in self.variables:
            raise LayoutError(f"unknown variable {variable!r}")
        if not 0 <= depth < self.n_depths:
            raise LayoutError(f"depth index {depth} outside [0, {self.n_depths})")
        return self.variables.index(variable) * self.n_depths + depth

    def channel(self, index):
        """Inverse of :meth:`index`: channel -> (variable, depth index)."""
        if not 0 <= index < self.total_channels:
            raise LayoutError(f"channel {index} outside [0, {self.total_channels})")
        if self.has_ssh and index == self.ssh_index:
            return ("SSH", 0)
        return (self.variables[index // self.n_depths], index % self.n_depths)

    def labels(self, grid=None):
        out = []
        for c in range(self.total_channels):
            var, d = self.channel(c)
            depth = grid.depth_levels[d] if grid is not None else d
            out.append(f"{var}@{depth:g}")
        return out

    def to_dict(self):
        return {
            "variables": list(self.variables),
            "n_depths": self.n_depths,
            "has_ssh": self.has_ssh,
            "total_channels": self.total_channels,
        }

    @classmethod
    def from_dict(cls, d):
        layout = cls(tuple(d["variables"]), d["n_depths"], d.get("has_ssh", True))
        if "total_channels" in d and d["total_channels"] != layout.total_channels:
            raise LayoutError(
                f"declared total_channels={d['total_channels']} but layout implies "
                f"{layout.total_channels}"
            )
        return layout


def build_channel_layout(variables, n_depths, has_ssh=True):
    return ChannelLayout(tuple(variables), n_depths, has_ssh)


@dataclass(frozen=True, eq=False)
class LandSeaMask:
    """Binary ocean indicator on the grid (True = ocean).

    ``depth_ocean`` optionally holds a per-level mask of shape (D, H, W); by
    default every level replicates the surface mask.
    """

    ocean: np.ndarray
    depth_ocean: np.ndarray = field(default=None)

    def __post_init__(self):
        ocean = check_mask(self.ocean).copy()
        if not ocean.any():
            raise ValueError("mask has no ocean cells")
        ocean.setflags(write=False)
        object.__setattr__(self, "ocean", ocean)
        if self.depth_ocean is not None:
            depth = np.asarray(self.depth_ocean).astype(bool).copy()
            if depth.ndim != 3 or depth.shape[1:] != ocean.shape:
                raise ShapeError("depth_ocean must have shape (D, H, W)")
            depth.setflags(write=False)
            object.__setattr__(self, "depth_ocean", depth)

    @property
    def shape(self):
        return self.ocean.shape

    @property
    def n_ocean(self):
        return int(self.ocean.sum())

    def __eq__(self, other):
        return isinstance(other, LandSeaMask) and np.array_equal(self.ocean, other.ocean)

    def for_layout(self, layout):
        """Return a (C, H, W) boolean ocean mask for every channel of ``layout``."""
        C = layout.total_channels
        if self.depth_ocean is None:
            return np.broadcast_to(self.ocean, (C,) + self.ocean.shape)
        out = np.empty((C,) + self.ocean.shape, dtype=bool)
        for c in range(C):
            _, d = layout.channel(c)
            out[c] = self.depth_ocean[d]
        return out


def synthetic_mask(grid, seed=0, land_fraction=0.25):
    """Smooth pseudo-continents covering roughly ``land_fraction`` of the grid."""
    rng = np.random.default_rng(seed)
    lat, lon = np.deg2rad(grid.mesh()[0]), np.deg2rad(grid.mesh()[1])
    field_ = np.zeros(grid.shape)
    for _ in range(6):
        k, m = rng.integers(1, 4), rng.integers(1, 4)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        field_ += rng.normal() * np.cos(k * lon + phase[0]) * np.cos(m * lat + phase[1])
    if land_fraction <= 0:
        return LandSeaMask(np.ones(grid.shape, dtype=bool))
    threshold = np.quantile(field_, 1.0 - land_fraction)
    return LandSeaMask(field_ < threshold)


def latitude_weights(latitudes):
    """cos-latitude weights normalised to sum to the number of rows."""
    lat = np.asarray(latitudes, dtype=np.float64)
    if lat.ndim != 1 or lat.size == 0:
        raise ValueError("latitudes must be a nonempty 1-D list")
    if np.any(np.abs(lat) >= 90):
        raise ValueError("latitudes must lie strictly inside (-90, 90)")
    cos = np.cos(np.deg2rad(lat))
    return lat.size * cos / cos.sum()


def apply_mask(values, mask, fill_value=FILL_VALUE):
    """Set land cells of a (..., H, W) field to ``fill_value`` on every channel."""
    ocean = mask.ocean if isinstance(mask, LandSeaMask) else check_mask(mask)
    values = np.asarray(values)
    if values.shape[-2:] != ocean.shape:
        raise ShapeError(f"state grid {values.shape[-2:]} does not match mask {ocean.shape}")
    return np.where(ocean, values, np.asarray(fill_value, dtype=values.dtype))


MASK_FILE = "mask.u8"


def write_grid_metadata(directory, grid, layout, mask, **extra):
    """Write ``grid.json`` and the row-major uint8 mask payload; return the metadata."""
    os.makedirs(directory, exist_ok=True)
    np.ascontiguousarray(mask.ocean, dtype=np.uint8).tofile(os.path.join(directory, MASK_FILE))
    units = {v: UNITS.get(v, "1") for v in layout.variables}
    if layout.has_ssh:
        units["SSH"] = UNITS["SSH"]
    meta = {
        "grid": grid.to_dict(),
        "layout": layout.to_dict(),
        "mask": {"file": MASK_FILE, "shape": list(mask.shape), "dtype": "uint8", "order": "C"},
        "units": units,
    }
    meta.update(extra)
    with open(os.path.join(directory, "grid.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    return meta


def read_grid_metadata(directory):
    """Inverse of :func:`write_grid_metadata`; returns (meta, grid, layout, mask)."""
    with open(os.path.join(directory, "grid.json"), encoding="utf-8") as f:
        meta = json.load(f)
    grid = GridSpec.from_dict(meta["grid"])
    layout = ChannelLayout.from_dict(meta["layout"])
    if layout.n_depths != len(grid.depth_levels):
        raise ConfigError("layout n_depths does not match the number of depth levels")
    mask_info = meta["mask"]
    path = os.path.join(directory, mask_info["file"])
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != grid.n_lat * grid.n_lon:
        raise ShapeError(f"{mask_info['file']}: expected {grid.n_lat * grid.n_lon} bytes, got {raw.size}")
    mask = LandSeaMask(raw.reshape(grid.shape))
    return meta, grid, layout, mask
