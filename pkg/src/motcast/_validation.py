"""Input validation helpers shared by the estimators and free functions."""

import numpy as np


class ShapeError(ValueError):
    """Array dimensions do not agree with the grid or layout."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


def check_field(values, n_channels=None, grid_shape=None, name="state", ndim=3):
    """Return ``values`` as a float ndarray after checking its shape.

    ``ndim`` counts the trailing (C, H, W) dimensions; extra leading axes are
    allowed when ``ndim`` is None.
    """
    arr = np.asarray(values)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if arr.ndim < 2:
        raise ShapeError(f"{name} must be at least 2-D, got shape {arr.shape}")
    if grid_shape is not None and tuple(arr.shape[-2:]) != tuple(grid_shape):
        raise ShapeError(f"{name} grid {arr.shape[-2:]} does not match {tuple(grid_shape)}")
    if n_channels is not None and arr.shape[-3] != n_channels:
        raise ShapeError(f"{name} has {arr.shape[-3]} channels, expected {n_channels}")
    return arr


def check_mask(mask, grid_shape=None):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    if grid_shape is not None and arr.shape != tuple(grid_shape):
        raise ShapeError(f"mask shape {arr.shape} does not match grid {tuple(grid_shape)}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return arr.astype(bool)


def check_same_shape(*arrays, names=None):
    shapes = [tuple(np.shape(a)) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ShapeError(f"{label} have mismatched shapes {shapes}")


def check_positive(value, name):
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value
