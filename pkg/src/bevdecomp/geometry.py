"""Grid specifications and deterministic resampling between BEV rasters.

Conventions used throughout the package:

* The ego camera sits at the origin. ``x`` points forward along the optical
  axis, ``y`` points to the camera's right, so that azimuth
  ``theta = atan2(y, x)`` increases left to right, like image columns.
* Cartesian maps are channel-first ``(K, H, W)`` arrays. Row ``i`` covers
  ``x`` in ``[x_min + i*res, x_min + (i+1)*res)``, column ``j`` covers ``y`` in
  ``[y_min + j*res, y_min + (j+1)*res)``.
* Polar maps are ``(K, R, A)`` arrays. Row ``i`` is the range bin
  ``[i*dr, (i+1)*dr)`` and column ``j`` the azimuth bin
  ``[-fov/2 + j*da, -fov/2 + (j+1)*da)``.

All warps accept any number of leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

# ~53.13 deg: the wedge of the default [0, 50] x [-25, 25] map seen from the origin.
DEFAULT_FOV = 2.0 * math.atan(0.5)


def _cells(extent: float, resolution: float) -> int:
    n = extent / resolution
    if n <= 0 or not math.isclose(n, round(n), rel_tol=0.0, abs_tol=1e-6):
        raise ValueError(
            f"extent {extent} is not a positive multiple of resolution {resolution}")
    return int(round(n))


@dataclass(frozen=True)
class GridSpec:
    """Metric extent and resolution of a Cartesian BEV raster."""

    x_range: tuple[float, float] = (0.0, 50.0)
    y_range: tuple[float, float] = (-25.0, 25.0)
    resolution: float = 0.25
    height_cells: int = field(init=False)
    width_cells: int = field(init=False)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        object.__setattr__(self, "height_cells",
                           _cells(self.x_range[1] - self.x_range[0], self.resolution))
        object.__setattr__(self, "width_cells",
                           _cells(self.y_range[1] - self.y_range[0], self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` center coordinates, each of shape ``(H, W)``."""
        xs = self.x_range[0] + (np.arange(self.height_cells) + 0.5) * self.resolution
        ys = self.y_range[0] + (np.arange(self.width_cells) + 0.5) * self.resolution
        return np.meshgrid(xs, ys, indexing="ij")

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "resolution": self.resolution}


@dataclass(frozen=True)
class PolarSpec:
    """Range x azimuth raster covering the camera's field of view."""

    range_bins: int = 64
    azimuth_bins: int = 176
    max_range: float = 50.0
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if self.range_bins < 1 or self.azimuth_bins < 1:
            raise ValueError("polar raster dimensions must be positive")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if not 0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.range_bins, self.azimuth_bins)

    @property
    def range_step(self) -> float:
        return self.max_range / self.range_bins

    @property
    def azimuth_step(self) -> float:
        return self.fov / self.azimuth_bins

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(r, theta)`` centers, each of shape ``(R, A)``."""
        r = (np.arange(self.range_bins) + 0.5) * self.range_step
        theta = -self.fov / 2 + (np.arange(self.azimuth_bins) + 0.5) * self.azimuth_step
        return np.meshgrid(r, theta, indexing="ij")

    def to_dict(self) -> dict:
        return {"range_bins": self.range_bins, "azimuth_bins": self.azimuth_bins,
                "max_range": self.max_range, "fov": self.fov}


@dataclass(frozen=True)
class CameraModel:
    """Ideal pinhole camera with square pixels and no pitch or roll."""

    fov: float = DEFAULT_FOV
    image_width: int = 352
    image_height: int = 128
    camera_height: float = 1.5
    # Row of the horizon in the (already cropped) image.
    horizon_row: float = 16.0

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be positive")
        if not self.camera_height > 0:
            raise ValueError("camera_height must be positive")

    @property
    def focal(self) -> float:
        return (self.image_width / 2) / math.tan(self.fov / 2)

    @property
    def cx(self) -> float:
        return self.image_width / 2

    def column_azimuth(self, u) -> np.ndarray:
        """Azimuth of the ray through the center of image column ``u``."""
        return np.arctan((np.asarray(u, dtype=float) + 0.5 - self.cx) / self.focal)

    def to_dict(self) -> dict:
        return {"fov": self.fov, "image_width": self.image_width,
                "image_height": self.image_height, "camera_height": self.camera_height,
                "horizon_row": self.horizon_row}


def _check_fov(cam: CameraModel, pspec: PolarSpec):
    if not math.isclose(cam.fov, pspec.fov, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"camera fov {cam.fov} does not match polar fov {pspec.fov}")


def _check_map(arr: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim < 3 or arr.shape[-2:] != tuple(shape):
        raise ValueError(f"{what} map must have shape (..., K, {shape[0]}, {shape[1]}), "
                         f"got {arr.shape}")
    return arr


@lru_cache(maxsize=32)
def _polar_lookup(gspec: GridSpec, pspec: PolarSpec):
    """Cartesian (row, col) index for every polar cell center, plus validity."""
    r, theta = pspec.cell_centers()
    x = r * np.cos(theta)
    y = r * np.sin(theta)
    i = np.floor((x - gspec.x_range[0]) / gspec.resolution).astype(np.int64)
    j = np.floor((y - gspec.y_range[0]) / gspec.resolution).astype(np.int64)
    valid = (i >= 0) & (i < gspec.height_cells) & (j >= 0) & (j < gspec.width_cells)
    for a in (i, j, valid):
        a.flags.writeable = False
    return i, j, valid


@lru_cache(maxsize=32)
def _cart_lookup(gspec: GridSpec, pspec: PolarSpec):
    """Polar (row, col) index for every Cartesian cell center, plus validity."""
    x, y = gspec.cell_centers()
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    i = np.floor(r / pspec.range_step).astype(np.int64)
    j = np.floor((theta + pspec.fov / 2) / pspec.azimuth_step).astype(np.int64)
    valid = ((np.abs(theta) < pspec.fov / 2) & (r < pspec.max_range)
             & (i < pspec.range_bins) & (j >= 0) & (j < pspec.azimuth_bins))
    i = np.clip(i, 0, pspec.range_bins - 1)
    j = np.clip(j, 0, pspec.azimuth_bins - 1)
    for a in (i, j, valid):
        a.flags.writeable = False
    return i, j, valid


def cart_to_polar(cart, cam: CameraModel, gspec: GridSpec, pspec: PolarSpec,
                  method: str = "nearest") -> np.ndarray:
    """Resample a Cartesian BEV map onto the polar raster.

    Every polar cell takes the value of the Cartesian cell containing its
    center (``method="nearest"``), or a bilinear blend of cell centers
    (``method="bilinear"``, for soft maps). Polar cells whose center falls
    outside the Cartesian map are zero.
    """
    _check_fov(cam, pspec)
    if gspec.x_range[1] < pspec.max_range:
        raise ValueError("Cartesian forward extent does not cover the polar max_range")
    cart = _check_map(cart, gspec.shape, "Cartesian")
    if method == "nearest":
        i, j, valid = _polar_lookup(gspec, pspec)
        out = cart[..., i, j]
        return np.where(valid, out, np.zeros((), dtype=cart.dtype))
    if method == "bilinear":
        r, theta = pspec.cell_centers()
        rows = (r * np.cos(theta) - gspec.x_range[0]) / gspec.resolution - 0.5
        cols = (r * np.sin(theta) - gspec.y_range[0]) / gspec.resolution - 0.5
        return _bilinear(cart, rows, cols)
    raise ValueError(f"unknown resampling method {method!r}")


def polar_to_cart(polar, cam: CameraModel, gspec: GridSpec, pspec: PolarSpec,
                  method: str = "nearest") -> np.ndarray:
    """Resample a polar map back onto the Cartesian grid.

    Cartesian cells outside the field-of-view wedge or beyond ``max_range``
    are zero.
    """
    _check_fov(cam, pspec)
    polar = _check_map(polar, pspec.shape, "polar")
    i, j, valid = _cart_lookup(gspec, pspec)
    if method == "nearest":
        out = polar[..., i, j]
    elif method == "bilinear":
        x, y = gspec.cell_centers()
        rows = np.hypot(x, y) / pspec.range_step - 0.5
        cols = (np.arctan2(y, x) + pspec.fov / 2) / pspec.azimuth_step - 0.5
        out = _bilinear(polar, rows, cols, edge="nearest")
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return np.where(valid, out, np.zeros((), dtype=out.dtype))


def _bilinear(arr: np.ndarray, rows: np.ndarray, cols: np.ndarray,
              edge: str = "constant") -> np.ndarray:
    lead = arr.shape[:-2]
    flat = arr.reshape((-1,) + arr.shape[-2:]).astype(np.float64)
    coords = np.stack([rows.ravel(), cols.ravel()])
    out = np.stack([ndimage.map_coordinates(c, coords, order=1, mode=edge, cval=0.0)
                    for c in flat])
    return out.reshape(lead + rows.shape)


def fov_mask(cam: CameraModel, gspec: GridSpec, max_range: float | None = None) -> np.ndarray:
    """Boolean ``(H, W)`` mask of cell centers strictly inside the FOV wedge.

    ``max_range`` defaults to the forward extent of the grid.
    """
    if max_range is None:
        max_range = gspec.x_range[1]
    x, y = gspec.cell_centers()
    return (np.abs(np.arctan2(y, x)) < cam.fov / 2) & (np.hypot(x, y) < max_range)


def polar_fov_mask(cam: CameraModel, gspec: GridSpec, pspec: PolarSpec) -> np.ndarray:
    """Cartesian cells that receive a value from ``polar_to_cart``."""
    _check_fov(cam, pspec)
    return _cart_lookup(gspec, pspec)[2].copy()


def range_map(gspec: GridSpec) -> np.ndarray:
    """Metric distance of every Cartesian cell center from the camera."""
    x, y = gspec.cell_centers()
    return np.hypot(x, y)


@dataclass(frozen=True)
class CartesianRasterSpec:
    """Coarse Cartesian raster with the same cell count as a polar raster.

    Used when training without the coordinate transform: the network output
    keeps its ``(R, A)`` shape but rows are forward distance and columns are
    lateral offset over the full map extent.
    """

    rows: int = 64
    cols: int = 176

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@lru_cache(maxsize=32)
def _coarse_lookup(gspec: GridSpec, cspec: CartesianRasterSpec):
    dx = (gspec.x_range[1] - gspec.x_range[0]) / cspec.rows
    dy = (gspec.y_range[1] - gspec.y_range[0]) / cspec.cols
    # fine cell center -> coarse cell
    x, y = gspec.cell_centers()
    ci = np.clip(np.floor((x - gspec.x_range[0]) / dx).astype(np.int64), 0, cspec.rows - 1)
    cj = np.clip(np.floor((y - gspec.y_range[0]) / dy).astype(np.int64), 0, cspec.cols - 1)
    # coarse cell center -> fine cell
    xc = gspec.x_range[0] + (np.arange(cspec.rows) + 0.5) * dx
    yc = gspec.y_range[0] + (np.arange(cspec.cols) + 0.5) * dy
    fi = np.floor((xc - gspec.x_range[0]) / gspec.resolution).astype(np.int64)
    fj = np.floor((yc - gspec.y_range[0]) / gspec.resolution).astype(np.int64)
    fi, fj = np.meshgrid(fi, fj, indexing="ij")
    return ci, cj, fi, fj


def cart_to_coarse(cart, gspec: GridSpec, cspec: CartesianRasterSpec) -> np.ndarray:
    """Nearest-neighbour downsample of a Cartesian map to ``cspec``."""
    cart = _check_map(cart, gspec.shape, "Cartesian")
    _, _, fi, fj = _coarse_lookup(gspec, cspec)
    return cart[..., fi, fj]


def coarse_to_cart(coarse, gspec: GridSpec, cspec: CartesianRasterSpec) -> np.ndarray:
    """Nearest-neighbour upsample of a coarse Cartesian map to ``gspec``."""
    coarse = _check_map(coarse, cspec.shape, "coarse Cartesian")
    ci, cj, _, _ = _coarse_lookup(gspec, cspec)
    return coarse[..., ci, cj]
