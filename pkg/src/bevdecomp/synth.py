"""Procedural driving scenes: BEV ground truth, pinhole rendering, visibility.

A scene is built on the Cartesian grid: a (possibly curved) main road through
the ego position, an optional cross road, walkways flanking the roads,
pedestrian crossings, and heading-aligned vehicle and pedestrian boxes. The
image is a flat-shaded pinhole rendering of the ground classes plus the boxes
extruded to their physical height.

Randomness comes from a single ``numpy.random.Generator`` backed by PCG64 and
seeded with the 64-bit scene seed, so samples are reproducible bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import CameraModel, GridSpec, fov_mask

CLASS_NAMES = ("drivable", "crossing", "walkway", "car", "truck", "pedestrian")
LAYOUT_CLASSES = ("drivable", "crossing", "walkway")
OBJECT_CLASSES = ("car", "truck", "pedestrian")
STRATA = {
    "layout": ("drivable", "crossing", "walkway"),
    "large_object": ("car", "truck"),
    "small_object": ("pedestrian",),
}

# Flat albedo per class (RGB in [0, 1]); ground classes are painted in order.
_ALBEDO = {
    "terrain": (0.36, 0.45, 0.28),
    "drivable": (0.30, 0.30, 0.32),
    "crossing": (0.82, 0.82, 0.80),
    "walkway": (0.62, 0.56, 0.48),
    "car": (0.70, 0.12, 0.10),
    "truck": (0.15, 0.30, 0.75),
    "pedestrian": (0.95, 0.80, 0.10),
    "sky": (0.60, 0.75, 0.92),
}


class SceneError(ValueError):
    """Raised for infeasible scene recipes."""


@dataclass(frozen=True)
class PlacedObject:
    """An explicitly placed box: center in meters, heading in radians."""

    cls: str
    x: float
    y: float
    length: float
    width: float
    height: float
    heading: float = 0.0


@dataclass(frozen=True)
class SceneRecipe:
    """Parameters of the procedural scene distribution.

    Densities are expected object counts per scene (Poisson means). Extents
    are ``(min, max)`` ranges in meters.
    """

    class_names: tuple[str, ...] = CLASS_NAMES
    car_density: float = 6.0
    truck_density: float = 1.0
    pedestrian_density: float = 6.0
    lane_width: float = 3.5
    lanes: tuple[int, int] = (2, 4)
    curvature: tuple[float, float] = (-0.015, 0.015)
    ego_offset: tuple[float, float] = (-2.0, 2.0)
    walkway_width: tuple[float, float] = (2.0, 3.5)
    intersection_prob: float = 0.5
    crossing_prob: float = 0.6
    crossing_width: float = 3.0
    car_length: tuple[float, float] = (3.8, 5.0)
    car_width: tuple[float, float] = (1.7, 2.0)
    car_height: tuple[float, float] = (1.4, 1.7)
    truck_length: tuple[float, float] = (6.0, 10.0)
    truck_width: tuple[float, float] = (2.3, 2.6)
    truck_height: tuple[float, float] = (2.8, 3.6)
    pedestrian_size: tuple[float, float] = (0.6, 0.9)
    pedestrian_height: tuple[float, float] = (1.6, 1.9)
    require_drivable: bool = True
    fixed_objects: tuple[PlacedObject, ...] = ()
    pixel_noise: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "fixed_objects", tuple(
            o if isinstance(o, PlacedObject) else PlacedObject(**o)
            for o in self.fixed_objects))
        if self.class_names != CLASS_NAMES:
            raise SceneError(f"class set must be {CLASS_NAMES}, got {self.class_names}")
        for name in ("car_density", "truck_density", "pedestrian_density",
                     "intersection_prob", "crossing_prob", "pixel_noise"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be non-negative")
        for name in ("car_length", "car_width", "car_height", "truck_length",
                     "truck_width", "truck_height", "pedestrian_size",
                     "pedestrian_height", "walkway_width"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise SceneError(f"{name} must be a positive (min, max) range")
        if not self.lane_width > 0 or not 1 <= self.lanes[0] <= self.lanes[1]:
            raise SceneError("road layout parameters are invalid")
        if not self.require_drivable and (self.car_density > 0 or self.truck_density > 0):
            raise SceneError("vehicle placement requires a drivable area")
        for obj in self.fixed_objects:
            if obj.cls not in OBJECT_CLASSES:
                raise SceneError(f"fixed object class {obj.cls!r} is not an object class")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed_objects"] = [asdict(o) for o in self.fixed_objects]
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SceneSample:
    """A rendered scene with its Cartesian ground truth.

    ``bev`` is a boolean ``(K, H, W)`` array over the grid, ``visibility`` a
    boolean ``(H, W)`` array, ``image`` a float32 ``(H_img, W_img, 3)`` array
    quantized to multiples of 1/255.
    """

    image: np.ndarray
    bev: np.ndarray
    visibility: np.ndarray
    cam: CameraModel
    gspec: GridSpec
    seed: int
    objects: list = field(default_factory=list)
    class_names: tuple[str, ...] = CLASS_NAMES


def _box_mask(x, y, obj: PlacedObject) -> np.ndarray:
    c, s = math.cos(obj.heading), math.sin(obj.heading)
    u = (x - obj.x) * c + (y - obj.y) * s
    v = -(x - obj.x) * s + (y - obj.y) * c
    return (np.abs(u) <= obj.length / 2) & (np.abs(v) <= obj.width / 2)


def _road_frame(x, y, offset, curvature):
    """Signed lateral distance from a road centerline ``y = offset + k x^2 / 2``."""
    slope = curvature * x
    return (y - offset - 0.5 * curvature * x * x) / np.sqrt(1.0 + slope * slope)


def _layout(rng, recipe: SceneRecipe, x, y):
    """Rasterize ground classes; returns masks and lane descriptions."""
    lanes = int(rng.integers(recipe.lanes[0], recipe.lanes[1] + 1))
    half = lanes * recipe.lane_width / 2
    curvature = rng.uniform(*recipe.curvature)
    offset = rng.uniform(*recipe.ego_offset)
    walk = rng.uniform(*recipe.walkway_width)

    lat = _road_frame(x, y, offset, curvature)
    drivable = np.abs(lat) <= half
    walkway = (np.abs(lat) > half) & (np.abs(lat) <= half + walk)
    crossing = np.zeros_like(drivable)
    roads = [("main", offset, curvature, half)]

    if rng.random() < recipe.intersection_prob:
        x0 = rng.uniform(15.0, 40.0)
        skew = rng.uniform(-0.2, 0.2)
        cross_lanes = int(rng.integers(recipe.lanes[0], recipe.lanes[1] + 1))
        chalf = cross_lanes * recipe.lane_width / 2
        along = (x - x0 - skew * y) / math.sqrt(1 + skew * skew)
        cross = np.abs(along) <= chalf
        cwalk = (np.abs(along) > chalf) & (np.abs(along) <= chalf + walk)
        walkway = (walkway | cwalk) & ~(drivable | cross)
        # crossings on the main road just before and after the junction
        for side in (-1.0, 1.0):
            lo = chalf + 0.5
            band = (side * along >= lo) & (side * along < lo + recipe.crossing_width)
            crossing |= band & drivable
            # and on the cross road next to the main road
        for side in (-1.0, 1.0):
            band = (side * lat >= half + 0.5) & (side * lat < half + 0.5 + recipe.crossing_width)
            crossing |= band & cross
        drivable = drivable | cross
        roads.append(("cross", x0, skew, chalf))
    elif rng.random() < recipe.crossing_prob:
        xc = rng.uniform(8.0, 42.0)
        along = x - xc
        crossing |= (np.abs(along) <= recipe.crossing_width / 2) & drivable

    return {"drivable": drivable, "crossing": crossing, "walkway": walkway}, roads, \
        (offset, curvature, half, walk, lanes)


def _sample_objects(rng, recipe: SceneRecipe, gspec: GridSpec, ground, road_params):
    offset, curvature, half, walk, lanes = road_params
    x_lo, x_hi = gspec.x_range
    objects = []
    n_car = rng.poisson(recipe.car_density)
    n_truck = rng.poisson(recipe.truck_density)
    n_ped = rng.poisson(recipe.pedestrian_density)
    kinds = ["truck"] * n_truck + ["car"] * n_car + ["pedestrian"] * n_ped
    x, y = gspec.cell_centers()
    occupied = np.zeros(gspec.shape, dtype=bool)
    for obj in recipe.fixed_objects:
        occupied |= _box_mask(x, y, obj)
        objects.append(obj)
    for kind in kinds:
        for _ in range(20):
            if kind == "pedestrian":
                size = rng.uniform(*recipe.pedestrian_size)
                length = width = size
                height = rng.uniform(*recipe.pedestrian_height)
                px = rng.uniform(x_lo + 2.0, x_hi)
                side = 1.0 if rng.random() < 0.5 else -1.0
                if walk > 0.6:
                    lat = side * (half + rng.uniform(0.3, walk - 0.3))
                else:
                    # no road to flank: anywhere across the map
                    lat = rng.uniform(*gspec.y_range)
                heading = rng.uniform(0, math.pi)
            else:
                ext = (recipe.car_length, recipe.car_width, recipe.car_height) \
                    if kind == "car" else \
                    (recipe.truck_length, recipe.truck_width, recipe.truck_height)
                length, width, height = (rng.uniform(*e) for e in ext)
                px = rng.uniform(x_lo + 4.0, x_hi + 2.0)
                lane = int(rng.integers(0, lanes))
                lat = -half + (lane + 0.5) * recipe.lane_width + rng.uniform(-0.3, 0.3)
                heading = 0.0
            py = offset + 0.5 * curvature * px * px + lat
            heading += math.atan(curvature * px)
            obj = PlacedObject(kind, float(px), float(py), float(length), float(width),
                               float(height), float(heading))
            mask = _box_mask(x, y, obj)
            if not mask.any() or (mask & occupied).any():
                continue
            # keep the ego footprint clear
            if abs(px) < 3.0 + length / 2 and abs(py) < 1.5 + width / 2:
                continue
            occupied |= mask
            objects.append(obj)
            break
    return objects


def compute_visibility(object_ids: np.ndarray, cam: CameraModel, gspec: GridSpec,
                       step: float | None = None, n_rays: int = 2048) -> np.ndarray:
    """Visibility by 2D ray casting from the camera cell.

    A fan of ``n_rays`` rays is marched across the FOV to find the first
    object cell on each ray. A cell inside the FOV wedge is visible when it
    lies in front of the first hit on its ray, or belongs to the object that
    was hit.
    """
    fov = fov_mask(cam, gspec)
    if not object_ids.any():
        return fov
    if step is None:
        step = gspec.resolution / 5
    h, w = gspec.shape
    x, y = gspec.cell_centers()
    max_r = float(np.hypot(x, y)[fov].max()) + step
    theta = -cam.fov / 2 + (np.arange(n_rays) + 0.5) * cam.fov / n_rays
    dist = np.arange(1, int(math.ceil(max_r / step)) + 1) * step
    px = dist[None, :] * np.cos(theta)[:, None]
    py = dist[None, :] * np.sin(theta)[:, None]
    i = np.floor((px - gspec.x_range[0]) / gspec.resolution).astype(np.int64)
    j = np.floor((py - gspec.y_range[0]) / gspec.resolution).astype(np.int64)
    ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
    hit = np.where(ok, object_ids[np.clip(i, 0, h - 1), np.clip(j, 0, w - 1)], 0)
    first = np.argmax(hit > 0, axis=1)
    any_hit = hit[np.arange(n_rays), first] > 0
    hit_range = np.where(any_hit, dist[first], np.inf)
    hit_id = np.where(any_hit, hit[np.arange(n_rays), first], 0)

    r = np.hypot(x, y)
    ray = np.clip(np.floor((np.arctan2(y, x) + cam.fov / 2) / (cam.fov / n_rays)),
                  0, n_rays - 1).astype(np.int64)
    visible = (r < hit_range[ray]) | ((object_ids > 0) & (object_ids == hit_id[ray]))
    return fov & visible


def render(ground: dict, objects: list, object_ids: np.ndarray, cam: CameraModel,
           gspec: GridSpec, rng, pixel_noise: float = 0.03) -> np.ndarray:
    """Flat-shaded pinhole rendering of the ground classes and extruded boxes."""
    H, W = cam.image_height, cam.image_width
    f, cx, cy, hcam = cam.focal, cam.cx, cam.horizon_row, cam.camera_height
    img = np.empty((H, W, 3), dtype=np.float64)
    img[:] = _ALBEDO["sky"]
    v = np.arange(H)[:, None] + 0.5
    u = np.arange(W)[None, :] + 0.5
    below = np.broadcast_to(v > cy + 1e-6, (H, W))
    depth = np.where(below, f * hcam / np.maximum(v - cy, 1e-6), 1e9)
    gx = depth
    gy = depth * (u - cx) / f
    gi = np.floor((gx - gspec.x_range[0]) / gspec.resolution).astype(np.int64)
    gj = np.floor((gy - gspec.y_range[0]) / gspec.resolution).astype(np.int64)
    on_map = below & (gi >= 0) & (gi < gspec.height_cells) & (gj >= 0) & (gj < gspec.width_cells)
    gi = np.clip(gi, 0, gspec.height_cells - 1)
    gj = np.clip(gj, 0, gspec.width_cells - 1)
    img[below] = _ALBEDO["terrain"]
    for name in ("drivable", "crossing", "walkway"):
        m = on_map & ground[name][gi, gj]
        img[m] = _ALBEDO[name]
    # fade the ground towards a haze colour with distance
    haze = np.clip(depth / 120.0, 0.0, 0.6)[..., None]
    img = np.where(below[..., None], img * (1 - haze) + 0.7 * haze, img)

    if objects:
        # painter's algorithm along each column's ray, far to near
        tan_u = (u[0] - cx) / f
        step = gspec.resolution / 2
        depths = np.arange(gspec.x_range[1] + 8.0, 0.5, -step)
        heights = np.array([0.0] + [o.height for o in objects])
        tint = rng.uniform(-0.08, 0.08, size=(len(objects) + 1, 3))
        colors = np.array([(0, 0, 0)] + [_ALBEDO[o.cls] for o in objects]) + tint
        rows = np.arange(H)[:, None]
        h, w = gspec.shape
        for z in depths:
            py = z * tan_u
            i = int(math.floor((z - gspec.x_range[0]) / gspec.resolution))
            if i < 0 or i >= h:
                continue
            j = np.floor((py - gspec.y_range[0]) / gspec.resolution).astype(np.int64)
            okj = (j >= 0) & (j < w)
            oid = np.where(okj, object_ids[i, np.clip(j, 0, w - 1)], 0)
            cols = np.flatnonzero(oid)
            if cols.size == 0:
                continue
            ht = heights[oid[cols]]
            v_bot = cy + f * hcam / z
            v_top = cy + f * (hcam - ht) / z
            paint = (rows + 0.5 >= v_top[None, :]) & (rows + 0.5 < v_bot)
            shade = 1.0 - 0.25 * min(z / 60.0, 1.0)
            col = colors[oid[cols]] * shade
            img[:, cols] = np.where(paint[..., None], col[None], img[:, cols])
    img += rng.normal(0.0, pixel_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_scene(recipe: SceneRecipe, cam: CameraModel, gspec: GridSpec, seed: int,
                   render_image: bool = True) -> SceneSample:
    """Generate one scene deterministically from ``seed``."""
    if cam.fov >= math.pi:
        raise SceneError("camera fov must be below pi")
    rng = np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))
    x, y = gspec.cell_centers()
    if recipe.require_drivable:
        ground, roads, road_params = _layout(rng, recipe, x, y)
    else:
        empty = np.zeros(gspec.shape, dtype=bool)
        ground = {"drivable": empty, "crossing": empty.copy(), "walkway": empty.copy()}
        road_params = (0.0, 0.0, 0.0, 0.0, 1)
    objects = _sample_objects(rng, recipe, gspec, ground, road_params)

    bev = np.zeros((len(CLASS_NAMES),) + gspec.shape, dtype=bool)
    for k, name in enumerate(LAYOUT_CLASSES):
        bev[k] = ground[name]
    object_ids = np.zeros(gspec.shape, dtype=np.int32)
    for n, obj in enumerate(objects, start=1):
        m = _box_mask(x, y, obj) & (object_ids == 0)
        object_ids[m] = n
        bev[CLASS_NAMES.index(obj.cls)] |= m

    visibility = compute_visibility(object_ids, cam, gspec)
    if render_image:
        image = render(ground, objects, object_ids, cam, gspec, rng, recipe.pixel_noise)
    else:
        image = np.zeros((cam.image_height, cam.image_width, 3), dtype=np.float32)
    return SceneSample(image=image, bev=bev, visibility=visibility, cam=cam, gspec=gspec,
                       seed=int(seed), objects=objects)
