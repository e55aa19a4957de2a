"""On-disk synthetic datasets.

Layout::

    <root>/manifest.json
    <root>/train/<id>.png       8-bit RGB image (lossless)
    <root>/train/<id>.bits      np.packbits of the (K+1, H, W) mask stack,
                                 BEV channels followed by visibility
    <root>/train/<id>.json      per-sample metadata (seed, camera, shape)
    <root>/val/...

The manifest is canonical JSON (sorted keys, no timestamps) so a rebuild
with the same arguments is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel, GridSpec, PolarSpec, cart_to_polar
from .synth import CLASS_NAMES, SceneRecipe, SceneSample, generate_scene

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class DatasetError(RuntimeError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def sample_seeds(seed: int, n: int) -> list[int]:
    """Per-sample 64-bit seeds derived from the dataset seed."""
    state = np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint64)
    return [int(s) for s in state]


def split_counts(n: int) -> tuple[int, int]:
    n_val = n // 10
    return n - n_val, n_val


def dataset_key(recipe: SceneRecipe, cam: CameraModel, gspec: GridSpec,
                pspec: PolarSpec, n: int, seed: int) -> str:
    blob = _dumps({"recipe": recipe.to_dict(), "camera": cam.to_dict(),
                   "grid": gspec.to_dict(), "polar": pspec.to_dict(),
                   "n": n, "seed": seed, "format_version": FORMAT_VERSION})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_sample(directory: Path, sample_id: str, sample: SceneSample):
    img = np.round(sample.image * 255.0).astype(np.uint8)
    Image.fromarray(img).save(directory / f"{sample_id}.png", optimize=False)
    stack = np.concatenate([sample.bev, sample.visibility[None]], axis=0)
    (directory / f"{sample_id}.bits").write_bytes(np.packbits(stack.ravel()).tobytes())
    meta = {"id": sample_id, "seed": sample.seed, "camera": sample.cam.to_dict(),
            "mask_shape": list(stack.shape), "class_names": list(sample.class_names)}
    (directory / f"{sample_id}.json").write_text(_dumps(meta))


def read_sample(directory: Path, sample_id: str):
    """Return ``(image float32 HxWx3, bev bool KxHxW, visibility bool HxW, meta)``."""
    directory = Path(directory)
    meta = json.loads((directory / f"{sample_id}.json").read_text())
    shape = tuple(meta["mask_shape"])
    raw = np.frombuffer((directory / f"{sample_id}.bits").read_bytes(), dtype=np.uint8)
    stack = np.unpackbits(raw, count=int(np.prod(shape))).reshape(shape).astype(bool)
    with Image.open(directory / f"{sample_id}.png") as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return image, stack[:-1], stack[-1], meta


def build_dataset(recipe: SceneRecipe, cam: CameraModel, gspec: GridSpec, n: int,
                  seed: int, out: str | Path, pspec: PolarSpec | None = None,
                  overwrite: bool = False) -> dict:
    """Generate ``n`` scenes under ``out`` and write the manifest.

    Returns the manifest. If a manifest for the same arguments already exists
    the call is a no-op (``manifest["up_to_date"]`` is set on the returned
    copy). A differing manifest raises :class:`DatasetError` unless
    ``overwrite`` is set.
    """
    if n < 1:
        raise DatasetError("n must be at least 1")
    pspec = pspec or PolarSpec(fov=cam.fov)
    out = Path(out)
    key = dataset_key(recipe, cam, gspec, pspec, n, seed)
    manifest_path = out / MANIFEST
    if manifest_path.exists() and not overwrite:
        existing = json.loads(manifest_path.read_text())
        if existing.get("dataset_key") == key:
            existing["up_to_date"] = True
            return existing
        if existing.get("recipe_hash") != recipe.hash():
            raise DatasetError(
                f"manifest collision at {manifest_path}: recipe hash "
                f"{existing.get('recipe_hash')} != {recipe.hash()}")
        raise DatasetError(f"{manifest_path} was built with different arguments")

    n_train, _ = split_counts(n)
    seeds = sample_seeds(seed, n)
    splits = {"train": [], "val": []}
    cart_counts = np.zeros(len(CLASS_NAMES))
    polar_counts = np.zeros(len(CLASS_NAMES))
    cart_cells = polar_cells = 0
    for split in splits:
        (out / split).mkdir(parents=True, exist_ok=True)
    for idx, s in enumerate(seeds):
        split = "train" if idx < n_train else "val"
        sample_id = f"{idx:06d}"
        sample = generate_scene(recipe, cam, gspec, s)
        write_sample(out / split, sample_id, sample)
        splits[split].append({"id": sample_id, "seed": s})
        if split == "train":
            cart_counts += sample.bev.sum(axis=(1, 2))
            cart_cells += sample.bev[0].size
            polar = cart_to_polar(sample.bev, cam, gspec, pspec)
            polar_counts += polar.sum(axis=(1, 2))
            polar_cells += polar[0].size
        if (idx + 1) % 200 == 0:
            logger.info("generated %d/%d scenes", idx + 1, n)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_key": key,
        "recipe_hash": recipe.hash(),
        "recipe": recipe.to_dict(),
        "camera": cam.to_dict(),
        "grid": gspec.to_dict(),
        "polar": pspec.to_dict(),
        "class_names": list(CLASS_NAMES),
        "n": n,
        "seed": seed,
        "class_frequencies": {
            "cartesian": (cart_counts / max(cart_cells, 1)).round(8).tolist(),
            "polar": (polar_counts / max(polar_cells, 1)).round(8).tolist(),
        },
        "splits": splits,
    }
    manifest_path.write_text(_dumps(manifest))
    return manifest


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')}")
    return manifest


@dataclass
class SplitArrays:
    """A dataset split held in memory.

    ``images`` is uint8 ``(N, 3, H, W)``; ``bev`` and ``visibility`` are the
    full-resolution Cartesian masks.
    """

    ids: list[str]
    seeds: list[int]
    images: np.ndarray
    bev: np.ndarray
    visibility: np.ndarray

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "SplitArrays":
        idx = list(idx)
        return SplitArrays([self.ids[i] for i in idx], [self.seeds[i] for i in idx],
                           self.images[idx], self.bev[idx], self.visibility[idx])


def load_split(root: str | Path, split: str, limit: int | None = None) -> SplitArrays:
    root = Path(root)
    manifest = load_manifest(root)
    entries = manifest["splits"][split]
    if limit is not None:
        entries = entries[:limit]
    if not entries:
        raise DatasetError(f"split {split!r} of {root} is empty")
    images, bevs, vis = [], [], []
    for e in entries:
        image, bev, v, meta = read_sample(root / split, e["id"])
        if meta["seed"] != e["seed"]:
            raise DatasetError(f"sample {e['id']} seed does not match the manifest")
        images.append(np.round(image * 255).astype(np.uint8).transpose(2, 0, 1))
        bevs.append(bev)
        vis.append(v)
    return SplitArrays([e["id"] for e in entries], [e["seed"] for e in entries],
                       np.stack(images), np.stack(bevs), np.stack(vis))


def generate_split(recipe: SceneRecipe, cam: CameraModel, gspec: GridSpec, n: int,
                   seed: int, render_image: bool = True) -> SplitArrays:
    """In-memory counterpart of :func:`build_dataset` for a single split."""
    seeds = sample_seeds(seed, n)
    images, bevs, vis = [], [], []
    for s in seeds:
        sample = generate_scene(recipe, cam, gspec, s, render_image=render_image)
        images.append(np.round(sample.image * 255).astype(np.uint8).transpose(2, 0, 1))
        bevs.append(sample.bev)
        vis.append(sample.visibility)
    return SplitArrays([f"{i:06d}" for i in range(n)], seeds, np.stack(images),
                       np.stack(bevs), np.stack(vis))
