import numpy as np

from bevdecomp.geometry import GridSpec


def random_rect_map(seed, gspec=None, k=3, count=(1, 6), side=(3.0, 15.0)):
    """Union of randomly rotated rectangles per channel, as a boolean map."""
    gspec = gspec or GridSpec()
    rng = np.random.default_rng(seed)
    x, y = gspec.cell_centers()
    m = np.zeros((k,) + gspec.shape, dtype=bool)
    for c in range(k):
        for _ in range(rng.integers(*count)):
            cx = rng.uniform(*gspec.x_range)
            cy = rng.uniform(*gspec.y_range)
            length, width = rng.uniform(*side, size=2)
            a = rng.uniform(0, np.pi)
            u = (x - cx) * np.cos(a) + (y - cy) * np.sin(a)
            v = -(x - cx) * np.sin(a) + (y - cy) * np.cos(a)
            m[c] |= (np.abs(u) < length / 2) & (np.abs(v) < width / 2)
    return m


def random_binary(seed, shape, p=0.3):
    return np.random.default_rng(seed).random(shape) < p
