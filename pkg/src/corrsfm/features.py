"""Dense descriptors, all-pairs correlation pyramid and sub-pixel lookup.

Descriptors live on a grid a quarter the size of the input image.  Every
descriptor is unit length (or exactly zero where it is undefined), so each
correlation is a cosine similarity in ``[-1, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import DepthMap, Intrinsics, PoseSE3, in_bounds, pixel_grid, project

BACKENDS = ("census", "normalized-patch", "external-file")
NUM_LEVELS = 3
MIN_IMAGE_SIZE = 16
# quarter-grid pixel count above which the level-0 volume is not materialised
DENSE_LIMIT = 48 * 64
_CENSUS_EPS = 1e-9


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    grid: np.ndarray  # (h, w, D)

    @property
    def shape(self):
        return self.grid.shape[:2]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]

    def zero_fraction(self) -> float:
        return float(np.mean(~np.any(self.grid != 0, axis=-1)))


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] == 1:
            return image[..., 0]
        return image[..., :3] @ np.array([0.299, 0.587, 0.114])
    return image


def downsample(image: np.ndarray, factor: int = 4) -> np.ndarray:
    """Block-average a grayscale image; trailing rows/columns that do not fill a block are dropped."""
    h, w = image.shape[0] // factor, image.shape[1] // factor
    crop = image[: h * factor, : w * factor]
    return crop.reshape(h, factor, w, factor).mean(axis=(1, 3))


def _normalize(grid: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(grid, axis=-1, keepdims=True)
    return np.where(norm > 0, grid / np.where(norm > 0, norm, 1.0), 0.0)


def _window_offsets(window: int):
    r = window // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _shifted(img: np.ndarray, dy: int, dx: int, pad: int) -> np.ndarray:
    h, w = img.shape
    padded = np.pad(img, pad, mode="edge")
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w]


def census_descriptors(small: np.ndarray, window: int = 7) -> np.ndarray:
    """Signed census transform: each neighbour contributes +1, -1, or 0 on ties.

    Normalised afterwards, so when no comparison ties every component is
    exactly ``±1/sqrt(D)``; a flat window yields the zero vector.
    """
    r = window // 2
    bits = []
    for dy, dx in _window_offsets(window):
        if dy == 0 and dx == 0:
            continue
        diff = _shifted(small, dy, dx, r) - small
        bits.append(np.where(diff > _CENSUS_EPS, 1.0, np.where(diff < -_CENSUS_EPS, -1.0, 0.0)))
    return _normalize(np.stack(bits, axis=-1))


def patch_descriptors(small: np.ndarray, window: int = 7) -> np.ndarray:
    r = window // 2
    patches = np.stack([_shifted(small, dy, dx, r) for dy, dx in _window_offsets(window)], axis=-1)
    patches = patches - patches.mean(axis=-1, keepdims=True)
    # flat patches are undefined rather than noise-amplified
    patches[np.abs(patches).max(axis=-1) < _CENSUS_EPS] = 0.0
    return _normalize(patches)


def read_feature_file(path) -> np.ndarray:
    """Read ``FEAT h w D`` followed by ``h*w*D`` little-endian float32 values."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FeatureError(f"cannot read feature file {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise FeatureError(f"{path}: missing header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != "FEAT":
        raise FeatureError(f"{path}: header must be 'FEAT h w D', got {raw[:nl]!r}")
    try:
        h, w, d = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise FeatureError(f"{path}: non-integer dimensions in header") from exc
    if min(h, w, d) <= 0:
        raise FeatureError(f"{path}: dimensions must be positive")
    payload = raw[nl + 1 :]
    expected = h * w * d * 4
    if len(payload) != expected:
        raise FeatureError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    grid = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, d)
    if not np.all(np.isfinite(grid)):
        raise FeatureError(f"{path}: non-finite feature values")
    return grid


def write_feature_file(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    h, w, d = grid.shape
    with open(path, "wb") as f:
        f.write(f"FEAT {h} {w} {d}\n".encode("ascii"))
        f.write(grid.astype("<f4").tobytes())


def extract_features(
    image: np.ndarray,
    backend: str = "census",
    channels: int | None = None,
    window: int = 7,
    path=None,
) -> FeatureMap:
    """Quarter-resolution unit descriptors for ``image``.

    ``channels`` defaults to ``window**2 - 1`` for census and ``window**2``
    for normalized patches; any other value is rejected.  The external-file
    backend reads ``path`` and must match the quarter grid of ``image``.
    """
    if backend not in BACKENDS:
        raise FeatureError(f"unknown descriptor backend {backend!r}; choose from {BACKENDS}")
    gray = to_gray(image)
    if gray.ndim != 2 or min(gray.shape) < MIN_IMAGE_SIZE:
        raise FeatureError(f"image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {gray.shape}")
    if window < 3 or window % 2 == 0:
        raise FeatureError(f"window must be odd and >= 3, got {window}")
    qh, qw = gray.shape[0] // 4, gray.shape[1] // 4

    if backend == "external-file":
        if path is None:
            raise FeatureError("external-file backend needs a feature file path")
        grid = read_feature_file(path)
        if grid.shape[:2] != (qh, qw):
            raise FeatureError(f"feature grid {grid.shape[:2]} does not match quarter grid {(qh, qw)}")
        if channels is not None and grid.shape[2] != channels:
            raise FeatureError(f"feature file has {grid.shape[2]} channels, expected {channels}")
        return FeatureMap(_normalize(grid))

    expected = window * window - 1 if backend == "census" else window * window
    if channels is not None and channels != expected:
        raise FeatureError(f"{backend} with a {window}x{window} window has {expected} channels, not {channels}")
    small = downsample(gray, 4)
    if backend == "census":
        return FeatureMap(census_descriptors(small, window))
    return FeatureMap(patch_descriptors(small, window))


def pool2(vol: np.ndarray) -> np.ndarray:
    """2x2 mean over the last two axes; odd sizes replicate the trailing edge."""
    a, b = vol.shape[-2:]
    pad = [(0, 0)] * (vol.ndim - 2) + [(0, a % 2), (0, b % 2)]
    if a % 2 or b % 2:
        vol = np.pad(vol, pad, mode="edge")
    a2, b2 = vol.shape[-2] // 2, vol.shape[-1] // 2
    return vol.reshape(vol.shape[:-2] + (a2, 2, b2, 2)).mean(axis=(-3, -1))


def _pool_features(grid: np.ndarray) -> np.ndarray:
    # pooling correlations over source pixels equals correlating with pooled source features
    return np.moveaxis(pool2(np.moveaxis(grid, -1, 0)), 0, -1)


def level_coords(x, k: int):
    """Level-0 source coordinate to level-``k`` coordinate (pixel-centre aligned)."""
    return (np.asarray(x, dtype=np.float64) + 0.5) / 2**k - 0.5


class CorrelationPyramid:
    """Three-level all-pairs correlation volume.

    ``levels[k][i, j, a, b]`` is the correlation between target descriptor
    ``(i, j)`` and the level-``k`` pooled source cell ``(a, b)``.  Small grids
    are materialised; larger ones keep pooled source features and evaluate
    lookups on demand, which gives the same values.
    """

    def __init__(self, F_t: FeatureMap, F_s: FeatureMap, num_levels: int = NUM_LEVELS, dense_limit: int = DENSE_LIMIT):
        if F_t.grid.shape != F_s.grid.shape:
            raise FeatureError(f"feature maps differ in shape: {F_t.grid.shape} vs {F_s.grid.shape}")
        self.shape = F_t.shape
        self.num_levels = num_levels
        self._ft = F_t.grid
        src = [F_s.grid]
        for _ in range(1, num_levels):
            src.append(_pool_features(src[-1]))
        self._src = src
        h, w = self.shape
        self.dense = h * w <= dense_limit
        self._levels = None
        if self.dense:
            v0 = np.tensordot(F_t.grid, F_s.grid, axes=([2], [2]))
            levels = [v0]
            for _ in range(1, num_levels):
                levels.append(pool2(levels[-1]))
            self._levels = levels

    @property
    def levels(self) -> list[np.ndarray]:
        if self._levels is None:
            return [np.tensordot(self._ft, s, axes=([2], [2])) for s in self._src]
        return self._levels

    def level_shape(self, k: int):
        return self._src[k].shape[:2]

    def _gather(self, k, i, j, a, b):
        if self._levels is not None:
            return self._levels[k][i, j, a, b]
        return np.einsum("...d,...d->...", self._ft[i, j], self._src[k][a, b])

    def lookup(self, i, j, x, y, k: int = 0):
        """Bilinear correlation between target cell ``(i, j)`` (row, col) and source point ``(x, y)``.

        ``(x, y)`` is a continuous level-0 source coordinate ``(column, row)``.
        A lookup is valid when the point lies inside the level-0 source grid;
        on coarser levels the mapped coordinate is clamped to the pooled grid,
        matching the edge replication used while pooling.
        """
        if not 0 <= k < self.num_levels:
            raise FeatureError(f"level must be in [0, {self.num_levels - 1}], got {k}")
        h, w = self.shape
        i = np.asarray(i, dtype=np.intp)
        j = np.asarray(j, dtype=np.intp)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        valid = in_bounds(x, y, h, w)
        hk, wk = self.level_shape(k)
        xs = np.clip(level_coords(np.where(valid, x, 0.0), k), 0, wk - 1)
        ys = np.clip(level_coords(np.where(valid, y, 0.0), k), 0, hk - 1)
        x0 = np.floor(xs).astype(np.intp)
        y0 = np.floor(ys).astype(np.intp)
        fx = xs - x0
        fy = ys - y0
        x1 = np.minimum(x0 + 1, wk - 1)
        y1 = np.minimum(y0 + 1, hk - 1)
        val = (
            self._gather(k, i, j, y0, x0) * ((1 - fx) * (1 - fy))
            + self._gather(k, i, j, y0, x1) * (fx * (1 - fy))
            + self._gather(k, i, j, y1, x0) * ((1 - fx) * fy)
            + self._gather(k, i, j, y1, x1) * (fx * fy)
        )
        return np.where(valid, val, 0.0), valid


def build_pyramid(F_t: FeatureMap, F_s: FeatureMap, dense_limit: int = DENSE_LIMIT) -> CorrelationPyramid:
    return CorrelationPyramid(F_t, F_s, dense_limit=dense_limit)


@dataclass(frozen=True)
class CorrelationMap:
    values: np.ndarray
    valid: np.ndarray


def lookup_level(P: CorrelationPyramid, x, y, level) -> tuple[np.ndarray, np.ndarray]:
    """Per-target-pixel lookup on a full ``(h, w)`` grid of source coordinates.

    ``level`` is an int, or ``"fused"`` for the mean over all levels.
    """
    h, w = P.shape
    rows, cols = np.mgrid[0:h, 0:w]
    if level == "fused":
        vals = []
        for k in range(P.num_levels):
            v, valid = P.lookup(rows, cols, x, y, k)
            vals.append(v)
        return np.mean(vals, axis=0), valid
    return P.lookup(rows, cols, x, y, int(level))


def correlation_map(P: CorrelationPyramid, depth: DepthMap, T: PoseSE3, K: Intrinsics, level=0) -> CorrelationMap:
    """Correlation observed at each target pixel under the hypothesis ``(depth, T)``.

    ``K`` must describe the quarter-resolution grid.
    """
    if depth.shape != P.shape:
        raise FeatureError(f"depth {depth.shape} does not match the feature grid {P.shape}")
    h, w = P.shape
    u, v = pixel_grid(h, w)
    d = np.where(depth.valid, depth.values, 1.0)
    up, vp, _, ok = project(u, v, d, T, K)
    ok &= depth.valid
    vals, valid = lookup_level(P, np.where(ok, up, -1.0), np.where(ok, vp, -1.0), level)
    valid &= ok
    return CorrelationMap(np.where(valid, vals, 0.0), valid)


def _node_weights(n0: int, k: int, nk: int) -> np.ndarray:
    # (n0, nk) bilinear weights placing level-k cells at level-0 node positions
    x = np.clip(level_coords(np.arange(n0), k), 0, nk - 1)
    x0 = np.floor(x).astype(np.intp)
    x1 = np.minimum(x0 + 1, nk - 1)
    f = x - x0
    W = np.zeros((n0, nk))
    np.add.at(W, (np.arange(n0), x0), 1 - f)
    np.add.at(W, (np.arange(n0), x1), f)
    return W


def correlation_rows(P: CorrelationPyramid, level, r0: int, r1: int) -> np.ndarray:
    """Correlations of target rows ``r0:r1`` at every level-0 source node, ``(r1-r0, w, h, w)``.

    Agrees with :func:`lookup_level` evaluated at integer source coordinates.
    """
    h, w = P.shape
    ks = range(P.num_levels) if level == "fused" else [int(level)]
    out = np.zeros((r1 - r0, w, h, w))
    for k in ks:
        hk, wk = P.level_shape(k)
        if P._levels is not None:
            block = P._levels[k][r0:r1]
        else:
            block = np.tensordot(P._ft[r0:r1], P._src[k], axes=([2], [2]))
        if k == 0:
            out += block
        else:
            out += np.einsum("ya,ijab,xb->ijyx", _node_weights(h, k, hk), block, _node_weights(w, k, wk), optimize=True)
    return out / len(ks)


def correlation_slice(P: CorrelationPyramid, i: int, j: int) -> np.ndarray:
    """Level-0 correlations of target cell ``(i, j)`` against every source cell."""
    if P._levels is not None:
        return P._levels[0][i, j].copy()
    return np.tensordot(P._src[0], P._ft[i, j], axes=([2], [0]))


__all__ = [
    "BACKENDS",
    "CorrelationMap",
    "CorrelationPyramid",
    "FeatureError",
    "FeatureMap",
    "build_pyramid",
    "correlation_map",
    "correlation_rows",
    "correlation_slice",
    "downsample",
    "extract_features",
    "level_coords",
    "lookup_level",
    "pool2",
    "read_feature_file",
    "to_gray",
    "write_feature_file",
]
