"""Synthetic two-view scenes with exact ground truth.

The target image is a band-limited value-noise texture defined on the
continuous target image plane.  The source image is rendered backwards: each
source pixel's ray is intersected analytically with the scene surface and the
hit point is projected into the target plane, where the same continuous
texture is evaluated.  Both views therefore agree exactly through the true
depth and pose, up to the resampling done by whoever compares them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DepthMap,
    Intrinsics,
    PoseSE3,
    backproject,
    exp_map,
    pixel_grid,
    project,
    warp_image,
)

DEPTH_MODELS = ("fronto-plane", "slanted-plane", "plane-plus-sphere")
MAX_ATTEMPTS = 100


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 96
    width: int = 128
    focal_scale: float = 0.6  # fx = fy = focal_scale * width
    depth_model: str = "plane-plus-sphere"
    depth: float = 10.0  # plane distance along the optical axis
    slant_deg: float = 20.0  # maximum tilt of the plane normal; sampled per seed
    sphere_radius: float = 2.0
    sphere_depth: float = 7.0
    rot_deg: float = 3.0  # rotation magnitude, random axis
    trans: tuple = (1.5, 0.3, 0.3)  # per-axis bounds; sampled uniformly in [-b, b]
    min_trans_norm: float = 1.0
    octaves: int = 4
    base_cell: float = 48.0  # coarsest texture cell in pixels
    contrast: float = 1.0
    gain: float = 1.0
    bias: float = 0.0
    noise_std: float = 0.0
    outlier_fraction: float = 0.0
    outlier_patch: int = 8
    min_visible: float = 0.7

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise SceneError(f"scene must be at least 64x64, got {self.height}x{self.width}")
        if self.depth_model not in DEPTH_MODELS:
            raise SceneError(f"unknown depth model {self.depth_model!r}; choose from {DEPTH_MODELS}")
        if self.depth <= 0 or self.focal_scale <= 0:
            raise SceneError("depth and focal_scale must be positive")
        if len(self.trans) != 3 or any(b < 0 for b in self.trans):
            raise SceneError("trans must be three nonnegative bounds")
        if not 0 <= self.outlier_fraction < 1:
            raise SceneError("outlier_fraction must be in [0, 1)")
        if self.octaves < 1 or self.base_cell <= 1:
            raise SceneError("texture needs at least one octave and base_cell > 1")

    def intrinsics(self) -> Intrinsics:
        f = self.focal_scale * self.width
        return Intrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass(frozen=True)
class SyntheticPair:
    I_t: np.ndarray
    I_s: np.ndarray
    D_gt: DepthMap
    T_gt: PoseSE3
    K: Intrinsics
    visibility: np.ndarray
    outlier_mask: np.ndarray = field(default=None)


class ValueNoise:
    """Multi-octave value noise, bilinearly interpolated, on the continuous image plane."""

    def __init__(self, rng: np.random.Generator, height: int, width: int, octaves: int, base_cell: float):
        self.layers = []
        margin = 2.0  # texture is defined well outside the image for off-frame samples
        for o in range(octaves):
            cell = base_cell / 2**o
            nx = int(np.ceil((1 + 2 * margin) * width / cell)) + 2
            ny = int(np.ceil((1 + 2 * margin) * height / cell)) + 2
            lattice = rng.uniform(-1.0, 1.0, size=(ny, nx))
            origin = (-margin * width, -margin * height)
            self.layers.append((cell, 0.5**o, lattice, origin))
        u, v = pixel_grid(height, width)
        raw = self._raw(u, v)
        self.lo, self.hi = float(raw.min()), float(raw.max())

    def _raw(self, u, v):
        out = np.zeros(np.shape(u))
        for cell, amp, lattice, (ox, oy) in self.layers:
            gx = (u - ox) / cell
            gy = (v - oy) / cell
            ny, nx = lattice.shape
            gx = np.clip(gx, 0, nx - 1 - 1e-9)
            gy = np.clip(gy, 0, ny - 1 - 1e-9)
            x0 = np.floor(gx).astype(np.intp)
            y0 = np.floor(gy).astype(np.intp)
            fx, fy = gx - x0, gy - y0
            out += amp * (
                lattice[y0, x0] * (1 - fx) * (1 - fy)
                + lattice[y0, x0 + 1] * fx * (1 - fy)
                + lattice[y0 + 1, x0] * (1 - fx) * fy
                + lattice[y0 + 1, x0 + 1] * fx * fy
            )
        return out

    def __call__(self, u, v, contrast: float = 1.0):
        n = (self._raw(u, v) - self.lo) / max(self.hi - self.lo, 1e-12)
        return np.clip(0.5 + contrast * (n - 0.5), 0.0, 1.0)


class _Surface:
    """Scene surface in the target camera frame: a plane, optionally with a sphere in front."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.spec = spec
        if spec.depth_model == "fronto-plane":
            self.normal = np.array([0.0, 0.0, 1.0])
        else:
            tilt = np.deg2rad(spec.slant_deg) * np.sqrt(rng.uniform(0.25, 1.0))
            az = rng.uniform(0, 2 * np.pi)
            self.normal = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)])
        self.offset = self.normal[2] * spec.depth  # plane n.X = offset passes through (0, 0, depth)
        self.sphere = None
        if spec.depth_model == "plane-plus-sphere":
            K = spec.intrinsics()
            cu = rng.uniform(0.3, 0.7) * spec.width
            cv = rng.uniform(0.3, 0.7) * spec.height
            center = backproject(cu, cv, spec.sphere_depth, K)
            self.sphere = (center, spec.sphere_radius)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter for rays ``origin + lam * dirs``; inf on a miss."""
        nd = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (self.offset - origin @ self.normal) / nd
        lam = np.where((lam > 0) & np.isfinite(lam), lam, np.inf)
        if self.sphere is not None:
            c, r = self.sphere
            oc = origin - c
            a = np.einsum("...i,...i->...", dirs, dirs)
            b = 2.0 * (dirs @ oc)
            cc = oc @ oc - r * r
            disc = b * b - 4 * a * cc
            sq = np.sqrt(np.maximum(disc, 0.0))
            l1 = (-b - sq) / (2 * a)
            l2 = (-b + sq) / (2 * a)
            ls = np.where(l1 > 0, l1, np.where(l2 > 0, l2, np.inf))
            ls = np.where(disc >= 0, ls, np.inf)
            lam = np.minimum(lam, ls)
        return lam


def _sample_motion(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    r = np.deg2rad(spec.rot_deg) * axis
    bounds = np.asarray(spec.trans, dtype=np.float64)
    for _ in range(1000):
        t = rng.uniform(-bounds, bounds)
        if np.linalg.norm(t) >= min(spec.min_trans_norm, np.linalg.norm(bounds)):
            break
    return np.concatenate([r, t])


def _render_source(spec, surface, texture, T: PoseSE3, K: Intrinsics):
    h, w = spec.height, spec.width
    u, v = pixel_grid(h, w)
    if np.array_equal(T.R, np.eye(3)) and not np.any(T.t):
        return texture(u, v, spec.contrast)
    rays_s = backproject(u, v, np.ones((h, w)), K)
    Tinv = T.inverse()
    origin = Tinv.t
    dirs = rays_s @ Tinv.R.T
    lam = surface.intersect(origin, dirs)
    hit = np.isfinite(lam)
    X = origin + np.where(hit, lam, 1.0)[..., None] * dirs
    z = X[..., 2]
    ok = hit & (z > 1e-6)
    zs = np.where(ok, z, 1.0)
    ut = K.fx * X[..., 0] / zs + K.cx
    vt = K.fy * X[..., 1] / zs + K.cy
    return np.where(ok, texture(ut, vt, spec.contrast), 0.0)


def _target_visibility(spec, surface, D_gt, T, K):
    """Target pixels that land inside the source frame and are not occluded there."""
    h, w = spec.height, spec.width
    u, v = pixel_grid(h, w)
    up, vp, zp, ok = project(u, v, D_gt, T, K)
    with np.errstate(invalid="ignore"):
        inside = ok & (up >= 0) & (up <= w - 1) & (vp >= 0) & (vp <= h - 1)
    if surface.sphere is not None:
        # depth along the source ray must match the first surface hit
        rays_s = backproject(np.where(inside, up, 0.0), np.where(inside, vp, 0.0), np.ones((h, w)), K)
        Tinv = T.inverse()
        lam = surface.intersect(Tinv.t, rays_s @ Tinv.R.T)
        inside &= np.abs(lam - zp) <= 1e-6 * np.maximum(zp, 1.0) + 1e-9
    return inside


def _outlier_mask(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, p = spec.height, spec.width, spec.outlier_patch
    mask = np.zeros((h, w), dtype=bool)
    if spec.outlier_fraction <= 0:
        return mask
    cells = [(r, c) for r in range(0, h - p + 1, p) for c in range(0, w - p + 1, p)]
    n = int(round(spec.outlier_fraction * h * w / (p * p)))
    n = min(n, len(cells))
    for idx in rng.choice(len(cells), size=n, replace=False):
        r, c = cells[idx]
        mask[r : r + p, c : c + p] = True
    return mask


def gen_scene(spec: SceneSpec) -> SyntheticPair:
    """Render a seeded synthetic pair; deterministic for a given spec."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    K = spec.intrinsics()
    texture = ValueNoise(rng, h, w, spec.octaves, spec.base_cell)
    surface = _Surface(spec, rng)
    u, v = pixel_grid(h, w)
    I_t = texture(u, v, spec.contrast)
    rays_t = backproject(u, v, np.ones((h, w)), K)
    lam = surface.intersect(np.zeros(3), rays_t)
    if not np.all(np.isfinite(lam)):
        raise SceneError("target rays miss the scene surface; reduce the slant")
    D_gt = DepthMap(lam, np.ones((h, w), dtype=bool))

    for _ in range(MAX_ATTEMPTS):
        T = exp_map(_sample_motion(spec, rng))
        vis = _target_visibility(spec, surface, D_gt.values, T, K)
        if vis.mean() >= spec.min_visible:
            break
    else:
        raise SceneError(f"no motion with >= {spec.min_visible:.0%} visibility in {MAX_ATTEMPTS} attempts")

    I_s = _render_source(spec, surface, texture, T, K)
    # nuisance: photometric change, sensor noise, independently moving patches
    I_s = spec.gain * I_s + spec.bias
    outliers = _outlier_mask(spec, rng)
    if outliers.any():
        other = ValueNoise(rng, h, w, spec.octaves, spec.base_cell)
        shift = rng.uniform(-w, w, size=2)
        I_s = np.where(outliers, other(u + shift[0], v + shift[1], spec.contrast), I_s)
    if spec.noise_std > 0:
        I_s = I_s + rng.normal(0.0, spec.noise_std, size=I_s.shape)
    I_s = np.clip(I_s, 0.0, 1.0)
    return SyntheticPair(I_t, I_s, D_gt, T, K, vis, outliers)


def verify_pair(pair: SyntheticPair) -> dict:
    """Warp the source back with the ground truth and report photometric error on the visible set."""
    warped, visible = warp_image(pair.I_s, pair.D_gt, pair.T_gt, pair.K)
    mask = visible & pair.visibility
    err = np.abs(warped - pair.I_t)[mask]
    return {
        "mean_error": float(err.mean()) if err.size else 0.0,
        "max_error": float(err.max()) if err.size else 0.0,
        "visible_fraction": float(mask.mean()),
    }
