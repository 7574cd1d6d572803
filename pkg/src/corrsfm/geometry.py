"""Rigid transforms, axis-angle coordinates, pinhole projection and warping.

Pixel coordinates are ``(column, row)`` with the origin at the centre of the
top-left pixel.  Six-vector pose coordinates are ``(rx, ry, rz, tx, ty, tz)``:
an axis-angle rotation plus a plain translation, so additive updates on the
six numbers are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_EPS = 1e-6
_SMALL_ANGLE = 1e-6


class GeometryError(ValueError):
    """Invalid geometric input (non-finite values, bad shapes)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise GeometryError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rescaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image downsampled by ``factor``.

        Uses the pixel-centre convention ``c' = (c + 0.5) / factor - 0.5`` so a
        point projects onto the same physical location at both resolutions.
        """
        return Intrinsics(
            self.fx / factor,
            self.fy / factor,
            (self.cx + 0.5) / factor - 0.5,
            (self.cy + 0.5) / factor - 0.5,
        )

    def quarter(self) -> "Intrinsics":
        return self.rescaled(4.0)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x -> R x + t`` from the target camera to the source camera."""

    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose entries must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R.T @ self.R, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(self.R) - 1.0) <= tol
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points stored along the last axis (``(..., 3)``)."""
        return points @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def scaled(self, s: float) -> "PoseSE3":
        return PoseSE3(self.R, s * self.t)


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise GeometryError(f"depth {values.shape} and mask {valid.shape} must be equal 2-D shapes")
        if not np.all(np.isfinite(values)):
            raise GeometryError("depth values must be finite")
        if np.any(values[valid] <= 0):
            raise GeometryError("depth must be positive wherever valid")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def full(cls, shape, value: float) -> "DepthMap":
        return cls(np.full(shape, float(value)), np.ones(shape, dtype=bool))

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthMap":
        """Nonpositive or non-finite entries become invalid (stored as 0)."""
        values = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0.0), valid)

    @property
    def shape(self):
        return self.values.shape


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(M: np.ndarray) -> np.ndarray:
    return np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])


def so3_exp(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    theta = np.sqrt(theta2)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    K = skew(r)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector with angle in ``[0, pi]``.

    At exactly pi the two antipodal axes describe the same rotation; the one
    whose largest-magnitude component is positive is returned.
    """
    v = _vee(R)
    s = 0.5 * np.linalg.norm(v)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < _SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * v
    if np.pi - theta > 1e-3:
        return theta / (2.0 * np.sin(theta)) * v
    # near pi: recover the axis from the symmetric part R = cos I + (1 - cos) n n^T + sin [n]x
    B = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(B)))
    n = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    n /= np.linalg.norm(n)
    if np.dot(n, v) < 0:
        n = -n
    elif np.dot(n, v) == 0 and n[np.argmax(np.abs(n))] < 0:
        n = -n
    return theta * n


def exp_map(v) -> PoseSE3:
    """Six-vector ``(rx, ry, rz, tx, ty, tz)`` to a rigid transform."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (6,):
        raise GeometryError(f"pose vector must have 6 entries, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"pose vector must be finite, got {v}")
    return PoseSE3(so3_exp(v[:3]), v[3:].copy())


def log_map(T: PoseSE3) -> np.ndarray:
    return np.concatenate([so3_log(T.R), T.t])


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians, robust near 0 and pi."""
    return float(np.arctan2(0.5 * np.linalg.norm(_vee(R)), 0.5 * (np.trace(R) - 1.0)))


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate grids, each ``(h, w)``."""
    rows, cols = np.mgrid[0:h, 0:w]
    return cols.astype(np.float64), rows.astype(np.float64)


def backproject(u, v, depth, K: Intrinsics) -> np.ndarray:
    u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)


def project(u, v, depth, T: PoseSE3, K: Intrinsics, z_eps: float = Z_EPS):
    """Map target pixels with depth into the source image.

    Returns ``(u', v', z', ok)`` where ``z'`` is the depth after the transform
    and ``ok`` is False for points at or behind ``z_eps``.  Coordinates of
    failed points are NaN.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise GeometryError("project needs positive depth")
    if not np.any(T.t) and np.array_equal(T.R, np.eye(3)):
        # exact identity: skip the round trip through camera coordinates
        u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), depth)
        return u.copy(), v.copy(), depth.copy(), np.ones(depth.shape, dtype=bool)
    X = T.apply(backproject(u, v, depth, K))
    z = X[..., 2]
    ok = z > z_eps
    zs = np.where(ok, z, 1.0)
    up = np.where(ok, K.fx * X[..., 0] / zs + K.cx, np.nan)
    vp = np.where(ok, K.fy * X[..., 1] / zs + K.cy, np.nan)
    return up, vp, z, ok


def project_inverse_depth(u, v, inv_depth, T: PoseSE3, K: Intrinsics, z_eps: float = Z_EPS):
    """``project`` parameterised by inverse depth, scaled by ``inv_depth``.

    ``K T (x / rho)`` equals ``(R x + t rho) / rho`` up to the homogeneous
    scale, so the projected pixel is well defined even as ``rho -> 0``.
    """
    inv_depth = np.asarray(inv_depth, dtype=np.float64)
    ray = backproject(u, v, np.ones_like(inv_depth), K)
    X = ray @ T.R.T + inv_depth[..., None] * T.t
    z = X[..., 2]
    ok = (z > z_eps * inv_depth) & (inv_depth > 0)
    zs = np.where(ok, z, 1.0)
    up = np.where(ok, K.fx * X[..., 0] / zs + K.cx, np.nan)
    vp = np.where(ok, K.fy * X[..., 1] / zs + K.cy, np.nan)
    return up, vp, ok


BOUNDS_TOL = 1e-9  # absorbs round-off of projections landing exactly on the border


def in_bounds(u, v, h: int, w: int, tol: float = BOUNDS_TOL) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)


def bilinear_sample(img: np.ndarray, u, v):
    """Sample ``img`` (``(h, w)`` or ``(h, w, c)``) at continuous coordinates.

    Returns ``(values, inside)``; samples outside ``[0, w-1] x [0, h-1]`` are 0.
    Exact at integer nodes.
    """
    h, w = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inside = in_bounds(u, v, h, w)
    uu = np.clip(np.where(inside, u, 0.0), 0, w - 1)
    vv = np.clip(np.where(inside, v, 0.0), 0, h - 1)
    x0 = np.floor(uu).astype(np.intp)
    y0 = np.floor(vv).astype(np.intp)
    fx = uu - x0
    fy = vv - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    out = (
        img[y0, x0] * ((1 - fx) * (1 - fy))
        + img[y0, x1] * (fx * (1 - fy))
        + img[y1, x0] * ((1 - fx) * fy)
        + img[y1, x1] * (fx * fy)
    )
    mask = inside if img.ndim == 2 else inside[..., None]
    return np.where(mask, out, 0.0), inside


def warp_image(I_s: np.ndarray, depth: DepthMap, T: PoseSE3, K: Intrinsics):
    """Resample the source image into the target frame.

    Returns ``(warped, visible)``; invisible pixels (invalid depth, behind the
    camera, or out of bounds) are filled with 0.
    """
    I_s = np.asarray(I_s, dtype=np.float64)
    if I_s.shape[:2] != depth.shape:
        raise GeometryError(f"image {I_s.shape[:2]} and depth {depth.shape} sizes differ")
    h, w = depth.shape
    u, v = pixel_grid(h, w)
    d = np.where(depth.valid, depth.values, 1.0)
    up, vp, _, ok = project(u, v, d, T, K)
    ok &= depth.valid
    vals, inside = bilinear_sample(I_s, np.where(ok, up, -1.0), np.where(ok, vp, -1.0))
    visible = ok & inside
    if vals.ndim == 3:
        vals = np.where(visible[..., None], vals, 0.0)
    else:
        vals = np.where(visible, vals, 0.0)
    return vals, visible
