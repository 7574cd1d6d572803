"""File formats: PFM depth maps, KITTI-style pose files, binary netpbm images,
intrinsics text files and the ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DepthMap, Intrinsics, PoseSE3
from .losses import LossConfig
from .solver import DisturbanceSet, SolverConfig
from .synth import SceneError, SceneSpec

ROT_EXACT_TOL = 1e-6
ROT_REPAIR_TOL = 1e-3


class FormatError(ValueError):
    """Malformed file content."""


# -- PFM ---------------------------------------------------------------------


def write_pfm(path, depth) -> None:
    """Single-channel little-endian PFM; rows stored bottom to top, invalid pixels as 0."""
    if isinstance(depth, DepthMap):
        values = np.where(depth.valid, depth.values, 0.0)
    else:
        values = np.asarray(depth, dtype=np.float64)
    if values.ndim != 2:
        raise FormatError(f"PFM maps must be 2-D, got shape {values.shape}")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(values[::-1], dtype="<f4").tobytes())


def _read_token_line(raw: bytes, pos: int, path) -> tuple[str, int]:
    end = raw.find(b"\n", pos)
    if end < 0:
        raise FormatError(f"{path}: truncated PFM header")
    return raw[pos:end].decode("ascii", errors="replace").strip(), end + 1


def read_pfm_array(path) -> np.ndarray:
    """Raw float32 values of a ``Pf`` file, top row first."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    magic, pos = _read_token_line(raw, 0, path)
    if magic == "PF":
        raise FormatError(f"{path}: colour PFM ('PF') is not a depth map; expected 'Pf'")
    if magic != "Pf":
        raise FormatError(f"{path}: not a PFM file (magic {magic!r})")
    dims, pos = _read_token_line(raw, pos, path)
    try:
        w, h = (int(x) for x in dims.split())
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM dimensions line {dims!r}") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: PFM dimensions must be positive")
    scale_line, pos = _read_token_line(raw, pos, path)
    try:
        scale = float(scale_line)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM scale line {scale_line!r}") from exc
    if scale >= 0:
        raise FormatError(f"{path}: big-endian PFM (scale {scale}) is not supported")
    payload = raw[pos:]
    if len(payload) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w)[::-1].copy()


def read_pfm(path) -> DepthMap:
    """Depth map from a PFM; nonpositive and non-finite values are invalid."""
    return DepthMap.from_array(read_pfm_array(path).astype(np.float64))


# -- poses --------------------------------------------------------------------


def format_pose(T: PoseSE3) -> str:
    M = np.hstack([T.R, T.t[:, None]])
    return " ".join(f"{float(x):.17g}" for x in M.ravel())


def write_poses(path, poses) -> None:
    if isinstance(poses, PoseSE3):
        poses = [poses]
    Path(path).write_text("".join(format_pose(T) + "\n" for T in poses))


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    return U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt


def parse_pose_line(line: str, lineno: int = 1) -> PoseSE3:
    fields = line.split()
    if len(fields) != 12:
        raise FormatError(f"line {lineno}: expected 12 values, found {len(fields)}")
    try:
        M = np.array([float(x) for x in fields]).reshape(3, 4)
    except ValueError as exc:
        raise FormatError(f"line {lineno}: non-numeric value") from exc
    if not np.all(np.isfinite(M)):
        raise FormatError(f"line {lineno}: non-finite value")
    R, t = M[:, :3], M[:, 3]
    dev = max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    if dev > ROT_REPAIR_TOL:
        raise FormatError(f"line {lineno}: rotation is not orthonormal (deviation {dev:.3g})")
    if dev > ROT_EXACT_TOL:
        R = _orthonormalize(R)
    return PoseSE3(R, t)


def read_poses(path) -> list[PoseSE3]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    poses = [parse_pose_line(line, n) for n, line in enumerate(text.splitlines(), 1) if line.strip()]
    if not poses:
        raise FormatError(f"{path}: no poses")
    return poses


def read_pose(path) -> PoseSE3:
    return read_poses(path)[0]


# -- images ---------------------------------------------------------------------

_NETPBM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_image(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8 or 16 bit, scaled to ``[0, 1]``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    for _ in range(4):
        m = _NETPBM_TOKEN.match(raw, pos)
        if not m:
            raise FormatError(f"{path}: truncated netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0].decode("ascii", errors="replace")
    if magic in ("P1", "P2", "P3"):
        raise FormatError(f"{path}: ASCII netpbm ({magic}) is not supported; use binary P5/P6")
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path}: unsupported image format {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad netpbm header") from exc
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: max value {maxval} not supported (must be 255 or 65535)")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: image dimensions must be positive")
    pos += 1  # single whitespace byte before the raster
    channels = 1 if magic == "P5" else 3
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    n = w * h * channels
    payload = raw[pos : pos + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise FormatError(f"{path}: truncated raster")
    img = np.frombuffer(payload, dtype=dtype).astype(np.float64) / maxval
    return img.reshape(h, w) if channels == 1 else img.reshape(h, w, 3)


def write_image(path, image: np.ndarray, bits: int = 16) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits not in (8, 16):
        raise FormatError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    dtype = "u1" if bits == 8 else ">u2"
    if img.ndim == 2:
        magic, (h, w) = "P5", img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, (h, w) = "P6", img.shape[:2]
    else:
        raise FormatError(f"cannot write image of shape {img.shape}")
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(np.round(img * maxval).astype(dtype).tobytes())


# -- intrinsics -----------------------------------------------------------------


def read_intrinsics(path) -> Intrinsics:
    """Full-resolution ``fx fy cx cy``; use ``.quarter()`` for the feature grid."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    fields = [tok for line in text.splitlines() for tok in line.split("#")[0].split()]
    if len(fields) != 4:
        raise FormatError(f"{path}: expected 'fx fy cx cy', found {len(fields)} values")
    try:
        fx, fy, cx, cy = (float(x) for x in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric intrinsics") from exc
    if not (fx > 0 and fy > 0 and all(map(math.isfinite, (cx, cy)))):
        raise FormatError(f"{path}: focal lengths must be positive and values finite")
    return Intrinsics(fx, fy, cx, cy)


def write_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text(f"{K.fx:.17g} {K.fy:.17g} {K.cx:.17g} {K.cy:.17g}\n")


# -- run configuration ----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    loss: LossConfig = field(default_factory=LossConfig)


_DISTURBANCE_KEYS = {f.name for f in dataclasses.fields(DisturbanceSet)}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _parse_level(text: str):
    return "fused" if text == "fused" else int(text)


def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


# per-key parsers for fields whose default value does not reveal the type
_SPECIAL = {
    ("scene", "trans"): lambda s: tuple(_parse_float(x) for x in _split(s)),
    ("solver", "level_schedule"): lambda s: None if s == "none" else tuple(_parse_level(x) for x in _split(s)),
    ("solver", "feature_paths"): lambda s: None if s == "none" else tuple(_split(s)),
    ("solver", "depth_smoothing"): lambda s: tuple(_parse_float(x) for x in _split(s)),
}


def _parser_for(section: str, name: str, default):
    if (section, name) in _SPECIAL:
        return _SPECIAL[(section, name)]
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return _parse_float
    if isinstance(default, str):
        return str
    raise KeyError(name)


def _known_keys() -> dict:
    keys = {}
    for section, cls in (("scene", SceneSpec), ("solver", SolverConfig), ("loss", LossConfig)):
        inst = cls()
        for f in dataclasses.fields(cls):
            if section == "solver" and f.name == "disturbances":
                continue
            keys[f"{section}.{f.name}"] = _parser_for(section, f.name, getattr(inst, f.name))
    for name in _DISTURBANCE_KEYS:
        keys[f"solver.{name}"] = _parse_float
    return keys


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    known = _known_keys()
    values: dict[str, dict] = {"scene": {}, "solver": {}, "loss": {}, "disturbances": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            parsed = known[key](value)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
        section, name = key.split(".", 1)
        if section == "solver" and name in _DISTURBANCE_KEYS:
            values["disturbances"][name] = parsed
        else:
            values[section][name] = parsed
    try:
        solver_kw = dict(values["solver"])
        if values["disturbances"]:
            solver_kw["disturbances"] = DisturbanceSet(**values["disturbances"])
        return RunConfig(
            scene=SceneSpec(**values["scene"]),
            solver=SolverConfig(**solver_kw),
            loss=LossConfig(**values["loss"]),
        )
    except (ValueError, SceneError) as exc:
        raise FormatError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in ("scene", "solver", "loss"):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if section == "solver" and f.name == "disturbances":
                for name in sorted(_DISTURBANCE_KEYS):
                    lines.append(f"solver.{name} = {_format_value(getattr(v, name))}")
                continue
            lines.append(f"{section}.{f.name} = {_format_value(v)}")
    return "\n".join(lines) + "\n"
