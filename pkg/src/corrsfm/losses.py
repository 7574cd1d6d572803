"""Trajectory losses and depth/pose error metrics.

The losses score a sequence of solver iterates against ground truth: a
scale-aligned regression term, a probabilistic term tying the likelihood of
each iterate to its regression error, and a term rewarding likelihood gains
while the estimate is still far off.  The metrics are the usual monocular
depth and two-view pose errors.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import DepthMap, PoseSE3, rotation_angle

# weights used while bootstrapping a learned model, (alpha1, alpha2, alpha3)
INIT_WEIGHTS = (0.05, 1.0, 0.05)

DEPTH_COLUMNS = ("AbsRel", "SqRel", "RMSE", "RMSE_log", "d1", "d2", "d3")
DEMON_COLUMNS = ("L1-inv", "Sc-inv", "L1-rel")
POSE_COLUMNS = ("Rot", "Tran")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    sigma_imp: float = 1.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise LossError("loss weights must be non-negative")
        if not self.sigma_imp > 0:
            raise LossError("sigma_imp must be positive")

    @property
    def weights(self):
        return (self.alpha1, self.alpha2, self.alpha3)

    @classmethod
    def initialization(cls, sigma_imp: float = 1.0) -> "LossConfig":
        return cls(*INIT_WEIGHTS, sigma_imp=sigma_imp)


@dataclass(frozen=True)
class Iterate:
    depth: DepthMap
    pose: PoseSE3
    ll: float


class Trajectory(tuple):
    """Non-empty sequence of :class:`Iterate` with finite likelihoods."""

    def __new__(cls, iterates):
        items = tuple(iterates)
        if not items:
            raise LossError("trajectory needs at least one iterate")
        for it in items:
            if not isinstance(it, Iterate):
                raise LossError(f"trajectory entries must be Iterate, got {type(it).__name__}")
            if not math.isfinite(it.ll):
                raise LossError("trajectory likelihoods must be finite")
        return super().__new__(cls, items)

    @property
    def lls(self) -> np.ndarray:
        return np.array([it.ll for it in self])


def _as_depth(D) -> DepthMap:
    if isinstance(D, DepthMap):
        return D
    arr = np.asarray(D, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise LossError("depth arrays must be finite and strictly positive")
    return DepthMap(arr, np.ones(arr.shape, dtype=bool))


def _joint(D_hat, D_gt):
    D_hat, D_gt = _as_depth(D_hat), _as_depth(D_gt)
    if D_hat.shape != D_gt.shape:
        raise LossError(f"depth maps differ in shape: {D_hat.shape} vs {D_gt.shape}")
    m = D_hat.valid & D_gt.valid
    if not m.any():
        raise LossError("no jointly valid pixel")
    d, g = D_hat.values[m], D_gt.values[m]
    if np.any(d <= 0) or np.any(g <= 0):
        raise LossError("depths must be strictly positive")
    return d, g


def scale_factor(D_hat, D_gt) -> float:
    """Median over jointly valid pixels of ground truth over estimate."""
    d, g = _joint(D_hat, D_gt)
    return float(np.median(g / d))


def reg_terms(traj: Trajectory, D_gt, T_gt: PoseSE3) -> np.ndarray:
    """Per-iteration regression error: RMS depth error + Frobenius rotation error + translation error.

    Depth and translation of each iterate are first scaled by its own
    median depth ratio, so the value does not depend on the gauge.
    """
    traj = Trajectory(traj)
    out = []
    for it in traj:
        d, g = _joint(it.depth, D_gt)
        a = float(np.median(g / d))
        depth_term = float(np.sqrt(np.mean((a * d - g) ** 2)))
        rot_term = float(np.linalg.norm(it.pose.R - T_gt.R))
        trans_term = float(np.linalg.norm(a * it.pose.t - T_gt.t))
        out.append(depth_term + rot_term + trans_term)
    return np.array(out)


def loss_reg(traj: Trajectory, D_gt, T_gt: PoseSE3):
    """Returns ``(total, per_iteration_terms)``."""
    terms = reg_terms(traj, D_gt, T_gt)
    return float(terms.sum()), terms


def loss_prob(lls: Sequence[float], reg: Sequence[float], cfg: LossConfig = LossConfig()) -> float:
    lls = np.asarray(lls, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    if lls.shape != reg.shape:
        raise LossError(f"need one likelihood per regression term, got {lls.shape} and {reg.shape}")
    return float(-np.sum(np.exp(lls - reg / cfg.sigma_imp)))


def loss_inc(lls: Sequence[float], reg: Sequence[float]) -> float:
    """Sum of ``(l_n - l_{n+1}) * ln(1 + L_reg^n)`` over consecutive iterates.

    With one likelihood per regression term the last term has no successor
    and is dropped; pass ``N + 1`` likelihoods to include it.
    """
    lls = np.asarray(lls, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    if len(lls) == len(reg):
        n = len(reg) - 1
    elif len(lls) == len(reg) + 1:
        n = len(reg)
    else:
        raise LossError(f"{len(lls)} likelihoods do not fit {len(reg)} regression terms")
    if np.any(reg < 0):
        raise LossError("regression terms must be non-negative")
    return float(np.sum((lls[:n] - lls[1 : n + 1]) * np.log1p(reg[:n])))


def loss_total(components: Sequence[float], cfg: LossConfig = LossConfig()) -> float:
    """Weighted sum of ``(L_reg, L_inc, L_prob)``."""
    if len(components) != 3:
        raise LossError("components must be (reg, inc, prob)")
    return float(sum(w * c for w, c in zip(cfg.weights, components)))


def trajectory_losses(traj: Trajectory, D_gt, T_gt: PoseSE3, cfg: LossConfig = LossConfig()) -> dict:
    total_reg, terms = loss_reg(traj, D_gt, T_gt)
    lls = Trajectory(traj).lls
    inc = loss_inc(lls, terms)
    prob = loss_prob(lls, terms, cfg)
    return dict(reg=total_reg, inc=inc, prob=prob, total=loss_total((total_reg, inc, prob), cfg))


def depth_metrics(D_hat, D_gt, align: bool = False) -> dict:
    d, g = _joint(D_hat, D_gt)
    if align:
        d = d * float(np.median(g / d))
    err = d - g
    ratio = np.maximum(d / g, g / d)
    return {
        "AbsRel": float(np.mean(np.abs(err) / g)),
        "SqRel": float(np.mean(err**2 / g)),
        "RMSE": float(np.sqrt(np.mean(err**2))),
        "RMSE_log": float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        "d1": float(np.mean(ratio < 1.25)),
        "d2": float(np.mean(ratio < 1.25**2)),
        "d3": float(np.mean(ratio < 1.25**3)),
    }


def demon_depth_metrics(D_hat, D_gt) -> dict:
    d, g = _joint(D_hat, D_gt)
    z = np.log(d) - np.log(g)
    return {
        "L1-inv": float(np.mean(np.abs(1.0 / d - 1.0 / g))),
        "Sc-inv": float(np.sqrt(max(np.mean(z * z) - np.mean(z) ** 2, 0.0))),
        "L1-rel": float(np.mean(np.abs(d - g) / g)),
    }


def translation_angle(t_hat, t_gt) -> float:
    """Angle in degrees between two translations; NaN if either is zero."""
    t_hat = np.asarray(t_hat, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    n1, n2 = np.linalg.norm(t_hat), np.linalg.norm(t_gt)
    if n1 == 0 or n2 == 0:
        return float("nan")
    c = np.clip(t_hat @ t_gt / (n1 * n2), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def pose_metrics(T_hat: PoseSE3, T_gt: PoseSE3) -> dict:
    """Rotation and translation-direction errors in degrees.

    ``Tran`` is NaN and ``tran_defined`` False when either translation is zero.
    """
    rot = float(np.degrees(rotation_angle(T_hat.R.T @ T_gt.R)))
    tran = translation_angle(T_hat.t, T_gt.t)
    return {"Rot": rot, "Tran": tran, "tran_defined": not math.isnan(tran)}


def _fmt(v, digits: int) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return f"{v:.{digits}g}"


def format_table(rows: Sequence[dict], columns: Sequence[str], digits: int = 6) -> str:
    """Aligned plain-text table, one row per record."""
    cells = [list(columns)] + [[_fmt(r[c], digits) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def to_csv(rows: Sequence[dict], columns: Sequence[str], digits: int = 6) -> str:
    """Comma-separated records with a fixed header row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r[c], digits) for c in columns])
    return buf.getvalue()
