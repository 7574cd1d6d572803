"""Iterative maximum-likelihood refinement of inverse depth and relative pose.

Each iteration looks up the correlation observed under the current estimate,
re-derives the mixture parameters from the current photometric warp, and
probes the per-pixel log-likelihood under fixed small disturbances of every
parameter (one shared inverse-depth disturbance for all pixels plus each of
the six pose coordinates).  The resulting difference maps drive a
deterministic ascent step: pose first, then depth, each accepted only if the
mean log-likelihood does not drop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .features import (
    CorrelationMap,
    CorrelationPyramid,
    FeatureMap,
    build_pyramid,
    correlation_rows,
    downsample,
    extract_features,
    lookup_level,
    to_gray,
)
from .geometry import (
    DepthMap,
    Intrinsics,
    PoseSE3,
    bilinear_sample,
    exp_map,
    in_bounds,
    pixel_grid,
    project_inverse_depth,
    rotation_angle,
)
from .likelihood import (
    RHO_MIN,
    UNIFORM_DENSITY,
    UncertaintyMaps,
    default_uncertainty,
    gaussian_pdf,
)

log = logging.getLogger(__name__)

PARAMS = ("depth", "rx", "ry", "rz", "tx", "ty", "tz")
MIN_INV_DEPTH = 1e-6
TEXTURELESS_FRACTION = 0.9
MIN_SOLVE_SIZE = 64


class SolverError(ValueError):
    pass


class IllConditionedError(SolverError):
    """Input carries too little texture to define correlations."""


@dataclass(frozen=True)
class DisturbanceSet:
    depth_delta: float = 0.02  # fraction of the current inverse depth
    rot_delta: float = 2e-3  # radians
    trans_rel: float = 0.01  # fraction of max(|t|, 0.01 * median depth)
    trans_min: float = 1e-3

    def __post_init__(self):
        if min(self.depth_delta, self.rot_delta, self.trans_rel, self.trans_min) <= 0:
            raise SolverError("disturbances must be strictly positive")
        if self.rot_delta >= 0.1 or self.depth_delta >= 0.5:
            raise SolverError("disturbances must be tiny: rot_delta < 0.1, depth_delta < 0.5")

    def trans_delta(self, t: np.ndarray, scene_scale: float) -> float:
        return max(self.trans_rel * max(float(np.linalg.norm(t)), 0.01 * scene_scale), self.trans_min)

    def scaled(self, s: float) -> "DisturbanceSet":
        """Test hook: scale every disturbance (``s = 0`` disables probing)."""
        return _ScaledDisturbance(self, s)


class _ScaledDisturbance:
    def __init__(self, base: DisturbanceSet, s: float):
        self.base = base
        self.s = float(s)
        self.depth_delta = base.depth_delta * s
        self.rot_delta = base.rot_delta * s

    def trans_delta(self, t, scene_scale):
        return self.base.trans_delta(t, scene_scale) * self.s


def default_schedule(n_iter: int) -> tuple:
    """Coarse to fine: the first 3/8 of the iterations on level 2, the next 3/8 on level 1, the rest on level 0.

    The last iteration always runs on level 0.
    """
    a = round(3 * n_iter / 8)
    b = round(6 * n_iter / 8)
    return tuple(2 if n < a else 1 if n < b else 0 for n in range(n_iter - 1)) + (0,) * (n_iter > 0)


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 8
    disturbances: DisturbanceSet = field(default_factory=DisturbanceSet)
    level_schedule: tuple | None = None  # per-iteration level: 0, 1, 2 or "fused"
    max_halvings: int = 8
    max_rot_step: float = math.radians(1.0)  # trust region on one pose step
    max_trans_step: float = 0.05  # same, as a fraction of the median scene depth
    depth_step: float = 0.25  # cap on a per-pixel inverse-depth step, fraction of current value
    # Gaussian width (cells) used to pool depth derivatives on levels 0, 1, 2; inf = one shared step
    depth_smoothing: tuple = (2.0, 4.0, float("inf"))
    damping: float = 1e-3
    init_depth: float = 10.0
    inner_steps: int = 1
    tol: float = 0.0  # stop early once l_n improves by less than this (0 = never)
    backend: str = "census"
    window: int = 7
    feature_paths: tuple | None = None
    rho0: float = 0.1
    kappa: float = 2.0
    mu0: float = 1.0
    sigma0: float = 0.3
    pin_rho: bool = False  # ablation: rho fixed at its floor everywhere

    def __post_init__(self):
        if self.iterations < 1:
            raise SolverError("iterations must be >= 1")
        if self.inner_steps < 1:
            raise SolverError("inner_steps must be >= 1")
        if self.init_depth <= 0:
            raise SolverError("init_depth must be positive")
        if self.max_rot_step <= 0 or self.max_trans_step <= 0 or self.depth_step <= 0:
            raise SolverError("step limits must be positive")
        if len(self.depth_smoothing) != 3 or min(self.depth_smoothing) < 0:
            raise SolverError("depth_smoothing needs three non-negative widths")
        sched = self.schedule()
        if len(sched) < self.iterations:
            raise SolverError("level schedule must cover every iteration")
        for k in sched:
            if k not in (0, 1, 2, "fused"):
                raise SolverError(f"bad level {k!r} in schedule")

    def schedule(self) -> tuple:
        if self.level_schedule is None:
            return default_schedule(self.iterations)
        return tuple(self.level_schedule)

    def smoothing_for(self, level) -> float:
        return self.depth_smoothing[0 if level == "fused" else int(level)]


@dataclass(frozen=True)
class SolverState:
    inv_depth: np.ndarray  # (h, w), quarter grid
    pose: np.ndarray  # six-vector
    iter: int = 0
    ll: float = float("-inf")
    level: object = "fused"

    @property
    def depth(self) -> DepthMap:
        return DepthMap(1.0 / self.inv_depth, np.ones(self.inv_depth.shape, dtype=bool))

    @property
    def transform(self) -> PoseSE3:
        return exp_map(self.pose)


@dataclass(frozen=True)
class DifferenceMaps:
    plus: np.ndarray  # (7, h, w)
    minus: np.ndarray  # (7, h, w)
    deltas: np.ndarray  # (7,) inverse-depth disturbance is relative; pose ones absolute
    base_log: np.ndarray
    valid: np.ndarray


class Problem:
    """The composed likelihood: pyramid lookups through projection into the mixture.

    Evaluates per-pixel log-densities for arbitrary (inverse depth, pose)
    hypotheses with the mixture parameters held fixed.

    A pixel whose projection leaves the source grid (or falls behind the
    camera) scores ``floor_log``: its mean log-density over every source
    node, i.e. the value expected from a correspondence drawn at random.
    Leaving the image then neither pays nor costs relative to a chance
    match, which removes the pull towards shrinking or exploding the flow
    field.  Points just outside the grid fade linearly over ``margin`` cells
    from the clamped border density to that value, keeping the objective
    continuous.
    """

    def __init__(self, P: CorrelationPyramid, K: Intrinsics, U: UncertaintyMaps, level="fused", margin: float = 1.0):
        if U.shape != P.shape:
            raise SolverError(f"uncertainty maps {U.shape} do not match the feature grid {P.shape}")
        self.P = P
        self.K = K
        self.U = U
        self.level = level
        self.margin = margin
        h, w = P.shape
        self.u, self.v = pixel_grid(h, w)
        self.floor_log = self._chance_level()

    def _chance_level(self) -> np.ndarray:
        h, w = self.P.shape
        U = self.U
        out = np.empty((h, w))
        rows = max(1, 2_000_000 // (w * h * w))
        for r0 in range(0, h, rows):
            r1 = min(h, r0 + rows)
            c = correlation_rows(self.P, self.level, r0, r1)
            rho = U.rho[r0:r1, :, None, None]
            dens = (1.0 - rho) * gaussian_pdf(c, U.mu[r0:r1, :, None, None], U.sigma[r0:r1, :, None, None])
            out[r0:r1] = np.log(dens + rho * UNIFORM_DENSITY).mean(axis=(2, 3))
        return out

    def observe(self, inv_depth: np.ndarray, pose: np.ndarray) -> CorrelationMap:
        """Hard-validity correlation map (no border fade)."""
        up, vp, ok = project_inverse_depth(self.u, self.v, inv_depth, exp_map(pose), self.K)
        vals, valid = lookup_level(self.P, np.where(ok, up, -1.0), np.where(ok, vp, -1.0), self.level)
        valid &= ok
        return CorrelationMap(np.where(valid, vals, 0.0), valid)

    def log_density(self, inv_depth: np.ndarray, pose: np.ndarray):
        """Per-pixel log-density and the mask of pixels carrying any observation weight."""
        h, w = self.P.shape
        up, vp, ok = project_inverse_depth(self.u, self.v, inv_depth, exp_map(pose), self.K)
        up = np.where(ok, up, -1e9)
        vp = np.where(ok, vp, -1e9)
        xc = np.clip(up, 0, w - 1)
        yc = np.clip(vp, 0, h - 1)
        outside = np.maximum(np.abs(up - xc), np.abs(vp - yc))
        weight = np.clip(1.0 - outside / self.margin, 0.0, 1.0) if self.margin > 0 else (outside == 0) * 1.0
        weight = np.where(ok, weight, 0.0)
        vals, _ = lookup_level(self.P, xc, yc, self.level)
        U = self.U
        dens = (1.0 - U.rho) * gaussian_pdf(vals, U.mu, U.sigma) + U.rho * UNIFORM_DENSITY
        return weight * np.log(dens) + (1.0 - weight) * self.floor_log, weight > 0

    def mean_ll(self, inv_depth, pose) -> float:
        return float(np.mean(self.log_density(inv_depth, pose)[0]))


def _scene_scale(inv_depth: np.ndarray) -> float:
    return float(np.median(1.0 / inv_depth))


def difference_maps(state: SolverState, problem: Problem, d: DisturbanceSet, depth_only: bool = False) -> DifferenceMaps:
    """Disturbed minus current per-pixel log-likelihood for each parameter and sign.

    With ``depth_only`` the pose rows are left at zero.
    """
    base, valid = problem.log_density(state.inv_depth, state.pose)
    scale = _scene_scale(state.inv_depth)
    tdel = d.trans_delta(state.pose[3:], scale)
    deltas = np.array([d.depth_delta, d.rot_delta, d.rot_delta, d.rot_delta, tdel, tdel, tdel])
    h, w = state.inv_depth.shape
    plus = np.zeros((7, h, w))
    minus = np.zeros((7, h, w))
    if not np.any(deltas):
        return DifferenceMaps(plus, minus, deltas, base, valid)
    for sign, out in ((1.0, plus), (-1.0, minus)):
        inv = np.maximum(state.inv_depth * (1.0 + sign * deltas[0]), MIN_INV_DEPTH)
        out[0] = problem.log_density(inv, state.pose)[0] - base
        if depth_only:
            continue
        for m in range(1, 7):
            pose = state.pose.copy()
            pose[m - 1] += sign * deltas[m]
            out[m] = problem.log_density(state.inv_depth, pose)[0] - base
    return DifferenceMaps(plus, minus, deltas, base, valid)


def pose_scores(maps: DifferenceMaps) -> np.ndarray:
    """Per-pixel centred derivative estimates for the six pose coordinates, ``(6, h, w)``."""
    d = maps.deltas[1:, None, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (maps.plus[1:] - maps.minus[1:]) / (2.0 * np.where(d > 0, d, 1.0))
    return np.where(d > 0, s, 0.0)


def depth_scores(state: SolverState, maps: DifferenceMaps):
    """Per-pixel first and second derivative estimates w.r.t. inverse depth."""
    delta = maps.deltas[0] * state.inv_depth
    if maps.deltas[0] == 0:
        z = np.zeros_like(delta)
        return z, z
    g = (maps.plus[0] - maps.minus[0]) / (2.0 * delta)
    hcurv = (maps.plus[0] + maps.minus[0]) / (delta * delta)
    return g, hcurv


@dataclass(frozen=True)
class StepInfo:
    ll_before: float
    ll_after: float
    step_pose: float
    step_depth: float
    stalled: bool


def _pose_direction(maps: DifferenceMaps, damping: float) -> np.ndarray:
    scores = pose_scores(maps)
    mask = maps.valid
    if not mask.any():
        return np.zeros(6)
    S = scores[:, mask]  # (6, n)
    g = S.mean(axis=1)
    if not np.any(g):
        return np.zeros(6)
    # outer-product (BHHH) estimate of the information matrix
    H = S @ S.T / S.shape[1]
    diag = np.diag(H).copy()
    scale = np.where(diag > 0, diag, 1.0)
    A = H + damping * np.diag(scale) + 1e-12 * np.eye(6)
    try:
        return np.linalg.solve(A, g)
    except np.linalg.LinAlgError:
        return g / scale


def _limit_pose_step(direction: np.ndarray, inv_depth: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    scale = _scene_scale(inv_depth)
    f = 1.0
    rn = float(np.linalg.norm(direction[:3]))
    tn = float(np.linalg.norm(direction[3:]))
    if rn > cfg.max_rot_step:
        f = min(f, cfg.max_rot_step / rn)
    if tn > cfg.max_trans_step * scale:
        f = min(f, cfg.max_trans_step * scale / tn)
    return direction * f


def _smooth(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return x
    if sigma >= 4 * max(x.shape):
        # wider than the grid: one shared step
        return np.full_like(x, x.mean())
    return gaussian_filter(x, sigma, mode="nearest")


def update_step(state: SolverState, maps: DifferenceMaps, problem: Problem, cfg: SolverConfig):
    """One block-coordinate ascent step: pose line search, then depth line search.

    The pose direction is the mean per-pixel score preconditioned by its outer
    product, shortened to the trust region.  Depth takes a Newton step per
    pixel from the first and second differences, pooled spatially with the
    width configured for the active level.  Every trial step halves until the
    mean log-likelihood does not drop.
    """
    base_log = maps.base_log
    ll_before = float(np.mean(base_log))
    ll0 = ll_before
    pose = state.pose
    inv = state.inv_depth

    step_pose = 0.0
    direction = _limit_pose_step(_pose_direction(maps, cfg.damping), inv, cfg)
    if np.any(direction):
        alpha = 1.0
        for _ in range(cfg.max_halvings + 1):
            cand = pose + alpha * direction
            if np.linalg.norm(cand[:3]) < np.pi:
                ll = problem.mean_ll(inv, cand)
                if ll >= ll0:
                    pose = cand
                    ll0 = ll
                    step_pose = alpha * float(np.linalg.norm(direction))
                    break
            alpha *= 0.5

    step_depth = 0.0
    if maps.deltas[0] > 0:
        if pose is not state.pose:
            maps = difference_maps(replace(state, pose=pose), problem, cfg.disturbances, depth_only=True)
        g, hc = depth_scores(state, maps)
        sigma = cfg.smoothing_for(problem.level)
        g = _smooth(g, sigma)
        hc = _smooth(hc, sigma)
        cap = cfg.depth_step * inv
        newton = np.where(hc < 0, -g / np.where(hc < 0, hc, -1.0), np.sign(g) * cap)
        s = np.where(g != 0, np.clip(newton, -cap, cap), 0.0)
        if np.any(s):
            new_inv = inv
            if sigma == 0:
                # each pixel's likelihood depends on its own depth only, so pixels backtrack independently
                cur_log = problem.log_density(inv, pose)[0]
                new_inv = inv.copy()
                pending = s != 0
                alpha = 1.0
                for _ in range(cfg.max_halvings + 1):
                    if not pending.any():
                        break
                    cand = np.maximum(inv + alpha * s, MIN_INV_DEPTH)
                    cand_log = problem.log_density(np.where(pending, cand, inv), pose)[0]
                    ok = pending & (cand_log >= cur_log) & (cand != inv)
                    new_inv = np.where(ok, cand, new_inv)
                    pending &= ~ok
                    alpha *= 0.5
            else:
                alpha = 1.0
                for _ in range(cfg.max_halvings + 1):
                    cand = np.maximum(inv + alpha * s, MIN_INV_DEPTH)
                    if problem.mean_ll(cand, pose) >= ll0:
                        new_inv = cand
                        break
                    alpha *= 0.5
            changed = new_inv != inv
            if changed.any():
                step_depth = float(np.mean(np.abs(new_inv - inv)[changed] / inv[changed]))
                inv = new_inv
                ll0 = problem.mean_ll(inv, pose)

    stalled = step_pose == 0.0 and step_depth == 0.0
    new_state = replace(state, inv_depth=inv, pose=pose, ll=ll0)
    return new_state, StepInfo(ll_before, ll0, step_pose, step_depth, stalled)


@dataclass
class Diagnostics:
    records: list = field(default_factory=list)
    depth_unconstrained: bool = False
    visible: np.ndarray | None = None

    @property
    def ll(self) -> list[float]:
        return [r["ll"] for r in self.records]

    def log_lines(self) -> list[str]:
        return [
            f"iter={r['iter']} level={r['level']} ll={r['ll']:.9g} "
            f"step_pose={r['step_pose']:.6g} step_depth={r['step_depth']:.6g} stalled={int(r['stalled'])}"
            for r in self.records
        ]


@dataclass
class Solution:
    depth: DepthMap  # input resolution
    pose: PoseSE3
    diagnostics: Diagnostics
    quarter_depth: DepthMap
    pose_vec: np.ndarray


def _prepare_images(I_t, I_s):
    I_t = to_gray(I_t)
    I_s = to_gray(I_s)
    if I_t.shape != I_s.shape:
        raise SolverError(f"images differ in size: {I_t.shape} vs {I_s.shape}")
    if min(I_t.shape) < MIN_SOLVE_SIZE:
        raise SolverError(f"images must be at least {MIN_SOLVE_SIZE}x{MIN_SOLVE_SIZE}, got {I_t.shape}")
    return I_t, I_s


def _features(I, cfg: SolverConfig, which: int) -> FeatureMap:
    path = cfg.feature_paths[which] if cfg.feature_paths else None
    return extract_features(I, cfg.backend, window=cfg.window, path=path)


def uncertainty_for(state: SolverState, small_t, small_s, Kq: Intrinsics, cfg: SolverConfig) -> UncertaintyMaps:
    h, w = state.inv_depth.shape
    if cfg.pin_rho:
        return UncertaintyMaps.constant((h, w), RHO_MIN, cfg.mu0, cfg.sigma0)
    u, v = pixel_grid(h, w)
    up, vp, ok = project_inverse_depth(u, v, state.inv_depth, state.transform, Kq)
    warped, inside = bilinear_sample(small_s, np.where(ok, up, -1.0), np.where(ok, vp, -1.0))
    visible = ok & inside
    return default_uncertainty(small_t, np.where(visible, warped, 0.0), visible, cfg.rho0, cfg.kappa, cfg.mu0, cfg.sigma0)


def solve(I_t, I_s, K: Intrinsics, cfg: SolverConfig | None = None, init_pose=None) -> Solution:
    """Estimate depth of ``I_t`` and the transform from ``I_t``'s camera to ``I_s``'s.

    ``K`` describes the full-resolution images.
    """
    cfg = cfg or SolverConfig()
    I_t, I_s = _prepare_images(I_t, I_s)
    F_t = _features(I_t, cfg, 0)
    F_s = _features(I_s, cfg, 1)
    if F_t.zero_fraction() > TEXTURELESS_FRACTION:
        raise IllConditionedError(
            f"{F_t.zero_fraction():.0%} of target descriptors are undefined (textureless input)"
        )
    P = build_pyramid(F_t, F_s)
    Kq = K.quarter()
    small_t = downsample(I_t, 4)
    small_s = downsample(I_s, 4)
    h, w = P.shape
    pose0 = np.zeros(6) if init_pose is None else np.asarray(init_pose, dtype=np.float64).copy()
    state = SolverState(np.full((h, w), 1.0 / cfg.init_depth), pose0)
    diag = Diagnostics()
    sched = cfg.schedule()
    level = sched[0]
    U = uncertainty_for(state, small_t, small_s, Kq, cfg)
    problem = Problem(P, Kq, U, level)
    ll_prev = -np.inf
    for n in range(cfg.iterations):
        # advance the level and refresh the mixture parameters from the current
        # warp, but only in combinations that do not lower the objective; the
        # last fallback is the previous iteration's objective, so l_n never drops
        wanted = sched[n]
        U_new = uncertainty_for(state, small_t, small_s, Kq, cfg)
        if n > 0:
            ll_cur = problem.mean_ll(state.inv_depth, state.pose)
            for lev, U_try in ((wanted, U_new), (level, U_new), (wanted, U), (level, U)):
                if lev == level and U_try is U:
                    break
                trial = Problem(P, Kq, U_try, lev)
                if trial.mean_ll(state.inv_depth, state.pose) >= ll_cur:
                    problem, level, U = trial, lev, U_try
                    break
        step_pose = step_depth = 0.0
        stalled = True
        for _ in range(cfg.inner_steps):
            maps = difference_maps(state, problem, cfg.disturbances)
            state, info = update_step(replace(state, level=level), maps, problem, cfg)
            step_pose += info.step_pose
            step_depth += info.step_depth
            stalled &= info.stalled
        state = replace(state, iter=n + 1, ll=problem.mean_ll(state.inv_depth, state.pose))
        diag.records.append(
            dict(iter=n + 1, level=level, ll=state.ll, step_pose=step_pose, step_depth=step_depth, stalled=stalled)
        )
        log.debug(diag.log_lines()[-1])
        improvement = state.ll - ll_prev
        ll_prev = state.ll
        if cfg.tol > 0 and 0 <= improvement < cfg.tol:
            break

    T = state.transform
    scale = _scene_scale(state.inv_depth)
    diag.depth_unconstrained = float(np.linalg.norm(T.t)) < 1e-3 * scale
    u, v = pixel_grid(h, w)
    up, vp, ok = project_inverse_depth(u, v, state.inv_depth, T, Kq)
    visible = ok & in_bounds(up, vp, h, w)
    diag.visible = visible
    qdepth = DepthMap(np.where(visible, 1.0 / state.inv_depth, 0.0), visible)
    full = upsample_depth(qdepth, I_t.shape)
    return Solution(full, T, diag, qdepth, state.pose.copy())


def upsample_depth(depth: DepthMap, shape) -> DepthMap:
    """Bilinear upsampling to ``shape`` on pixel centres; a pixel is valid when every contributing cell is."""
    H, W = shape
    h, w = depth.shape
    U, V = pixel_grid(H, W)
    # full-res pixel centre -> quarter-grid coordinate
    x = np.clip((U + 0.5) * w / W - 0.5, 0, w - 1)
    y = np.clip((V + 0.5) * h / H - 0.5, 0, h - 1)
    vals, _ = bilinear_sample(np.where(depth.valid, depth.values, 0.0), x, y)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    m = depth.valid
    valid = m[y0, x0] & m[y0, x1] & m[y1, x0] & m[y1, x1]
    return DepthMap(np.where(valid, vals, 0.0), valid)

