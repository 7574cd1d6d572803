import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import (
    demon_oracle,
    depth_metrics_oracle,
    inc_oracle,
    median_oracle,
    pose_oracle,
    prob_oracle,
    reg_oracle,
)

from corrsfm.geometry import DepthMap, PoseSE3, exp_map
from corrsfm.losses import (
    Iterate,
    LossConfig,
    LossError,
    Trajectory,
    demon_depth_metrics,
    depth_metrics,
    format_table,
    loss_inc,
    loss_prob,
    loss_reg,
    loss_total,
    pose_metrics,
    scale_factor,
    to_csv,
    trajectory_losses,
)


def random_trajectory(rng, n, shape=(5, 6)):
    D_gt = rng.uniform(1, 20, shape)
    T_gt = exp_map(np.r_[rng.normal(scale=0.1, size=3), rng.normal(size=3)])
    its = [
        Iterate(rng.uniform(0.5, 30, shape), exp_map(np.r_[rng.normal(scale=0.1, size=3), rng.normal(size=3)]), float(rng.normal()))
        for _ in range(n)
    ]
    return Trajectory(its), D_gt, T_gt


def test_scale_factor_cases():
    rng = np.random.default_rng(0)
    D = rng.uniform(1, 10, (4, 4))
    assert scale_factor(D, D) == 1.0
    assert np.isclose(scale_factor(D / 2, D), 2.0)
    A, B = rng.uniform(1, 10, (7, 9)), rng.uniform(1, 10, (7, 9))
    assert scale_factor(A, B) == median_oracle([b / a for a, b in zip(A.ravel(), B.ravel())])


def test_scale_factor_ignores_invalid_pixels():
    D = np.array([[1.0, 2.0, 3.0]])
    pred = DepthMap(np.array([[0.5, 1.0, 0.0]]), np.array([[True, True, False]]))
    assert scale_factor(pred, D) == 2.0
    with pytest.raises(LossError):
        scale_factor(DepthMap(np.zeros((1, 3)), np.zeros((1, 3), bool)), D)


def test_reg_perfect_trajectory_is_zero():
    rng = np.random.default_rng(1)
    D = rng.uniform(1, 10, (4, 4))
    T = exp_map([0.1, 0, 0.2, 1, 2, 3])
    total, terms = loss_reg(Trajectory([Iterate(D, T, -1.0)]), D, T)
    assert total == 0.0 and terms.tolist() == [0.0]


@given(st.floats(0.05, 20))
def test_reg_gauge_invariance(s):
    D = np.random.default_rng(2).uniform(1, 10, (4, 4))
    T = exp_map([0.1, -0.05, 0.02, 1, 2, 3])
    total, _ = loss_reg(Trajectory([Iterate(D / s, T.scaled(1 / s), 0.0)]), D, T)
    assert total < 1e-9


def test_reg_two_by_two_numeric_case():
    D_gt = np.array([[2.0, 4.0], [6.0, 8.0]])
    D_hat = np.array([[1.0, 2.5], [2.0, 4.0]])
    T_gt = PoseSE3(np.eye(3), [1.0, 0.0, 0.0])
    T_hat = exp_map([0.0, 0.0, 0.1, 0.4, 0.1, 0.0])
    # ratios 2, 1.6, 3, 2 -> alpha 2; scaled depth 2, 5, 4, 8 -> errors 0, 1, -2, 0
    depth = math.sqrt((0 + 1 + 4 + 0) / 4)
    rot = math.sqrt(2 * (1 - math.cos(0.1)) ** 2 + 2 * math.sin(0.1) ** 2)
    trans = math.sqrt((0.8 - 1) ** 2 + 0.2**2)
    total, _ = loss_reg(Trajectory([Iterate(D_hat, T_hat, 0.0)]), D_gt, T_gt)
    assert abs(total - (depth + rot + trans)) < 1e-12


def test_reg_matches_script_oracle():
    rng = np.random.default_rng(3)
    traj, D_gt, T_gt = random_trajectory(rng, 4)
    _, terms = loss_reg(traj, D_gt, T_gt)
    ref = reg_oracle([it.depth for it in traj], [it.pose.R.tolist() for it in traj], [it.pose.t.tolist() for it in traj],
                     D_gt, T_gt.R.tolist(), T_gt.t.tolist())
    assert np.allclose(terms, ref, atol=1e-9, rtol=0)


def test_prob_cases():
    assert loss_prob([0.0], [0.0]) == -1.0
    assert abs(loss_prob([math.log(2)], [0.0]) + 2) < 1e-15
    lls, regs = [-0.3, 0.2], [1.5, 0.4]
    assert abs(loss_prob(lls, regs) - prob_oracle(lls, regs)) < 1e-12
    assert abs(loss_prob(lls, regs, LossConfig(sigma_imp=2.0)) - prob_oracle(lls, regs, 2.0)) < 1e-12
    with pytest.raises(LossError):
        loss_prob([0.0, 1.0], [0.0])


def test_inc_cases():
    assert loss_inc([0.5, 0.5, 0.5], [1.0, 2.0, 3.0]) == 0.0
    assert loss_inc([-3.0, -1.0, 0.0], [0.0, 0.0, 0.0]) == 0.0
    assert abs(loss_inc([-1.0, -0.5], [math.e - 1]) + 0.5) < 1e-15
    with pytest.raises(LossError):
        loss_inc([0.0], [1.0, 2.0, 3.0])


def test_inc_with_one_likelihood_per_iterate_drops_last_term():
    lls, regs = [-1.0, -0.5, -0.2], [0.3, 0.2, 0.1]
    assert loss_inc(lls, regs) == loss_inc(lls, regs[:2])
    assert abs(loss_inc(lls, regs) - inc_oracle(lls, regs)) < 1e-15


def test_total_cases():
    assert loss_total((2, 3, 4)) == 9
    assert loss_total((2, 3, 4), LossConfig(0, 0, 0)) == 0
    assert abs(loss_total((1, 1, 1), LossConfig.initialization()) - 1.1) < 1e-12
    assert LossConfig.initialization().weights == (0.05, 1.0, 0.05)
    with pytest.raises(LossError):
        LossConfig(alpha1=-1)


def test_trajectory_losses_consistency():
    rng = np.random.default_rng(4)
    traj, D_gt, T_gt = random_trajectory(rng, 3)
    out = trajectory_losses(traj, D_gt, T_gt, LossConfig.initialization())
    assert abs(out["total"] - (0.05 * out["reg"] + out["inc"] + 0.05 * out["prob"])) < 1e-12


def test_trajectory_validation():
    with pytest.raises(LossError):
        Trajectory([])
    with pytest.raises(LossError):
        Trajectory([Iterate(np.ones((2, 2)), PoseSE3.identity(), float("nan"))])


def test_depth_metrics_identity_and_ratio():
    D = np.random.default_rng(5).uniform(1, 10, (6, 6))
    m = depth_metrics(D, D)
    assert [m[k] for k in ("AbsRel", "SqRel", "RMSE", "RMSE_log", "d1", "d2", "d3")] == [0, 0, 0, 0, 1, 1, 1]
    m = depth_metrics(1.3 * D, D)
    assert abs(m["AbsRel"] - 0.3) < 1e-12 and m["d1"] == 0 and m["d2"] == 1
    assert abs(depth_metrics(1.3 * D, D, align=True)["AbsRel"]) < 1e-12


@pytest.mark.parametrize("align", [False, True])
def test_depth_metrics_match_script(align):
    rng = np.random.default_rng(6)
    pred, gt = rng.uniform(0.5, 20, (9, 11)), rng.uniform(0.5, 20, (9, 11))
    m, ref = depth_metrics(pred, gt, align), depth_metrics_oracle(pred, gt, align)
    for k in ref:
        assert abs(m[k] - ref[k]) < 1e-9


def test_demon_metrics():
    rng = np.random.default_rng(7)
    D = rng.uniform(1, 10, (5, 5))
    assert demon_depth_metrics(D, D) == {"L1-inv": 0.0, "Sc-inv": 0.0, "L1-rel": 0.0}
    assert demon_depth_metrics(3.7 * D, D)["Sc-inv"] < 1e-7
    pred, gt = rng.uniform(0.5, 20, (8, 8)), rng.uniform(0.5, 20, (8, 8))
    m, ref = demon_depth_metrics(pred, gt), demon_oracle(pred, gt)
    for k in ref:
        assert abs(m[k] - ref[k]) < 1e-9


def test_pose_metrics_cases():
    T = exp_map([0.1, 0.2, -0.1, 1, -2, 0.5])
    m = pose_metrics(T, T)
    assert m["Rot"] < 1e-6 and m["Tran"] < 1e-6
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    R10 = exp_map(np.r_[np.radians(10) * axis, 0, 0, 0]).R
    assert abs(pose_metrics(PoseSE3(T.R @ R10, T.t), T)["Rot"] - 10) < 1e-9
    assert abs(pose_metrics(PoseSE3(T.R, -T.t), T)["Tran"] - 180) < 1e-9
    zero = pose_metrics(PoseSE3(T.R, np.zeros(3)), T)
    assert math.isnan(zero["Tran"]) and not zero["tran_defined"]


def test_pose_metrics_match_script():
    rng = np.random.default_rng(8)
    for _ in range(20):
        A = exp_map(np.r_[rng.normal(scale=0.5, size=3), rng.normal(size=3)])
        B = exp_map(np.r_[rng.normal(scale=0.5, size=3), rng.normal(size=3)])
        rot, tran = pose_oracle(A.R, A.t.tolist(), B.R, B.t.tolist())
        m = pose_metrics(A, B)
        assert abs(m["Rot"] - rot) < 1e-9 and abs(m["Tran"] - tran) < 1e-9


def test_table_and_csv_formatting():
    rows = [{"name": "a", "x": 1 / 3, "y": 1234567.0}]
    table = format_table(rows, ("name", "x", "y"))
    assert "0.333333" in table and "1.23457e+06" in table
    assert to_csv(rows, ("x", "y")) == "x,y\n0.333333,1.23457e+06\n"
