import numpy as np
import pytest

from svpc import manifold as mf
from svpc.camera import BehindCameraError, ImageBound, in_bound
from svpc.dynamics import ControlInput, ServoState, pack_input, pack_state
from svpc.ocp import (
    ConstraintMode,
    ConstraintSet,
    Horizon,
    OcpProblem,
    OcpReferences,
    OcpWeights,
    action_cost,
    perception_cost,
    relative_position,
    slack_penalty,
    soft_rows_packed,
    stage_cost,
    ttc_residual,
    visibility_residuals,
)
from conftest import random_quat, random_unit_vec


BOUND = ImageBound(0.5 * 557 / 376, 0.5 * 336 / 376)


def make_problem(rig, mode=ConstraintMode.TTC, **weight_kw):
    return OcpProblem(
        horizon=Horizon(20, 0.05),
        weights=OcpWeights(**weight_kw),
        references=OcpReferences(r_star=2.0),
        constraints=ConstraintSet(bound=BOUND, mode=mode),
        rig=rig,
    )


def axis_state(rig, r=2.0, v=(0, 0, 0), q_wb=(1, 0, 0, 0)):
    """State whose feature sits on the camera axis at range r."""
    rho_cam = np.array([0.0, 0.0, 1.0])
    return ServoState(np.array(v, dtype=float), np.array(q_wb, dtype=float),
                      mf.from_bearing(rho_cam), r)


def hover_input():
    return ControlInput(9.81, np.zeros(3))


def test_relative_position_axis(rig):
    # camera axis maps to body +x for the forward rig; offset adds
    x = axis_state(rig, r=2.0)
    np.testing.assert_allclose(
        relative_position(x, rig), [2.0 + 0.1, 0, 0], atol=1e-12
    )


def test_relative_position_rotates_with_attitude(rng, rig):
    x = axis_state(rig, r=3.0)
    p0 = relative_position(x, rig)
    dq = random_quat(rng)
    x2 = ServoState(x.v_w, mf.quat_mul(dq, x.q_wb), x.q, x.r)
    np.testing.assert_allclose(relative_position(x2, rig), mf.rotate(dq, p0), atol=1e-12)


def test_relative_position_matches_pose_composition(rng, rig):
    # oracle: compose the camera pose explicitly and place the target
    for _ in range(50):
        x = ServoState(
            rng.standard_normal(3), random_quat(rng),
            mf.from_bearing(random_unit_vec(rng)), rng.uniform(0.5, 10),
        )
        q_wc = mf.quat_mul(x.q_wb, rig.q_bc)
        expected = mf.rotate(q_wc, mf.bearing(x.q) * x.r) + mf.rotate(
            x.q_wb, rig.p_cb_b
        )
        np.testing.assert_allclose(relative_position(x, rig), expected, atol=1e-9)


def test_action_cost_zero_at_reference(rig):
    refs = OcpReferences(r_star=2.0).resolve(rig)
    w = OcpWeights()
    x = axis_state(rig, r=2.0)
    assert action_cost(x, hover_input(), refs, w, rig) == pytest.approx(0.0, abs=1e-20)


def test_action_cost_weight_scaling(rig):
    refs = OcpReferences(r_star=2.0).resolve(rig)
    x = axis_state(rig, r=3.5, v=(1.0, 0, 0))
    u = hover_input()
    base = OcpWeights()
    doubled = OcpWeights(q_p=2 * base.q_p)
    c1 = action_cost(x, u, refs, base, rig)
    c2 = action_cost(x, u, refs, doubled, rig)
    # only the position term doubles
    p_err = relative_position(x, rig) - refs.p_star
    pos_term = p_err @ (base.q_p * p_err)
    assert c2 - c1 == pytest.approx(pos_term)


def test_action_cost_argmin_over_range_matches_grid(rig):
    # 1-D brute-force oracle: sweeping r with all else at reference,
    # the minimizer must sit at the r solving p* = relative_position
    refs = OcpReferences(r_star=2.0).resolve(rig)
    w = OcpWeights()
    rs = np.linspace(0.5, 4.0, 3501)
    costs = [
        action_cost(axis_state(rig, r=r), hover_input(), refs, w, rig) for r in rs
    ]
    assert rs[int(np.argmin(costs))] == pytest.approx(2.0, abs=1e-3)


def test_perception_cost_cases(rig):
    w = OcpWeights(q_u=1.0)
    assert perception_cost(axis_state(rig), w) == pytest.approx(0.0, abs=1e-20)

    def state_at(xbar):
        rho = np.array([xbar, 0.0, 1.0])
        return ServoState([0, 0, 0], [1, 0, 0, 0],
                          mf.from_bearing(rho / np.linalg.norm(rho)), 2.0)

    assert perception_cost(state_at(0.1), w) == pytest.approx(0.01, abs=1e-12)
    assert perception_cost(state_at(-0.1), w) == pytest.approx(
        perception_cost(state_at(0.1), w)
    )
    with pytest.raises(BehindCameraError):
        perception_cost(
            ServoState([0, 0, 0], [1, 0, 0, 0], mf.from_bearing([0, 0, -1]), 2.0), w
        )


def test_perception_cost_ignores_vertical_sweep(rig):
    w = OcpWeights(q_u=3.0)
    for ybar in np.linspace(-0.6, 0.6, 13):
        rho = np.array([0.05, ybar, 1.0])
        x = ServoState([0, 0, 0], [1, 0, 0, 0],
                       mf.from_bearing(rho / np.linalg.norm(rho)), 2.0)
        assert perception_cost(x, w) == pytest.approx(3.0 * 0.05**2, abs=1e-12)


def test_visibility_residuals_cases():
    b = ImageBound(0.4, 0.3)

    def state_at(xbar, ybar=0.0):
        rho = np.array([xbar, ybar, 1.0])
        return ServoState([0, 0, 0], [1, 0, 0, 0],
                          mf.from_bearing(rho / np.linalg.norm(rho)), 2.0)

    res = visibility_residuals(state_at(0.0), b)
    np.testing.assert_allclose(res, [-0.4, -0.4, -0.3, -0.3], atol=1e-12)

    res = visibility_residuals(state_at(0.4), b)
    assert res[0] == pytest.approx(0.0, abs=1e-12)

    res = visibility_residuals(state_at(0.45), b)
    assert res[0] == pytest.approx(0.05, abs=1e-12)

    behind = ServoState([0, 0, 0], [1, 0, 0, 0], mf.from_bearing([0, 0, -1]), 2.0)
    np.testing.assert_allclose(
        visibility_residuals(behind, b), [4.0, 4.0, 3.0, 3.0], atol=1e-12
    )


def test_visibility_consistent_with_in_bound(rng):
    b = ImageBound(0.4, 0.3)
    for _ in range(300):
        rho = random_unit_vec(rng)
        if rho[2] <= 0.05:
            continue
        x = ServoState([0, 0, 0], [1, 0, 0, 0], mf.from_bearing(rho), 2.0)
        res = visibility_residuals(x, b)
        assert (np.max(res) <= 1e-12) == in_bound(mf.bearing(x.q), b)[0]


def test_ttc_residual_values(rig):
    x = axis_state(rig, r=2.0)
    n_w = mf.rotate(mf.quat_mul(x.q_wb, rig.q_bc), mf.bearing(x.q))

    # closing at 1 m/s with t_c_min = 2 s: exactly on the boundary
    x.v_w = 1.0 * n_w
    assert ttc_residual(x, hover_input(), rig, 2.0) == pytest.approx(0.0, abs=1e-12)

    # closing at 2 m/s: violation of +0.5
    x.v_w = 2.0 * n_w
    assert ttc_residual(x, hover_input(), rig, 2.0) == pytest.approx(0.5, abs=1e-12)

    # leaving: always satisfied by at least 1/t_c_min
    x.v_w = -3.0 * n_w
    assert ttc_residual(x, hover_input(), rig, 2.0) <= -1.0 / 2.0


def test_ttc_safe_set_membership(rng, rig):
    # any feasible residual (<= 0) implies leaving or TTC >= t_c_min
    t_c_min = 2.0
    for _ in range(200):
        x = ServoState(
            2.0 * rng.standard_normal(3), random_quat(rng),
            mf.from_bearing(random_unit_vec(rng)), rng.uniform(0.5, 10),
        )
        u = ControlInput(rng.uniform(2, 15), rng.standard_normal(3))
        res = ttc_residual(x, u, rig, t_c_min)
        if res <= 0:
            from svpc.dynamics import camera_twist

            v_c, _ = camera_twist(x, u, rig)
            closing = float(np.dot(mf.bearing(x.q), v_c))
            assert closing <= 0 or x.r / closing >= t_c_min - 1e-9


def test_slack_penalty():
    w = OcpWeights(w_z_l2=100.0, w_z_l1=10.0)
    assert slack_penalty(0.0, w) == 0.0
    assert slack_penalty(0.1, w) == pytest.approx(2.0)
    zs = np.linspace(0, 1, 50)
    vals = [slack_penalty(z, w) for z in zs]
    assert np.all(np.diff(vals) >= 0)


def test_stage_cost_composition(rig):
    refs = OcpReferences(r_star=2.0).resolve(rig)
    w = OcpWeights()
    x = axis_state(rig, r=2.0)
    assert stage_cost(x, hover_input(), 0.0, refs, w, rig) == pytest.approx(0.0)

    x2 = axis_state(rig, r=3.0, v=(0.5, 0, 0))
    u2 = ControlInput(11.0, np.array([0.1, 0, 0]))
    total = stage_cost(x2, u2, 0.2, refs, w, rig)
    assert total == pytest.approx(
        action_cost(x2, u2, refs, w, rig)
        + perception_cost(x2, w)
        + slack_penalty(0.2, w)
    )
    # doubling every weight doubles the stage cost
    w2 = OcpWeights(
        q_p=2 * w.q_p, q_v=2 * w.q_v, q_att=2 * w.q_att, r_u=2 * w.r_u,
        q_u=2 * w.q_u, w_z_l1=2 * w.w_z_l1, w_z_l2=2 * w.w_z_l2,
    )
    assert stage_cost(x2, u2, 0.2, refs, w2, rig) == pytest.approx(2 * total)


def test_soft_rows_modes(rig):
    x = pack_state(axis_state(rig, r=2.0))
    u = pack_input(hover_input())
    for mode, rows in [
        (ConstraintMode.TTC, 6),
        (ConstraintMode.DISTANCE, 6),
        (ConstraintMode.NONE, 5),
    ]:
        prob = make_problem(rig, mode=mode)
        assert soft_rows_packed(x, u, prob).shape[-1] == rows

    prob = make_problem(rig, mode=ConstraintMode.DISTANCE)
    assert soft_rows_packed(x, u, prob)[-1] == pytest.approx(-2.0)


def test_weights_validation():
    with pytest.raises(ValueError):
        OcpWeights(q_p=np.array([-1.0, 1, 1]))
    with pytest.raises(ValueError):
        OcpWeights(w_z_l1=0.0)


def test_constraint_set_validation():
    with pytest.raises(ValueError):
        ConstraintSet(bound=BOUND, t_c_min=0.0)
    with pytest.raises(ValueError):
        ConstraintSet(bound=BOUND, c_min=5.0, c_max=5.0)


def test_references_resolve_p_star(rig):
    refs = OcpReferences(rho_star=[0, 0, 1], r_star=2.0).resolve(rig)
    np.testing.assert_allclose(refs.p_star, [2.1, 0, 0], atol=1e-12)
