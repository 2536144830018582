"""Arm simulation tests: kinematics oracles, controller invariants, contacts."""

import math

import numpy as np
import pytest

from planarbc import sim


def settle(world, params, seconds):
    u = sim.Control(0.0, np.zeros(2), sim.GRIPPER_OPEN)
    for _ in range(int(round(seconds / sim.CONTROL_DT))):
        world = sim.env_step(world, u, params)
    return world


def free_world(q=None, params=sim.DEFAULT_ARM):
    q = sim.HOME_Q.copy() if q is None else np.asarray(q, dtype=float)
    joints = sim.JointState(q, np.zeros(3))
    return sim.WorldState(joints=joints, target=sim.forward_kinematics(q, params))


# ---------------------------------------------------------------------------
# wrap_angle
# ---------------------------------------------------------------------------

def test_wrap_angle_range_and_fixed_points():
    assert sim.wrap_angle(0.0) == 0.0
    assert sim.wrap_angle(math.pi) == pytest.approx(math.pi)
    assert sim.wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert sim.wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert sim.wrap_angle(2 * math.pi) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for a in rng.uniform(-50, 50, size=200):
        w = sim.wrap_angle(a)
        assert -math.pi < w <= math.pi
        # same angle modulo 2 pi
        assert abs(math.remainder(a - w, 2 * math.pi)) < 1e-9


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def test_fk_collinear_links():
    pose = sim.forward_kinematics(np.zeros(3))
    np.testing.assert_allclose(pose.position, [0.7, 0.0], atol=1e-12)
    assert pose.orientation == pytest.approx(0.0)


def test_fk_rigid_rotation():
    pose = sim.forward_kinematics(np.array([math.pi / 2, 0.0, 0.0]))
    np.testing.assert_allclose(pose.position, [0.0, 0.7], atol=1e-12)
    assert pose.orientation == pytest.approx(math.pi / 2)


def test_fk_against_scalar_arithmetic():
    # Independent evaluation: cumulative angles written out by hand.
    a1 = 0.3
    a2 = 0.3 + (-0.5)
    a3 = 0.3 + (-0.5) + 0.8
    x = 0.3 * math.cos(a1) + 0.3 * math.cos(a2) + 0.1 * math.cos(a3)
    y = 0.3 * math.sin(a1) + 0.3 * math.sin(a2) + 0.1 * math.sin(a3)
    pose = sim.forward_kinematics(np.array([0.3, -0.5, 0.8]))
    np.testing.assert_allclose(pose.position, [x, y], atol=1e-12)
    assert pose.orientation == pytest.approx(a3)


def test_fk_respects_base_position():
    params = sim.ArmParams(base_position=(0.1, -0.2))
    pose = sim.forward_kinematics(np.zeros(3), params)
    np.testing.assert_allclose(pose.position, [0.8, -0.2], atol=1e-12)


def test_link_points_chain():
    pts = sim.link_points(np.zeros(3))
    np.testing.assert_allclose(pts, [[0, 0], [0.3, 0], [0.6, 0], [0.7, 0]], atol=1e-12)


# ---------------------------------------------------------------------------
# End-effector marker points
# ---------------------------------------------------------------------------

def test_ee_points_identity_orientation():
    pts = sim.ee_points(np.zeros(3))
    np.testing.assert_allclose(
        pts, [0.7, 0.0, 0.73, 0.02, 0.73, -0.02], atol=1e-12)


def test_ee_points_quarter_turn():
    # Rotating the whole arm by pi/2 maps each offset (dx, dy) -> (-dy, dx).
    pts = sim.ee_points(np.array([math.pi / 2, 0.0, 0.0])).reshape(3, 2)
    expected = np.array([[0.0, 0.7],
                         [0.0 - 0.02, 0.7 + 0.03],
                         [0.0 + 0.02, 0.7 + 0.03]])
    np.testing.assert_allclose(pts, expected, atol=1e-12)


def test_ee_points_rigidity():
    ref = sim.ee_points(np.zeros(3)).reshape(3, 2)
    ref_d = [np.linalg.norm(ref[i] - ref[j]) for i in range(3) for j in range(i)]
    rng = np.random.default_rng(7)
    for _ in range(1000):
        pts = sim.ee_points(rng.uniform(-math.pi, math.pi, 3)).reshape(3, 2)
        d = [np.linalg.norm(pts[i] - pts[j]) for i in range(3) for j in range(i)]
        np.testing.assert_allclose(d, ref_d, atol=1e-9)


# ---------------------------------------------------------------------------
# Jacobian
# ---------------------------------------------------------------------------

def test_jacobian_last_row_and_straight_arm():
    rng = np.random.default_rng(3)
    for _ in range(20):
        J = sim.jacobian(rng.uniform(-math.pi, math.pi, 3))
        np.testing.assert_allclose(J[2], [1.0, 1.0, 1.0], atol=1e-15)
    J0 = sim.jacobian(np.zeros(3))
    assert J0[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert J0[1, 0] == pytest.approx(0.7)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(50):
        q = rng.uniform(-math.pi, math.pi, 3)
        J = sim.jacobian(q)
        for k in range(3):
            qp, qm = q.copy(), q.copy()
            qp[k] += h
            qm[k] -= h
            pp = sim.forward_kinematics(qp)
            pm = sim.forward_kinematics(qm)
            col = np.array([
                (pp.position[0] - pm.position[0]) / (2 * h),
                (pp.position[1] - pm.position[1]) / (2 * h),
                sim.wrap_angle(pp.orientation - pm.orientation) / (2 * h),
            ])
            denom = np.maximum(np.abs(col), 1.0)
            assert np.all(np.abs(J[:, k] - col) / denom < 1e-5)


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

def test_controller_exact_fixed_point():
    joints = sim.JointState(sim.HOME_Q.copy(), np.zeros(3))
    pose = sim.forward_kinematics(joints.q)
    tau = sim.controller_torques(joints, pose, pose)
    assert np.all(tau == 0.0)


def test_controller_pure_position_error_definition():
    params = sim.DEFAULT_ARM
    joints = sim.JointState(sim.HOME_Q.copy(), np.zeros(3))
    cur = sim.forward_kinematics(joints.q)
    e = np.array([1e-4, -2e-4])  # small: no clamping
    tgt = sim.EEPose(cur.position + e, cur.orientation)
    tau = sim.controller_torques(joints, cur, tgt, params)
    expected = sim.jacobian(joints.q)[:2].T @ (params.kp_pos * e)
    np.testing.assert_allclose(tau, expected, rtol=1e-12)


def test_controller_damping_and_clamp():
    params = sim.DEFAULT_ARM
    joints = sim.JointState(sim.HOME_Q.copy(), np.array([0.5, -1.0, 2.0]))
    pose = sim.forward_kinematics(joints.q)
    tau = sim.controller_torques(joints, pose, pose, params)
    np.testing.assert_allclose(tau, -params.joint_damping * joints.qdot, rtol=1e-12)
    far = sim.EEPose(pose.position + np.array([5.0, 5.0]), pose.orientation)
    tau = sim.controller_torques(joints, pose, far, params)
    assert np.all(np.abs(tau) <= params.torque_limit + 1e-12)
    assert np.any(np.abs(tau) == params.torque_limit)


def test_convergence_from_home_to_random_reachable_targets():
    params = sim.DEFAULT_ARM
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tgt = sim.sample_reachable_pose(rng, params)
        world = free_world()
        world.target = tgt
        world = settle(world, params, 2.0)
        cur = sim.forward_kinematics(world.joints.q, params)
        perr = float(np.hypot(*(cur.position - tgt.position)))
        oerr = abs(sim.wrap_angle(cur.orientation - tgt.orientation))
        assert perr < 0.005, f"seed {seed}: position error {perr * 1000:.2f} mm"
        assert oerr < 0.05, f"seed {seed}: orientation error {oerr:.4f} rad"


# ---------------------------------------------------------------------------
# Integrator
# ---------------------------------------------------------------------------

def test_sim_step_rest_is_fixed_point():
    world = free_world()
    out = sim.sim_step(world, np.zeros(3), sim.SIM_DT)
    np.testing.assert_array_equal(out.joints.q, world.joints.q)
    np.testing.assert_array_equal(out.joints.qdot, world.joints.qdot)
    assert out.sim_time == pytest.approx(sim.SIM_DT)


def test_sim_step_single_step_formula():
    params = sim.DEFAULT_ARM
    world = free_world()
    world.joints.qdot = np.array([0.1, -0.2, 0.3])
    tau = np.array([1.0, 2.0, -3.0])
    dt = sim.SIM_DT
    out = sim.sim_step(world, tau, dt, params)
    qdot_expected = world.joints.qdot + dt * (
        tau - params.joint_damping * world.joints.qdot) / params.joint_inertia
    q_expected = world.joints.q + dt * qdot_expected
    np.testing.assert_allclose(out.joints.qdot, qdot_expected, rtol=1e-15)
    np.testing.assert_allclose(out.joints.q, q_expected, rtol=1e-15)


def test_sim_step_rejects_bad_dt_and_nan_torque():
    world = free_world()
    with pytest.raises(ValueError):
        sim.sim_step(world, np.zeros(3), 0.0)
    with pytest.raises(sim.SimulationError):
        sim.sim_step(world, np.array([np.nan, 0.0, 0.0]), sim.SIM_DT)


def test_long_run_stability_bounded_velocities():
    params = sim.DEFAULT_ARM
    rng = np.random.default_rng(42)
    world = free_world()
    u = sim.Control(0.0, np.zeros(2), sim.GRIPPER_OPEN)
    for step in range(600):  # 60 s of sim time
        if step % 20 == 0:
            world.target = sim.sample_reachable_pose(rng, params)
        world = sim.env_step(world, u, params)
        assert np.all(np.isfinite(world.joints.q))
        assert np.max(np.abs(world.joints.qdot)) < 50.0


# ---------------------------------------------------------------------------
# env_step
# ---------------------------------------------------------------------------

def test_env_step_zero_command_at_equilibrium():
    world = free_world()
    out = sim.env_step(world, sim.Control(0.0, np.zeros(2), sim.GRIPPER_OPEN))
    cur = sim.forward_kinematics(out.joints.q)
    ref = sim.forward_kinematics(world.joints.q)
    assert np.hypot(*(cur.position - ref.position)) < 1e-6


def test_env_step_tracks_commanded_velocity():
    world = free_world()
    u = sim.Control(0.0, np.array([0.1, 0.0]), sim.GRIPPER_OPEN)
    xs = [sim.forward_kinematics(world.joints.q).position[0]]
    for _ in range(15):
        world = sim.env_step(world, u)
        xs.append(sim.forward_kinematics(world.joints.q).position[0])
    advances = np.diff(xs)[5:]  # skip the spin-up transient
    assert abs(advances.mean() - 0.01) < 0.002


def test_env_step_integrates_target_not_measurement():
    world = free_world()
    u = sim.Control(0.3, np.array([0.05, -0.02]), sim.GRIPPER_OPEN)
    out = sim.env_step(world, u)
    np.testing.assert_allclose(
        out.target.position, world.target.position + 0.1 * u.v, rtol=1e-12)
    assert out.target.orientation == pytest.approx(
        sim.wrap_angle(world.target.orientation + 0.1 * u.omega))


def test_env_step_rejects_nonfinite_control():
    with pytest.raises(ValueError):
        sim.Control(np.inf, np.zeros(2), sim.GRIPPER_OPEN)
    with pytest.raises(ValueError):
        sim.Control(0.0, np.array([np.nan, 0.0]), sim.GRIPPER_OPEN)
    with pytest.raises(ValueError):
        sim.Control(0.0, np.zeros(2), 2)


def test_env_step_deterministic():
    world = free_world()
    world.objects = [sim.ObjectState(0, "disc", np.array([0.02]),
                                     np.array([0.45, -0.1]), graspable=True)]
    u = sim.Control(0.2, np.array([0.1, -0.05]), sim.GRIPPER_OPEN)
    a = sim.env_step(world.copy(), u)
    b = sim.env_step(world.copy(), u)
    np.testing.assert_array_equal(a.joints.q, b.joints.q)
    np.testing.assert_array_equal(a.joints.qdot, b.joints.qdot)
    np.testing.assert_array_equal(a.objects[0].position, b.objects[0].position)
    assert a.sim_time == b.sim_time


# ---------------------------------------------------------------------------
# Grasping
# ---------------------------------------------------------------------------

def grasp_world(offset):
    world = free_world()
    ee = sim.forward_kinematics(world.joints.q)
    pos = ee.position + offset
    world.objects = [sim.ObjectState(0, "disc", np.array([0.02]), pos,
                                     graspable=True)]
    return world


def test_close_within_range_attaches():
    # Disc boundary 0.02 m away: inside the 0.025 m grasp range.
    world = grasp_world(np.array([0.04, 0.0]))
    out = sim.env_step(world, sim.Control(0.0, np.zeros(2), sim.GRIPPER_CLOSE))
    assert out.held_object == 0
    assert not out.gripper_open


def test_close_out_of_range_does_not_attach():
    world = grasp_world(np.array([0.08, 0.0]))
    out = sim.env_step(world, sim.Control(0.0, np.zeros(2), sim.GRIPPER_CLOSE))
    assert out.held_object is None


def test_held_object_moves_with_gripper_and_releases():
    world = grasp_world(np.array([0.04, 0.0]))
    held = sim.env_step(world, sim.Control(0.0, np.zeros(2), sim.GRIPPER_CLOSE))
    u = sim.Control(0.0, np.array([0.0, 0.1]), sim.GRIPPER_CLOSE)
    moved = held
    for _ in range(5):
        moved = sim.env_step(moved, u)
    ee0 = sim.forward_kinematics(held.joints.q)
    ee1 = sim.forward_kinematics(moved.joints.q)
    obj_delta = moved.objects[0].position - held.objects[0].position
    ee_delta = ee1.position - ee0.position
    np.testing.assert_allclose(obj_delta, ee_delta, atol=1e-3)
    released = sim.env_step(moved, sim.Control(0.0, np.zeros(2), sim.GRIPPER_OPEN))
    assert released.held_object is None
    assert released.gripper_open


def test_non_graspable_object_never_attaches():
    world = free_world()
    ee = sim.forward_kinematics(world.joints.q)
    world.objects = [sim.ObjectState(0, "box", np.array([0.02, 0.03]),
                                     ee.position + np.array([0.04, 0.0]),
                                     graspable=False)]
    out = sim.env_step(world, sim.Control(0.0, np.zeros(2), sim.GRIPPER_CLOSE))
    assert out.held_object is None


# ---------------------------------------------------------------------------
# Contacts
# ---------------------------------------------------------------------------

WALL_FACE_X = 0.50  # front face of the test wall (box centered at 0.52)


def wall_world(params):
    """Arm settled facing an immovable wall whose front face is at x = 0.50."""
    world = free_world(params=params)
    world.objects = [sim.ObjectState(9, "box", np.array([0.02, 0.25]),
                                     np.array([0.52, 0.0]),
                                     graspable=False, movable=False)]
    world.target = sim.EEPose(np.array([0.42, 0.0]), 0.0)
    return settle(world, params, 1.5)


def press_force(world, params, depth):
    """Push the target ``depth`` into the wall face and report settled force."""
    surface_x = WALL_FACE_X - params.gripper_radius_open
    w = world.copy()
    w.target = sim.EEPose(np.array([surface_x + depth, 0.0]), 0.0)
    w = settle(w, params, 1.5)
    return w.last_contact_force, w


def test_wall_blocks_gripper():
    params = sim.DEFAULT_ARM
    _, pressed = press_force(wall_world(params), params, 0.05)
    ee = sim.forward_kinematics(pressed.joints.q, params)
    # Gripper center stays outside the wall face by its collision radius.
    assert ee.position[0] <= WALL_FACE_X - params.gripper_radius_open + 1e-4


def test_contact_force_matches_spring_equilibrium():
    params = sim.DEFAULT_ARM
    world = wall_world(params)
    depth = 0.01
    f1, _ = press_force(world, params, depth)
    f2, _ = press_force(world, params, 2 * depth)
    assert f1 == pytest.approx(params.kp_pos * depth, rel=0.05)
    assert f2 / f1 == pytest.approx(2.0, rel=0.05)


def test_free_space_reports_zero_contact_force():
    world = settle(free_world(), sim.DEFAULT_ARM, 0.5)
    assert world.last_contact_force == 0.0


def test_movable_object_gets_pushed_and_speed_recorded():
    params = sim.DEFAULT_ARM
    world = free_world(params=params)
    ee = sim.forward_kinematics(world.joints.q, params)
    world.objects = [sim.ObjectState(0, "box", np.array([0.02, 0.03]),
                                     ee.position + np.array([0.06, 0.0]),
                                     graspable=False, movable=True)]
    u = sim.Control(0.0, np.array([0.1, 0.0]), sim.GRIPPER_OPEN)
    for _ in range(10):
        world = sim.env_step(world, u, params)
    assert world.objects[0].position[0] > ee.position[0] + 0.06
    assert world.max_object_speed > 0.0


def test_boundary_distance_disc_and_box():
    disc = sim.ObjectState(0, "disc", np.array([0.05]), np.array([1.0, 0.0]))
    assert sim.object_boundary_distance(np.array([1.2, 0.0]), disc) == pytest.approx(0.15)
    assert sim.object_boundary_distance(np.array([1.0, 0.0]), disc) == pytest.approx(-0.05)
    box = sim.ObjectState(1, "box", np.array([0.1, 0.2]), np.zeros(2))
    assert sim.object_boundary_distance(np.array([0.3, 0.0]), box) == pytest.approx(0.2)
    assert sim.object_boundary_distance(np.array([0.3, 0.3]), box) == pytest.approx(
        math.hypot(0.2, 0.1))
    assert sim.object_boundary_distance(np.array([0.0, 0.0]), box) == pytest.approx(-0.1)
    rot = sim.ObjectState(2, "box", np.array([0.1, 0.2]), np.zeros(2),
                          orientation=math.pi / 2)
    assert sim.object_boundary_distance(np.array([0.3, 0.0]), rot) == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# reset / is_success
# ---------------------------------------------------------------------------

def test_reset_deterministic():
    a = sim.reset(sim.REACH_TASK, seed=123)
    b = sim.reset(sim.REACH_TASK, seed=123)
    np.testing.assert_array_equal(a.joints.q, b.joints.q)
    np.testing.assert_array_equal(a.objects[0].position, b.objects[0].position)
    assert a.objects[0].orientation == b.objects[0].orientation
    c = sim.reset(sim.REACH_TASK, seed=124)
    assert np.any(c.objects[0].position != a.objects[0].position)


def test_reset_positions_inside_region():
    for task in (sim.REACH_TASK, sim.PUSH_TASK, sim.GRASP_PLACE_TASK):
        for seed in range(1000):
            world = sim.reset(task, seed)
            assert task.init_region.contains(world.objects[0].position)


def test_reset_target_is_home_pose():
    world = sim.reset(sim.REACH_TASK, seed=0)
    home = sim.forward_kinematics(sim.HOME_Q)
    np.testing.assert_allclose(world.target.position, home.position, atol=1e-12)
    np.testing.assert_array_equal(world.joints.qdot, np.zeros(3))


def test_reset_marginals_uniform():
    from scipy import stats
    xs = np.empty(10000)
    ys = np.empty(10000)
    for seed in range(10000):
        pos = sim.reset(sim.REACH_TASK, seed).objects[0].position
        xs[seed], ys[seed] = pos
    region = sim.REACH_TASK.init_region
    for vals, lo, hi in ((xs, region.xmin, region.xmax),
                         (ys, region.ymin, region.ymax)):
        counts, _ = np.histogram(vals, bins=10, range=(lo, hi))
        assert stats.chisquare(counts).pvalue > 0.01


def test_success_push_center_and_boundary():
    world = sim.reset(sim.PUSH_TASK, seed=0)
    world.objects[0].position = sim.PUSH_TASK.target_region.center
    assert sim.is_success(sim.PUSH_TASK, world)
    world.objects[0].position = np.array([sim.PUSH_TASK.target_region.xmax + 0.01,
                                          sim.PUSH_TASK.target_region.ymax])
    assert not sim.is_success(sim.PUSH_TASK, world)


def test_success_reach_distance_strict():
    world = sim.reset(sim.REACH_TASK, seed=0)
    ee = sim.forward_kinematics(world.joints.q)
    tol = sim.REACH_TASK.success_tolerance
    world.objects[0].position = ee.position + np.array([tol - 1e-6, 0.0])
    assert sim.is_success(sim.REACH_TASK, world)
    world.objects[0].position = ee.position + np.array([tol + 1e-6, 0.0])
    assert not sim.is_success(sim.REACH_TASK, world)


def test_success_reach_fails_after_knock_over():
    world = sim.reset(sim.REACH_TASK, seed=0)
    ee = sim.forward_kinematics(world.joints.q)
    world.objects[0].position = ee.position.copy()
    world.max_object_speed = sim.KNOCK_OVER_SPEED + 0.01
    assert not sim.is_success(sim.REACH_TASK, world)


def test_success_grasp_place_requires_release():
    world = sim.reset(sim.GRASP_PLACE_TASK, seed=0)
    world.objects[0].position = sim.GRASP_PLACE_TASK.target_region.center
    world.gripper_open = True
    world.held_object = None
    assert sim.is_success(sim.GRASP_PLACE_TASK, world)
    world.held_object = 0
    world.gripper_open = False
    assert not sim.is_success(sim.GRASP_PLACE_TASK, world)
