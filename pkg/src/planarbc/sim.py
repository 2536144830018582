"""Planar 3-link arm simulation with torque-level control.

The arm is driven the same way a physical teleoperated manipulator would be:
a pose target is updated at 10 Hz (by an operator, a scripted controller, or
a learned policy emitting twist commands), and a Jacobian-transpose torque
controller tracks that target at 1 kHz. Because the torque law is a Cartesian
spring, the gap between target and measured pose doubles as a contact-force
proxy when the gripper is obstructed.

Units are SI throughout (m, rad, s, N, N·m). All step functions are pure:
they return new ``WorldState`` values and never mutate their inputs, so a
state can be copied, shipped across processes, or replayed freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi

# Simulation rates shared by every consumer of this module.
CONTROL_DT = 0.1          # 10 Hz command grid
SIM_DT = 0.001            # 1 kHz torque loop
SIM_SUBSTEPS = int(round(CONTROL_DT / SIM_DT))

# Velocity caps applied to commanded twists (demonstrators, teleop, rollouts).
V_CAP = 0.3               # m/s
W_CAP = 1.5               # rad/s

# Grasping / contact conventions.
GRASP_RANGE = 0.025       # close within this distance of an object boundary to attach
KNOCK_OVER_SPEED = 0.25   # m/s; an object ever moving faster than this counts as knocked over

# Operational workspace for pose targets. A pose is comfortably trackable when
# its wrist point (gripper center minus the hand link) sits well inside the
# two-link annulus; near the folded-elbow boundary the transpose controller
# creeps or falls into the wrong elbow branch, so targets are kept out of it.
WRIST_RADIUS_RANGE = (0.20, 0.55)
EE_RADIUS_MAX = 0.65

GRIPPER_CLOSE = 1         # Control.gripper value commanding the fingers shut
GRIPPER_OPEN = 0


class SimulationError(RuntimeError):
    """Raised when integration produces non-finite state (unstable gains)."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


# ---------------------------------------------------------------------------
# Parameters and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArmParams:
    """Physical constants of the arm and its low-level controller.

    The damping and gain defaults were picked so that pose targets inside the
    workspace settle below 5 mm / 0.05 rad within 2 s; they are tunable.
    ``gripper_radius_open`` is the effective collision radius of the spread
    fingers (small, so an open gripper can straddle a graspable object),
    ``gripper_radius_closed`` the radius of the closed fist used for pushing.
    """

    link_lengths: tuple[float, float, float] = (0.3, 0.3, 0.1)
    joint_damping: float = 12.0
    joint_inertia: float = 1.0
    kp_pos: float = 8000.0
    kp_rot: float = 600.0
    torque_limit: float = 80.0
    base_position: tuple[float, float] = (0.0, 0.0)
    gripper_radius_open: float = 0.012
    gripper_radius_closed: float = 0.025

    def __post_init__(self):
        if any(l <= 0 for l in self.link_lengths):
            raise ValueError("link lengths must be positive")
        if self.joint_damping <= 0 or self.joint_inertia <= 0:
            raise ValueError("damping and inertia must be positive")
        if self.torque_limit <= 0:
            raise ValueError("torque limit must be positive")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))


DEFAULT_ARM = ArmParams()

# Fixed marker points rigidly attached to the gripper, in the gripper frame:
# center, left fingertip, right fingertip.
EE_MARKER_OFFSETS = np.array([[0.0, 0.0], [0.03, 0.02], [0.03, -0.02]])
POINT_DIM = EE_MARKER_OFFSETS.size  # 6 in the planar case

# Home joint configuration used by reset(); places the gripper low-left of the
# task regions, pointing into the workspace.
HOME_Q = np.array([-1.2, 1.5, 0.4])


@dataclass
class JointState:
    q: np.ndarray            # (3,) rad
    qdot: np.ndarray         # (3,) rad/s

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.qdot.copy())


@dataclass
class EEPose:
    position: np.ndarray     # (2,) m
    orientation: float       # rad, wrapped to (-pi, pi]

    def copy(self) -> "EEPose":
        return EEPose(self.position.copy(), self.orientation)


@dataclass
class ObjectState:
    """A task object: a disc (radius) or an axis-pair box (half extents)."""

    id: int
    shape: str               # "disc" | "box"
    size: np.ndarray         # disc: (radius,); box: (hx, hy)
    position: np.ndarray     # (2,) m
    orientation: float = 0.0
    height_class: int = 1    # depth-rendering layer (objects 1..3)
    graspable: bool = False
    movable: bool = True

    def __post_init__(self):
        if np.any(np.asarray(self.size) <= 0):
            raise ValueError("object size must be positive")

    def copy(self) -> "ObjectState":
        return ObjectState(self.id, self.shape, self.size.copy(),
                           self.position.copy(), self.orientation,
                           self.height_class, self.graspable, self.movable)


@dataclass
class WorldState:
    joints: JointState
    target: EEPose                       # current setpoint of the torque controller
    gripper_open: bool = True
    held_object: Optional[int] = None
    objects: list[ObjectState] = field(default_factory=list)
    sim_time: float = 0.0
    last_contact_force: float = 0.0      # N, magnitude of most recent EE contact force
    max_object_speed: float = 0.0        # m/s, fastest any object was shoved this episode
    # Grasp attachment, expressed in the gripper frame at attach time.
    held_offset: Optional[np.ndarray] = None
    held_angle: float = 0.0

    def copy(self) -> "WorldState":
        return WorldState(
            joints=self.joints.copy(),
            target=self.target.copy(),
            gripper_open=self.gripper_open,
            held_object=self.held_object,
            objects=[o.copy() for o in self.objects],
            sim_time=self.sim_time,
            last_contact_force=self.last_contact_force,
            max_object_speed=self.max_object_speed,
            held_offset=None if self.held_offset is None else self.held_offset.copy(),
            held_angle=self.held_angle,
        )

    def object_by_id(self, oid: int) -> ObjectState:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")


@dataclass
class Control:
    """A 10 Hz policy/operator command: twist of the pose target plus gripper bit."""

    omega: float             # rad/s
    v: np.ndarray            # (2,) m/s
    gripper: int             # GRIPPER_OPEN or GRIPPER_CLOSE

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        if not (math.isfinite(self.omega) and np.all(np.isfinite(self.v))):
            raise ValueError("control must be finite")
        if self.gripper not in (GRIPPER_OPEN, GRIPPER_CLOSE):
            raise ValueError("gripper must be 0 or 1")

    def as_vector(self) -> np.ndarray:
        """(omega, vx, vy, gripper) layout used by datasets and policies."""
        return np.array([self.omega, self.v[0], self.v[1], float(self.gripper)])


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

class TaskKind(Enum):
    REACH = "reach"
    PUSH = "push"
    GRASP_PLACE = "grasp_place"


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, p) -> bool:
        return self.xmin <= p[0] <= self.xmax and self.ymin <= p[1] <= self.ymax

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(self.xmin, self.xmax),
                         rng.uniform(self.ymin, self.ymax)])

    def expanded(self, margin: float) -> "Rect":
        return Rect(self.xmin - margin, self.ymin - margin,
                    self.xmax + margin, self.ymax + margin)


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    init_region: Rect
    target_region: Rect
    success_tolerance: float
    max_episode_steps: int

    def __post_init__(self):
        if self.success_tolerance <= 0:
            raise ValueError("success tolerance must be positive")
        for rect in (self.init_region, self.target_region):
            for corner in ((rect.xmin, rect.ymin), (rect.xmin, rect.ymax),
                           (rect.xmax, rect.ymin), (rect.xmax, rect.ymax)):
                r = math.hypot(corner[0], corner[1])
                if r > DEFAULT_ARM.reach - 0.05:
                    raise ValueError(f"region corner {corner} outside workspace annulus")


REACH_TASK = TaskSpec(
    kind=TaskKind.REACH,
    init_region=Rect(0.25, -0.22, 0.55, 0.22),
    target_region=Rect(0.25, -0.22, 0.55, 0.22),   # unused by the success predicate
    success_tolerance=0.045,
    max_episode_steps=80,
)

PUSH_TASK = TaskSpec(
    kind=TaskKind.PUSH,
    init_region=Rect(0.38, -0.18, 0.55, 0.02),
    target_region=Rect(0.21, 0.09, 0.35, 0.23),
    success_tolerance=0.02,
    max_episode_steps=150,
)

GRASP_PLACE_TASK = TaskSpec(
    kind=TaskKind.GRASP_PLACE,
    init_region=Rect(0.35, -0.22, 0.55, 0.0),
    target_region=Rect(0.20, 0.13, 0.30, 0.23),
    success_tolerance=0.045,
    max_episode_steps=180,
)

TASKS = {
    "reach": REACH_TASK,
    "push": PUSH_TASK,
    "grasp_place": GRASP_PLACE_TASK,
}


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def forward_kinematics(q: np.ndarray, params: ArmParams = DEFAULT_ARM) -> EEPose:
    """End-effector pose from joint angles (position of the gripper center)."""
    l1, l2, l3 = params.link_lengths
    c1 = q[0]
    c2 = c1 + q[1]
    c3 = c2 + q[2]
    x = params.base_position[0] + l1 * math.cos(c1) + l2 * math.cos(c2) + l3 * math.cos(c3)
    y = params.base_position[1] + l1 * math.sin(c1) + l2 * math.sin(c2) + l3 * math.sin(c3)
    return EEPose(np.array([x, y]), wrap_angle(c1 + q[1] + q[2]))


def link_points(q: np.ndarray, params: ArmParams = DEFAULT_ARM) -> np.ndarray:
    """(4, 2) array: base, elbow, wrist, gripper center."""
    l = params.link_lengths
    pts = np.empty((4, 2))
    pts[0] = params.base_position
    angle = 0.0
    for i in range(3):
        angle += q[i]
        pts[i + 1, 0] = pts[i, 0] + l[i] * math.cos(angle)
        pts[i + 1, 1] = pts[i, 1] + l[i] * math.sin(angle)
    return pts


def ee_points(q: np.ndarray, params: ArmParams = DEFAULT_ARM) -> np.ndarray:
    """Three marker points rigidly attached to the gripper, flattened to (6,).

    Order: gripper center, left fingertip, right fingertip; (x, y) pairs.
    """
    pose = forward_kinematics(q, params)
    c, s = math.cos(pose.orientation), math.sin(pose.orientation)
    rot = np.array([[c, -s], [s, c]])
    pts = pose.position[None, :] + EE_MARKER_OFFSETS @ rot.T
    return pts.reshape(-1)


def ee_points_from_pose(pose: EEPose) -> np.ndarray:
    """Marker points for an arbitrary gripper pose (used for pose targets)."""
    c, s = math.cos(pose.orientation), math.sin(pose.orientation)
    rot = np.array([[c, -s], [s, c]])
    return (pose.position[None, :] + EE_MARKER_OFFSETS @ rot.T).reshape(-1)


def wrist_point(pose: EEPose, params: ArmParams = DEFAULT_ARM) -> np.ndarray:
    """Wrist position implied by a gripper pose (pose minus the hand link)."""
    l3 = params.link_lengths[2]
    return pose.position - l3 * np.array([math.cos(pose.orientation),
                                          math.sin(pose.orientation)])


def sample_reachable_pose(rng: np.random.Generator,
                          params: ArmParams = DEFAULT_ARM) -> EEPose:
    """Random gripper pose drawn from the operational workspace.

    Samples joint angles uniformly and keeps the resulting pose when its
    wrist point lies inside WRIST_RADIUS_RANGE and the gripper center inside
    EE_RADIUS_MAX, so every returned pose is reachable by construction and
    away from fold singularities.
    """
    lo, hi = WRIST_RADIUS_RANGE
    while True:
        q = rng.uniform(-math.pi, math.pi, size=3)
        pose = forward_kinematics(q, params)
        rw = float(np.hypot(*(wrist_point(pose, params) - np.asarray(params.base_position))))
        r = float(np.hypot(*(pose.position - np.asarray(params.base_position))))
        if lo <= rw <= hi and r <= EE_RADIUS_MAX:
            return pose


def jacobian(q: np.ndarray, params: ArmParams = DEFAULT_ARM) -> np.ndarray:
    """Analytic 3x3 Jacobian mapping joint rates to (xdot, ydot, thetadot)."""
    l = params.link_lengths
    c = np.cumsum(q)
    sines = np.array([l[i] * math.sin(c[i]) for i in range(3)])
    cosines = np.array([l[i] * math.cos(c[i]) for i in range(3)])
    J = np.empty((3, 3))
    for k in range(3):
        J[0, k] = -sines[k:].sum()
        J[1, k] = cosines[k:].sum()
        J[2, k] = 1.0
    return J


# ---------------------------------------------------------------------------
# Control and dynamics
# ---------------------------------------------------------------------------

def controller_torques(joints: JointState, current: EEPose, target: EEPose,
                       params: ArmParams = DEFAULT_ARM) -> np.ndarray:
    """Jacobian-transpose torque law with viscous damping and clamping.

    tau = J^T [kp_pos * (target - current) position error,
               kp_rot * shortest angular error] - damping * qdot
    """
    e_pos = target.position - current.position
    e_rot = wrap_angle(target.orientation - current.orientation)
    wrench = np.array([params.kp_pos * e_pos[0],
                       params.kp_pos * e_pos[1],
                       params.kp_rot * e_rot])
    tau = jacobian(joints.q, params).T @ wrench - params.joint_damping * joints.qdot
    return np.clip(tau, -params.torque_limit, params.torque_limit)


def gripper_radius(world: WorldState, params: ArmParams) -> float:
    return params.gripper_radius_open if world.gripper_open else params.gripper_radius_closed


def _box_frame(p: np.ndarray, obj: ObjectState) -> np.ndarray:
    c, s = math.cos(obj.orientation), math.sin(obj.orientation)
    d = p - obj.position
    return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])


def _box_world(v: np.ndarray, obj: ObjectState) -> np.ndarray:
    c, s = math.cos(obj.orientation), math.sin(obj.orientation)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def object_boundary_distance(p: np.ndarray, obj: ObjectState) -> float:
    """Signed distance from point to the object boundary (negative inside)."""
    if obj.shape == "disc":
        return float(np.hypot(*(p - obj.position)) - obj.size[0])
    local = _box_frame(p, obj)
    h = obj.size
    d = np.abs(local) - h
    outside = np.maximum(d, 0.0)
    return float(np.hypot(*outside) + min(max(d[0], d[1]), 0.0))


def _contact_normal(p: np.ndarray, obj: ObjectState) -> np.ndarray:
    """Unit normal at the closest boundary point, pointing from object to p."""
    if obj.shape == "disc":
        d = p - obj.position
        n = np.hypot(*d)
        if n < 1e-12:
            return np.array([1.0, 0.0])
        return d / n
    local = _box_frame(p, obj)
    h = obj.size
    if abs(local[0]) > h[0] or abs(local[1]) > h[1]:
        clamped = np.clip(local, -h, h)
        d = local - clamped
        return _box_world(d / np.hypot(*d), obj)
    # Inside the box: escape along the axis of least penetration.
    gaps = h - np.abs(local)
    axis = int(np.argmin(gaps))
    n_local = np.zeros(2)
    n_local[axis] = math.copysign(1.0, local[axis]) if local[axis] != 0 else 1.0
    return _box_world(n_local, obj)


def _project_arm_out(joints: JointState, push: np.ndarray,
                     params: ArmParams) -> None:
    """Kinematically move the gripper center by ``push`` (damped least squares).

    Mutates ``joints`` in place; also removes the end-effector velocity
    component directed against the contact normal.
    """
    J = jacobian(joints.q, params)[:2]
    JJt = J @ J.T + 1e-6 * np.eye(2)
    joints.q += J.T @ np.linalg.solve(JJt, push)
    n = push / max(np.hypot(*push), 1e-12)
    v_ee = J @ joints.qdot
    vn = float(v_ee @ n)
    if vn < 0.0:
        joints.qdot += J.T @ np.linalg.solve(JJt, -vn * n)


def sim_step(world: WorldState, torques: np.ndarray, dt: float,
             params: ArmParams = DEFAULT_ARM) -> WorldState:
    """One torque-level integration step (semi-implicit Euler) plus contacts.

    Contact handling is kinematic: a penetrating movable object is projected
    out along the contact normal (the shove speed feeds the knock-over
    tracker); an immovable object projects the gripper out instead and the
    commanded spring force along the contact normal is recorded as
    ``last_contact_force``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = world.copy()
    js = w.joints
    js.qdot = js.qdot + dt * (torques - params.joint_damping * js.qdot) / params.joint_inertia
    js.q = js.q + dt * js.qdot
    w.sim_time = world.sim_time + dt

    ee = forward_kinematics(js.q, params)
    r_grip = gripper_radius(w, params)
    contact_force = 0.0
    for obj in w.objects:
        if w.held_object == obj.id:
            continue
        pen = r_grip - object_boundary_distance(ee.position, obj)
        if obj.movable:
            if pen > 1e-9:
                n = _contact_normal(ee.position, obj)
                obj.position = obj.position - n * pen
                w.max_object_speed = max(w.max_object_speed, pen / dt)
        else:
            if pen > 1e-9:
                n = _contact_normal(ee.position, obj)
                _project_arm_out(js, n * pen, params)
                ee = forward_kinematics(js.q, params)
            if pen > -1e-4:
                # Resting on or pressed against the surface: report the spring
                # force component driving the gripper into it.
                n = _contact_normal(ee.position, obj)
                press = float(n @ (ee.position - w.target.position))
                contact_force = max(contact_force, params.kp_pos * max(0.0, press))
    w.last_contact_force = contact_force

    if w.held_object is not None:
        held = w.object_by_id(w.held_object)
        c, s = math.cos(ee.orientation), math.sin(ee.orientation)
        rot = np.array([[c, -s], [s, c]])
        held.position = ee.position + rot @ w.held_offset
        held.orientation = wrap_angle(ee.orientation + w.held_angle)

    if not (np.all(np.isfinite(js.q)) and np.all(np.isfinite(js.qdot))):
        raise SimulationError("non-finite joint state; gains likely unstable")
    return w


def _try_attach(world: WorldState, params: ArmParams) -> None:
    ee = forward_kinematics(world.joints.q, params)
    best = None
    best_dist = GRASP_RANGE
    for obj in world.objects:
        if not obj.graspable:
            continue
        d = object_boundary_distance(ee.position, obj)
        if d <= best_dist:
            best, best_dist = obj, d
    if best is not None:
        world.held_object = best.id
        c, s = math.cos(ee.orientation), math.sin(ee.orientation)
        rot_inv = np.array([[c, s], [-s, c]])
        world.held_offset = rot_inv @ (best.position - ee.position)
        world.held_angle = wrap_angle(best.orientation - ee.orientation)


def env_step(world: WorldState, u: Control, params: ArmParams = DEFAULT_ARM) -> WorldState:
    """Advance one 10 Hz control step.

    The commanded twist integrates the *target* pose (not the measured one),
    so the pose error can keep growing when the gripper is obstructed; the
    gripper command is applied as a full open/close; then the 1 kHz torque
    loop runs for 0.1 s of simulated time.
    """
    w = world.copy()
    w.target = EEPose(w.target.position + CONTROL_DT * u.v,
                      wrap_angle(w.target.orientation + CONTROL_DT * u.omega))
    closing = (u.gripper == GRIPPER_CLOSE) and w.gripper_open
    w.gripper_open = (u.gripper == GRIPPER_OPEN)
    if closing and w.held_object is None:
        _try_attach(w, params)
    elif u.gripper == GRIPPER_OPEN and w.held_object is not None:
        w.held_object = None
        w.held_offset = None
        w.held_angle = 0.0
    for _ in range(SIM_SUBSTEPS):
        current = forward_kinematics(w.joints.q, params)
        tau = controller_torques(w.joints, current, w.target, params)
        w = sim_step(w, tau, SIM_DT, params)
    return w


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

def _task_objects(task: TaskSpec, rng: np.random.Generator) -> list[ObjectState]:
    pos = task.init_region.sample(rng)
    if task.kind == TaskKind.REACH:
        return [ObjectState(0, "disc", np.array([0.02]), pos,
                            graspable=True, movable=True, height_class=1)]
    if task.kind == TaskKind.PUSH:
        angle = rng.uniform(-math.pi, math.pi)
        return [ObjectState(0, "box", np.array([0.02, 0.03]), pos, orientation=angle,
                            graspable=False, movable=True, height_class=1)]
    if task.kind == TaskKind.GRASP_PLACE:
        return [ObjectState(0, "disc", np.array([0.02]), pos,
                            graspable=True, movable=True, height_class=1)]
    raise ValueError(f"unknown task kind {task.kind}")


def reset(task: TaskSpec, seed: int, params: ArmParams = DEFAULT_ARM) -> WorldState:
    """Deterministic initial state: arm at home, objects sampled from the task region."""
    rng = np.random.default_rng(seed)
    joints = JointState(HOME_Q.copy(), np.zeros(3))
    target = forward_kinematics(joints.q, params)
    return WorldState(joints=joints, target=target,
                      objects=_task_objects(task, rng))


def is_success(task: TaskSpec, world: WorldState,
               params: ArmParams = DEFAULT_ARM) -> bool:
    obj = world.objects[0]
    if task.kind == TaskKind.REACH:
        ee = forward_kinematics(world.joints.q, params)
        close_enough = float(np.hypot(*(ee.position - obj.position))) <= task.success_tolerance
        return close_enough and world.max_object_speed <= KNOCK_OVER_SPEED
    if task.kind == TaskKind.PUSH:
        return task.target_region.contains(obj.position)
    if task.kind == TaskKind.GRASP_PLACE:
        return (task.target_region.contains(obj.position)
                and world.gripper_open and world.held_object is None)
    raise ValueError(f"unknown task kind {task.kind}")
