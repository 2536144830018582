"""Deterministic top-down orthographic rasterizer.

Produces the policy's visual observation: an RGB image plus a depth channel.
Depth here is a height-class map rather than metric range: a straight-down
camera over a table sees near-constant distance, so each entity type gets a
fixed height class (table 0, target zone 0, objects 1..3, arm 4, gripper 5)
normalized to [0, 1]. That keeps the two-channel image structure while
carrying a clean segmentation signal.

Rasterization is exact and unsmoothed: a pixel is covered iff its center
lies inside the shape, so silhouettes translate rigidly with the scene and
repeated renders are bit-identical. Overlays (markers, commanded-velocity
arrow) exist for the teleoperation view only and never enter recorded
observations.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from .sim import (DEFAULT_ARM, ArmParams, EEPose, Rect, WorldState,
                  forward_kinematics, link_points, EE_MARKER_OFFSETS)

# World rectangle watched by the fixed overhead camera; covers every task
# region plus the arm base, 4:3 like the image sensor.
VIEW_RECT = Rect(-0.10, -0.30, 0.70, 0.30)

MAX_HEIGHT_CLASS = 5
ARM_HEIGHT_CLASS = 4
GRIPPER_HEIGHT_CLASS = 5

LINK_RADIUS = 0.018
BASE_RADIUS = 0.035
FINGER_DOT_RADIUS = 0.009

TABLE_COLOR = np.array([0.93, 0.92, 0.90], dtype=np.float32)
ZONE_COLOR = np.array([0.20, 0.75, 0.30], dtype=np.float32)
DISC_COLOR = np.array([0.85, 0.20, 0.15], dtype=np.float32)
BOX_COLOR = np.array([0.95, 0.65, 0.10], dtype=np.float32)
ARM_COLOR = np.array([0.35, 0.38, 0.45], dtype=np.float32)
GRIPPER_COLOR = np.array([0.10, 0.30, 0.85], dtype=np.float32)
FINGER_COLOR = np.array([0.05, 0.15, 0.45], dtype=np.float32)
ARROW_COLOR = np.array([0.95, 0.10, 0.80], dtype=np.float32)

ZONE_LINE_PX = 1.5     # outline thickness, in pixel widths
MARKER_RADIUS_PX = 1.6
ARROW_WIDTH_PX = 0.8
ARROW_SCALE = 0.4      # meters of arrow length per unit magnitude
ARROW_MAX_LEN = 0.15


@dataclass(frozen=True)
class CameraSpec:
    view_rect: Rect = VIEW_RECT
    width: int = 160
    height: int = 120

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("camera needs at least 8x8 pixels")

    @property
    def px_w(self) -> float:
        return (self.view_rect.xmax - self.view_rect.xmin) / self.width

    @property
    def px_h(self) -> float:
        return (self.view_rect.ymax - self.view_rect.ymin) / self.height


DEFAULT_CAMERA = CameraSpec()
FAST_CAMERA = CameraSpec(width=64, height=48)


@dataclass
class RenderedFrame:
    rgb: np.ndarray     # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray   # (H, W) float32 in [0, 1]

    def copy(self) -> "RenderedFrame":
        return RenderedFrame(self.rgb.copy(), self.depth.copy())


@dataclass
class Overlay:
    """Teleop-view decorations: colored world-space markers and one arrow."""

    markers: list = field(default_factory=list)   # (position (2,), color (3,))
    arrow: Optional[tuple] = None                 # (origin (2,), direction (2,), magnitude)


_GRID_CACHE: dict = {}


def _pixel_centers(camera: CameraSpec):
    """(X, Y) arrays of pixel-center world coordinates, row 0 at ymax."""
    key = (camera.view_rect, camera.width, camera.height)
    hit = _GRID_CACHE.get(key)
    if hit is not None:
        return hit
    r = camera.view_rect
    xs = r.xmin + (np.arange(camera.width) + 0.5) * camera.px_w
    ys = r.ymax - (np.arange(camera.height) + 0.5) * camera.px_h
    X, Y = np.meshgrid(xs.astype(np.float64), ys.astype(np.float64))
    _GRID_CACHE[key] = (X, Y)
    return X, Y


def world_to_pixel(p, camera: CameraSpec):
    """Fractional (row, col) of a world point; (0, 0) is the top-left pixel."""
    r = camera.view_rect
    col = (p[0] - r.xmin) / camera.px_w - 0.5
    row = (r.ymax - p[1]) / camera.px_h - 0.5
    return row, col


def _disc_mask(X, Y, center, radius):
    return (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius * radius


def _box_mask(X, Y, center, half, angle):
    c, s = math.cos(angle), math.sin(angle)
    dx = X - center[0]
    dy = Y - center[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= half[0]) & (np.abs(v) <= half[1])


def _capsule_mask(X, Y, p0, p1, radius):
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    seg2 = dx * dx + dy * dy
    if seg2 < 1e-18:
        return _disc_mask(X, Y, p0, radius)
    t = ((X - p0[0]) * dx + (Y - p0[1]) * dy) / seg2
    np.clip(t, 0.0, 1.0, out=t)
    qx = p0[0] + t * dx
    qy = p0[1] + t * dy
    return (X - qx) ** 2 + (Y - qy) ** 2 <= radius * radius


def _paint(frame: RenderedFrame, mask, color, height_class=None):
    frame.rgb[mask] = color
    if height_class is not None:
        frame.depth[mask] = height_class / MAX_HEIGHT_CLASS


def render(world: WorldState, camera: CameraSpec = DEFAULT_CAMERA,
           task_region: Optional[Rect] = None,
           params: ArmParams = DEFAULT_ARM) -> RenderedFrame:
    """Rasterize the scene. Painter's order: table, zone, objects, arm, gripper.

    ``task_region`` draws the success zone outline; pass the task's
    target_region for Push/GraspPlace scenes and leave it None for Reach.
    """
    X, Y = _pixel_centers(camera)
    H, W = camera.height, camera.width
    frame = RenderedFrame(
        rgb=np.empty((H, W, 3), dtype=np.float32),
        depth=np.zeros((H, W), dtype=np.float32),
    )
    frame.rgb[:] = TABLE_COLOR

    if task_region is not None:
        line = ZONE_LINE_PX * max(camera.px_w, camera.px_h)
        outer = _box_mask(X, Y, task_region.center,
                          ((task_region.xmax - task_region.xmin) / 2,
                           (task_region.ymax - task_region.ymin) / 2), 0.0)
        inner = _box_mask(X, Y, task_region.center,
                          (max((task_region.xmax - task_region.xmin) / 2 - line, 0.0),
                           max((task_region.ymax - task_region.ymin) / 2 - line, 0.0)), 0.0)
        _paint(frame, outer & ~inner, ZONE_COLOR, height_class=0)

    for obj in sorted(world.objects, key=lambda o: (o.height_class, o.id)):
        hc = min(max(obj.height_class, 1), 3)
        if obj.shape == "disc":
            mask = _disc_mask(X, Y, obj.position, obj.size[0])
            color = DISC_COLOR
        else:
            mask = _box_mask(X, Y, obj.position, obj.size, obj.orientation)
            color = BOX_COLOR
        _paint(frame, mask, color, height_class=hc)

    pts = link_points(world.joints.q, params)
    arm_mask = _disc_mask(X, Y, pts[0], BASE_RADIUS)
    for i in range(3):
        arm_mask |= _capsule_mask(X, Y, pts[i], pts[i + 1], LINK_RADIUS)
    _paint(frame, arm_mask, ARM_COLOR, height_class=ARM_HEIGHT_CLASS)

    ee = forward_kinematics(world.joints.q, params)
    r_grip = params.gripper_radius_open if world.gripper_open else params.gripper_radius_closed
    _paint(frame, _disc_mask(X, Y, ee.position, r_grip), GRIPPER_COLOR,
           height_class=GRIPPER_HEIGHT_CLASS)
    c, s = math.cos(ee.orientation), math.sin(ee.orientation)
    rot = np.array([[c, -s], [s, c]])
    finger_scale = 1.0 if world.gripper_open else 0.6
    for off in EE_MARKER_OFFSETS[1:]:
        p = ee.position + rot @ (off * finger_scale)
        _paint(frame, _disc_mask(X, Y, p, FINGER_DOT_RADIUS), FINGER_COLOR,
               height_class=GRIPPER_HEIGHT_CLASS)
    return frame


def render_with_overlay(world: WorldState, camera: CameraSpec,
                        overlay: Overlay,
                        task_region: Optional[Rect] = None,
                        params: ArmParams = DEFAULT_ARM) -> RenderedFrame:
    """Teleop view: render, then composite markers and the command arrow."""
    frame = render(world, camera, task_region=task_region, params=params)
    X, Y = _pixel_centers(camera)
    r_marker = MARKER_RADIUS_PX * max(camera.px_w, camera.px_h)
    for position, color in overlay.markers:
        mask = _disc_mask(X, Y, np.asarray(position, dtype=float), r_marker)
        frame.rgb[mask] = np.asarray(color, dtype=np.float32)
    if overlay.arrow is not None:
        origin, direction, magnitude = overlay.arrow
        norm = float(np.hypot(*direction))
        if magnitude > 0 and norm > 1e-12:
            d = np.asarray(direction, dtype=float) / norm
            length = min(ARROW_SCALE * magnitude, ARROW_MAX_LEN)
            tip = np.asarray(origin, dtype=float) + length * d
            width = ARROW_WIDTH_PX * max(camera.px_w, camera.px_h)
            mask = _capsule_mask(X, Y, np.asarray(origin, dtype=float), tip, width)
            mask |= _disc_mask(X, Y, tip, 2.0 * width)
            frame.rgb[mask] = ARROW_COLOR
    return frame


# ---------------------------------------------------------------------------
# PNG helpers (debugging and the teleop wire; datasets store raw floats)
# ---------------------------------------------------------------------------

def rgb_to_png_bytes(rgb: np.ndarray) -> bytes:
    """Encode an (H, W, 3) float image in [0,1] as lossless 8-bit PNG."""
    q = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_rgb(data: bytes) -> np.ndarray:
    """Decode PNG bytes back to float RGB in [0,1] (8-bit quantized)."""
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def depth_to_png_bytes(depth: np.ndarray) -> bytes:
    q = np.clip(np.rint(np.asarray(depth) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="L").save(buf, format="PNG")
    return buf.getvalue()
