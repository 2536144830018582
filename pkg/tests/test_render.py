"""Rasterizer tests: analytic coverage oracles, determinism, overlays."""

import math

import numpy as np
import pytest

from planarbc import render, sim


OFFSCREEN = render.CameraSpec(view_rect=sim.Rect(1.0, 1.0, 1.8, 1.6),
                              width=160, height=120)


def bare_world():
    joints = sim.JointState(sim.HOME_Q.copy(), np.zeros(3))
    return sim.WorldState(joints=joints,
                          target=sim.forward_kinematics(joints.q))


def test_empty_view_is_uniform_table():
    frame = render.render(bare_world(), OFFSCREEN)
    assert np.all(frame.rgb == render.TABLE_COLOR)
    assert np.all(frame.depth == 0.0)


def test_all_values_in_range_and_finite():
    world = sim.reset(sim.PUSH_TASK, seed=3)
    frame = render.render(world, render.FAST_CAMERA,
                          task_region=sim.PUSH_TASK.target_region)
    for arr in (frame.rgb, frame.depth):
        assert np.all(np.isfinite(arr))
        assert arr.min() >= 0.0 and arr.max() <= 1.0
    assert frame.rgb.shape == (48, 64, 3)
    assert frame.depth.shape == (48, 64)
    assert frame.rgb.dtype == np.float32


def test_render_deterministic():
    world = sim.reset(sim.GRASP_PLACE_TASK, seed=11)
    a = render.render(world, render.FAST_CAMERA,
                      task_region=sim.GRASP_PLACE_TASK.target_region)
    b = render.render(world, render.FAST_CAMERA,
                      task_region=sim.GRASP_PLACE_TASK.target_region)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)


def test_disc_pixel_count_matches_analytic_area():
    world = bare_world()
    radius = 0.1
    world.objects = [sim.ObjectState(0, "disc", np.array([radius]),
                                     np.array([1.4, 1.3]))]
    frame = render.render(world, OFFSCREEN)
    covered = int(np.sum(np.all(frame.rgb == render.DISC_COLOR, axis=-1)))
    px_area = OFFSCREEN.px_w * OFFSCREEN.px_h
    expected = math.pi * radius ** 2 / px_area
    perimeter_px = 2 * math.pi * radius / min(OFFSCREEN.px_w, OFFSCREEN.px_h)
    assert abs(covered - expected) <= perimeter_px


def test_box_pixel_count_matches_analytic_area():
    world = bare_world()
    half = np.array([0.08, 0.05])
    world.objects = [sim.ObjectState(0, "box", half, np.array([1.4, 1.3]),
                                     orientation=0.7)]
    frame = render.render(world, OFFSCREEN)
    covered = int(np.sum(np.all(frame.rgb == render.BOX_COLOR, axis=-1)))
    px_area = OFFSCREEN.px_w * OFFSCREEN.px_h
    expected = 4 * half[0] * half[1] / px_area
    perimeter_px = 4 * (half[0] + half[1]) / min(OFFSCREEN.px_w, OFFSCREEN.px_h)
    assert abs(covered - expected) <= perimeter_px


def test_translation_consistency():
    world = bare_world()
    radius = 0.06
    world.objects = [sim.ObjectState(0, "disc", np.array([radius]),
                                     np.array([1.35, 1.25]))]
    a = render.render(world, OFFSCREEN)
    dx_px, dy_px = 7, 4  # move right 7 px, up 4 px
    world.objects[0].position = world.objects[0].position + np.array(
        [dx_px * OFFSCREEN.px_w, dy_px * OFFSCREEN.px_h])
    b = render.render(world, OFFSCREEN)
    mask_a = np.all(a.rgb == render.DISC_COLOR, axis=-1)
    mask_b = np.all(b.rgb == render.DISC_COLOR, axis=-1)
    rolled = np.roll(np.roll(mask_a, -dy_px, axis=0), dx_px, axis=1)
    assert np.array_equal(rolled, mask_b)


def test_depth_height_classes():
    world = sim.reset(sim.REACH_TASK, seed=0)
    frame = render.render(world, render.DEFAULT_CAMERA)
    row, col = render.world_to_pixel(world.objects[0].position,
                                     render.DEFAULT_CAMERA)
    assert frame.depth[round(row), round(col)] == pytest.approx(1 / 5)
    ee = sim.forward_kinematics(world.joints.q)
    row, col = render.world_to_pixel(ee.position, render.DEFAULT_CAMERA)
    assert frame.depth[round(row), round(col)] == pytest.approx(1.0)
    # top-left corner of the view is empty table in every reset
    assert frame.depth[0, 0] == 0.0


def test_zone_outline_drawn_at_zero_height():
    world = bare_world()
    region = sim.PUSH_TASK.target_region
    frame = render.render(world, render.DEFAULT_CAMERA, task_region=region)
    # midpoint of the zone's left edge lies on the outline
    edge = np.array([region.xmin + 0.3 * render.DEFAULT_CAMERA.px_w,
                     (region.ymin + region.ymax) / 2])
    row, col = render.world_to_pixel(edge, render.DEFAULT_CAMERA)
    np.testing.assert_array_equal(frame.rgb[round(row), round(col)],
                                  render.ZONE_COLOR)
    assert frame.depth[round(row), round(col)] == 0.0
    # zone interior stays table-colored
    row, col = render.world_to_pixel(region.center, render.DEFAULT_CAMERA)
    np.testing.assert_array_equal(frame.rgb[round(row), round(col)],
                                  render.TABLE_COLOR)


def test_painter_order_arm_over_object_gripper_on_top():
    world = bare_world()
    ee = sim.forward_kinematics(world.joints.q)
    world.objects = [sim.ObjectState(0, "disc", np.array([0.06]), ee.position.copy())]
    frame = render.render(world, render.DEFAULT_CAMERA)
    row, col = render.world_to_pixel(ee.position, render.DEFAULT_CAMERA)
    # gripper sits on the disc center pixel and wins the paint order
    np.testing.assert_array_equal(frame.rgb[round(row), round(col)],
                                  render.GRIPPER_COLOR)
    assert frame.depth[round(row), round(col)] == pytest.approx(1.0)


def test_empty_overlay_matches_plain_render():
    world = sim.reset(sim.REACH_TASK, seed=5)
    plain = render.render(world, render.FAST_CAMERA)
    over = render.render_with_overlay(world, render.FAST_CAMERA, render.Overlay())
    assert np.array_equal(plain.rgb, over.rgb)
    assert np.array_equal(plain.depth, over.depth)


def test_marker_at_view_corner_colors_corner_pixel():
    world = bare_world()
    cam = render.DEFAULT_CAMERA
    r = cam.view_rect
    overlay = render.Overlay(markers=[(np.array([r.xmin, r.ymax]), (1.0, 0.0, 0.0))])
    frame = render.render_with_overlay(world, cam, overlay)
    np.testing.assert_array_equal(frame.rgb[0, 0], np.array([1, 0, 0], np.float32))
    plain = render.render(world, cam)
    np.testing.assert_array_equal(frame.rgb[-1, -1], plain.rgb[-1, -1])


def test_zero_magnitude_arrow_draws_nothing():
    world = sim.reset(sim.REACH_TASK, seed=2)
    overlay = render.Overlay(arrow=(np.array([0.3, 0.0]), np.array([1.0, 0.0]), 0.0))
    frame = render.render_with_overlay(world, render.FAST_CAMERA, overlay)
    plain = render.render(world, render.FAST_CAMERA)
    assert np.array_equal(frame.rgb, plain.rgb)


def test_nonzero_arrow_draws_pixels():
    world = bare_world()
    overlay = render.Overlay(arrow=(np.array([1.4, 1.3]), np.array([1.0, 0.0]), 0.2))
    frame = render.render_with_overlay(world, OFFSCREEN, overlay)
    assert np.any(np.all(frame.rgb == render.ARROW_COLOR, axis=-1))


def test_closed_gripper_renders_differently():
    world = sim.reset(sim.GRASP_PLACE_TASK, seed=1)
    open_frame = render.render(world, render.DEFAULT_CAMERA)
    world.gripper_open = False
    closed_frame = render.render(world, render.DEFAULT_CAMERA)
    assert not np.array_equal(open_frame.rgb, closed_frame.rgb)


def test_png_round_trip_is_exact_after_quantization():
    world = sim.reset(sim.PUSH_TASK, seed=9)
    frame = render.render(world, render.FAST_CAMERA)
    data = render.rgb_to_png_bytes(frame.rgb)
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    back = render.png_bytes_to_rgb(data)
    quantized = np.rint(frame.rgb * 255.0) / 255.0
    np.testing.assert_allclose(back, quantized, atol=1e-7)
    dpng = render.depth_to_png_bytes(frame.depth)
    assert dpng[:8] == b"\x89PNG\r\n\x1a\n"


def test_camera_validation():
    with pytest.raises(ValueError):
        render.CameraSpec(width=4, height=48)
