"""Procedural meshes: primitives and two object categories for synthetic scenes.

Category instances share a common object frame: origin at the center of the
body's base, body axis along +z, functional side (trigger / spout) toward +x.
"""
from __future__ import annotations

import math

import numpy as np

from .geometry import RigidTransform, TriangleMesh

CATEGORIES = ("spray_bottle", "watering_can")


def box_mesh(half_extents, center=(0.0, 0.0, 0.0), pose: RigidTransform | None = None):
    hx, hy, hz = half_extents
    v = np.array(
        [[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
    ) + np.asarray(center, dtype=np.float64)
    # vertex index = 4*ix + 2*iy + iz, faces wound outward
    f = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    if pose is not None:
        v = pose.apply(v)
    return TriangleMesh(v, f)


def cylinder_mesh(radius, length, segments=24, rings=2, pose: RigidTransform | None = None, caps=True):
    """Closed cylinder along +z from z=0 to z=length."""
    ang = 2 * math.pi * np.arange(segments) / segments
    zs = np.linspace(0.0, length, rings)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    verts = [np.column_stack([ring, np.full(segments, z)]) for z in zs]
    v = np.vstack(verts)
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = a + segments
            d = b + segments
            faces += [[a, b, d], [a, d, c]]
    if caps:
        bot = len(v)
        top = bot + 1
        v = np.vstack([v, [[0, 0, 0], [0, 0, length]]])
        off = (rings - 1) * segments
        for s in range(segments):
            faces.append([bot, (s + 1) % segments, s])
            faces.append([top, off + s, off + (s + 1) % segments])
    if pose is not None:
        v = pose.apply(v)
    return TriangleMesh(v, faces)


def _segment_pose(start, direction):
    """Pose whose +z runs along ``direction`` starting at ``start``."""
    z = np.asarray(direction, dtype=np.float64)
    z = z / np.linalg.norm(z)
    helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform.from_rotation(np.column_stack([x, y, z]), start)


# categories -------------------------------------------------------------------

SPRAY_BOTTLE_DEFAULTS = dict(body_radius=0.04, body_height=0.17, neck_height=0.03, head_length=0.075, head_height=0.04)
WATERING_CAN_DEFAULTS = dict(body_radius=0.075, body_height=0.16, spout_length=0.16, spout_angle=0.75, handle_height=0.09)


def spray_bottle(body_radius=0.04, body_height=0.17, neck_height=0.03, head_length=0.075, head_height=0.04):
    body = cylinder_mesh(body_radius, body_height, segments=20, rings=4)
    neck = cylinder_mesh(0.45 * body_radius, neck_height, segments=12, pose=RigidTransform.from_translation([0, 0, body_height]))
    zt = body_height + neck_height
    head = box_mesh(
        [head_length / 2, 0.016, head_height / 2],
        center=[head_length / 2 - 0.6 * body_radius * 0.45, 0.0, zt + head_height / 2],
    )
    trigger = box_mesh([0.008, 0.008, 0.022], center=[head_length * 0.55, 0.0, zt - 0.012])
    return TriangleMesh.concatenate([body, neck, head, trigger])


def spray_bottle_grasp(body_radius=0.04, body_height=0.17, neck_height=0.03, head_length=0.075, head_height=0.04):
    """Functional grasp: hand around the neck, fingers toward the trigger (+x)."""
    zt = body_height + neck_height
    center = np.array([0.0, 0.0, zt - 0.01])
    # tool +z (approach) along +x: the hand comes from behind the bottle
    return _tool_pose(center, approach=[1.0, 0.0, 0.0], closing=[0.0, 1.0, 0.0])


def watering_can(body_radius=0.075, body_height=0.16, spout_length=0.16, spout_angle=0.75, handle_height=0.09):
    body = cylinder_mesh(body_radius, body_height, segments=24, rings=4)
    d = np.array([math.cos(spout_angle), 0.0, math.sin(spout_angle)])
    start = np.array([0.7 * body_radius, 0.0, 0.25 * body_height])
    spout = cylinder_mesh(0.012, spout_length, segments=10, pose=_segment_pose(start, d))
    handle = box_mesh([0.012, 0.012, handle_height / 2], center=[-body_radius - 0.03, 0.0, body_height - handle_height / 2])
    bar = box_mesh([0.02, 0.012, 0.01], center=[-body_radius - 0.012, 0.0, body_height - 0.01])
    return TriangleMesh.concatenate([body, spout, handle, bar])


def watering_can_grasp(body_radius=0.075, body_height=0.16, spout_length=0.16, spout_angle=0.75, handle_height=0.09):
    """Functional grasp: fingers around the rear handle, approaching from -x."""
    center = np.array([-body_radius - 0.03, 0.0, body_height - handle_height / 2])
    return _tool_pose(center, approach=[1.0, 0.0, 0.0], closing=[0.0, 1.0, 0.0])


def _tool_pose(center, approach, closing):
    z = np.asarray(approach, dtype=np.float64)
    y = np.asarray(closing, dtype=np.float64)
    x = np.cross(y, z)
    return RigidTransform.from_rotation(np.column_stack([x, y, z]), center)


GENERATORS = {
    "spray_bottle": (spray_bottle, spray_bottle_grasp, SPRAY_BOTTLE_DEFAULTS),
    "watering_can": (watering_can, watering_can_grasp, WATERING_CAN_DEFAULTS),
}


def category_instance(category, rng=None, spread=0.15, **overrides):
    """Instance mesh, its functional grasp and the parameters used.

    Each default parameter is scaled by ``1 + U(-spread, spread)`` when
    ``rng`` is given.
    """
    make, grasp, defaults = GENERATORS[category]
    params = dict(defaults)
    if rng is not None:
        for k in params:
            params[k] *= 1.0 + rng.uniform(-spread, spread)
    params.update(overrides)
    return make(**params), grasp(**params), params
