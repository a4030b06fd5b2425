"""Ray-cast synthetic RGB-D frames of spheres and boxes.

Used as a stand-in sensor by the simulator and as an oracle by the tests:
renders a depth frame from the depth camera, detection masks from the color
camera, and supersampled visible-surface centroids.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .perception import (CAMERA_IN_TOOL, COLOR_VGA, DEPTH_TO_COLOR, DEPTH_VGA, DepthFrame,
                         DetectionSet)


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    detect: bool = True

    def transformed(self, T):
        return Sphere(T.transform_point(self.center), self.radius, self.detect)

    def corners(self):
        c = np.asarray(self.center, float)
        s = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float)
        return c + self.radius * s

    def intersect(self, d):
        """Ray parameter t (= depth, rays have unit z) of the first hit, inf on a miss."""
        c = np.asarray(self.center, float)
        a = np.einsum("ij,ij->i", d, d)
        b = d @ c
        disc = b * b - a * (c @ c - self.radius ** 2)
        t = np.full(len(d), np.inf)
        ok = disc >= 0
        t0 = (b[ok] - np.sqrt(disc[ok])) / a[ok]
        t[ok] = np.where(t0 > 0, t0, np.inf)
        return t


@dataclass(frozen=True, eq=False)
class Box:
    center: np.ndarray
    half: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    detect: bool = True

    def transformed(self, T):
        return Box(T.transform_point(self.center), self.half, T.rotation @ self.rotation, self.detect)

    def corners(self):
        s = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float)
        return np.asarray(self.center, float) + (s * np.asarray(self.half)) @ self.rotation.T

    def intersect(self, d):
        R = self.rotation
        o = -(np.asarray(self.center, float) @ R)        # camera origin in box frame
        dl = d @ R
        h = np.asarray(self.half, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / dl
            t2 = (h - o) / dl
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 0)
        return np.where(hit, tmin, np.inf)


def raycast(objects, intr, supersample=1):
    """Depth (z, inf = miss) and object-id images, optionally supersampled.

    Objects are in the camera frame. Each object is traced only inside the
    bounding rectangle of its projected corners.
    """
    s = int(supersample)
    H, W = intr.height * s, intr.width * s
    depth = np.full((H, W), np.inf)
    ids = np.full((H, W), -1, np.int64)
    for i, ob in enumerate(objects):
        cs = ob.corners()
        if np.all(cs[:, 2] <= 0):
            continue
        if np.any(cs[:, 2] <= 1e-6):
            u0, u1, v0, v1 = 0, W - 1, 0, H - 1
        else:
            uv = intr.project(cs)
            u0 = max(int(np.floor((uv[:, 0].min() + 0.5) * s)) - 1, 0)
            u1 = min(int(np.ceil((uv[:, 0].max() + 0.5) * s)) + 1, W - 1)
            v0 = max(int(np.floor((uv[:, 1].min() + 0.5) * s)) - 1, 0)
            v1 = min(int(np.ceil((uv[:, 1].max() + 0.5) * s)) + 1, H - 1)
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
        # sub-pixel centers: pixel p covers [p - 0.5, p + 0.5)
        u = (uu + 0.5) / s - 0.5
        v = (vv + 0.5) / s - 0.5
        d = intr.rays(u.ravel(), v.ravel())
        t = ob.intersect(d).reshape(uu.shape)
        win = depth[v0:v1 + 1, u0:u1 + 1]
        closer = t < win
        win[closer] = t[closer]
        ids[v0:v1 + 1, u0:u1 + 1][closer] = i
    return depth, ids


@dataclass(frozen=True, eq=False)
class SyntheticFrame:
    depth: DepthFrame
    color_intr: object
    detections: DetectionSet
    detected: tuple                  # object indices, one per mask


def render(objects, depth_intr=DEPTH_VGA, color_intr=COLOR_VGA, depth_to_color=DEPTH_TO_COLOR,
           rng=None, depth_noise=0.0):
    """Render a depth frame (depth camera) and masks (color camera).

    ``objects`` are given in the color camera frame. ``depth_noise`` adds
    Gaussian range noise (m) before quantization when ``rng`` is supplied.
    """
    to_depth = depth_to_color.inverse()
    z, _ = raycast([o.transformed(to_depth) for o in objects], depth_intr)
    if rng is not None and depth_noise > 0:
        z = z + rng.normal(0.0, depth_noise, z.shape)
    units = np.where(np.isfinite(z), np.rint(z / depth_intr.depth_scale), 0)
    units = np.clip(units, 0, np.iinfo(np.uint16).max).astype(np.uint16)
    frame = DepthFrame(units, depth_intr, depth_to_color)
    _, ids = raycast(objects, color_intr)
    detected = tuple(i for i, o in enumerate(objects) if o.detect and np.any(ids == i))
    masks = tuple(ids == i for i in detected)
    return SyntheticFrame(frame, color_intr, DetectionSet(masks), detected)


def visible_centroids(objects, color_intr=COLOR_VGA, supersample=4):
    """Mean visible surface point of each object, seen from the color camera."""
    z, ids = raycast(objects, color_intr, supersample)
    s = supersample
    H, W = ids.shape
    vv, uu = np.mgrid[0:H, 0:W]
    out = []
    for i in range(len(objects)):
        sel = ids == i
        if not sel.any():
            out.append(None)
            continue
        u = (uu[sel] + 0.5) / s - 0.5
        v = (vv[sel] + 0.5) / s - 0.5
        P = color_intr.rays(u, v) * z[sel][:, None]
        out.append(P.mean(axis=0))
    return out


def camera_pose(tool_pose, camera_in_tool=None):
    """World pose of the color camera optical frame mounted on the carrier tool."""
    return tool_pose @ (camera_in_tool or CAMERA_IN_TOOL)


def objects_in_camera(world_objects, cam_pose):
    T = cam_pose.inverse()
    return [o.transformed(T) for o in world_objects]


def world_fruit(center, radius):
    return Sphere(np.asarray(center, float), float(radius))

