"""Geometric fruit localization: depth alignment, masked back-projection,
range clustering and PCA oriented bounding boxes.

Detection masks are inputs; nothing here runs a detector.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput, KExceedsPoints, ShapeMismatch, DegenerateCluster
from .kincore import Pose, matrix_to_quat

# optical frame (x right, y down, z forward) expressed in the carrier tool frame
# (x forward, z up)
CAMERA_IN_TOOL = Pose.from_matrix(np.array([[0.0, 0.0, 1.0],
                                            [-1.0, 0.0, 0.0],
                                            [0.0, -1.0, 0.0]]))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def shape(self):
        return (self.height, self.width)

    def project(self, pts):
        """Pixel coordinates (u, v) of camera-frame points (z > 0)."""
        pts = np.atleast_2d(pts)
        return np.stack([self.fx * pts[:, 0] / pts[:, 2] + self.cx,
                         self.fy * pts[:, 1] / pts[:, 2] + self.cy], axis=1)

    def rays(self, u, v):
        """Unnormalized viewing rays (x/z, y/z, 1) through pixel coordinates."""
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "depth_scale": self.depth_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), float(d.get("depth_scale", 0.001)))


# nominal VGA sensors (depth and color differ, as on common RGB-D cameras)
DEPTH_VGA = Intrinsics(385.0, 385.0, 319.5, 239.5, 640, 480)
COLOR_VGA = Intrinsics(615.0, 615.0, 319.5, 239.5, 640, 480)
DEPTH_TO_COLOR = Pose((0.015, 0.0, 0.0))


@dataclass(frozen=True, eq=False)
class DepthFrame:
    data: np.ndarray                    # (height, width) uint16, 0 = invalid
    intrinsics: Intrinsics
    extrinsics_to_color: Pose = field(default_factory=Pose)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.intrinsics.shape:
            raise ShapeMismatch(f"depth array {data.shape} != intrinsics {self.intrinsics.shape}")
        object.__setattr__(self, "data", data.astype(np.uint16, copy=False))

    def meters(self):
        return self.data.astype(float) * self.intrinsics.depth_scale


@dataclass(frozen=True, eq=False)
class DetectionSet:
    masks: tuple

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(np.asarray(m) != 0 for m in self.masks))
        shapes = {m.shape for m in self.masks}
        if len(shapes) > 1:
            raise ShapeMismatch("all masks must share one resolution")

    @property
    def count(self):
        return len(self.masks)

    def union(self, shape=None):
        if not self.masks:
            return np.zeros(shape, bool)
        return np.logical_or.reduce(self.masks)


@dataclass(frozen=True, eq=False)
class FruitEstimate:
    centroid: np.ndarray
    orientation: np.ndarray        # quaternion (w, x, y, z) of the OBB axes
    extent: np.ndarray
    point_count: int
    mean_range: float
    degenerate: bool = False
    detection: int = -1

    @property
    def rotation(self):
        return Pose(self.centroid, self.orientation).rotation

    @property
    def pose(self):
        return Pose(self.centroid, self.orientation)

    def to_dict(self):
        return {
            "centroid": [float(x) for x in self.centroid],
            "orientation": [float(x) for x in self.orientation],
            "extent": [float(x) for x in self.extent],
            "point_count": int(self.point_count),
            "mean_range": float(self.mean_range),
            "degenerate": bool(self.degenerate),
            "detection": int(self.detection),
        }


# ---------------------------------------------------------------------------
# operations


def align_depth_to_color(depth, color_intr):
    """Warp a depth frame into the color camera (nearest-pixel forward splat, z-buffered).

    Returns a uint16 array at color resolution in the depth frame's units; 0 where
    nothing projects.
    """
    di = depth.intrinsics
    v, u = np.nonzero(depth.data)
    z = depth.data[v, u].astype(float) * di.depth_scale
    out = np.zeros(color_intr.shape, np.uint16)
    if z.size == 0:
        return out
    P = di.rays(u, v) * z[:, None]
    T = depth.extrinsics_to_color
    Pc = P @ T.rotation.T + T.position
    front = Pc[:, 2] > 0
    Pc = Pc[front]
    uv = color_intr.project(Pc)
    uc = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    vc = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    ok = (uc >= 0) & (uc < color_intr.width) & (vc >= 0) & (vc < color_intr.height)
    units = np.rint(Pc[ok, 2] / di.depth_scale)
    units = np.clip(units, 1, np.iinfo(np.uint16).max)
    zbuf = np.full(color_intr.width * color_intr.height, np.inf)
    np.minimum.at(zbuf, vc[ok] * color_intr.width + uc[ok], units)
    zbuf[~np.isfinite(zbuf)] = 0
    return zbuf.reshape(color_intr.shape).astype(np.uint16)


def backproject_masked_cloud(aligned_depth, mask, intr):
    """Camera-frame points (N, 3) for masked pixels with valid depth."""
    aligned_depth = np.asarray(aligned_depth)
    mask = np.asarray(mask) != 0
    if aligned_depth.shape != mask.shape or aligned_depth.shape != intr.shape:
        raise ShapeMismatch(f"depth {aligned_depth.shape}, mask {mask.shape}, "
                            f"intrinsics {intr.shape} must agree")
    v, u = np.nonzero(mask & (aligned_depth > 0))
    d = aligned_depth[v, u].astype(float) * intr.depth_scale
    return intr.rays(u, v) * d[:, None]


@dataclass(frozen=True, eq=False)
class RangeClusters:
    labels: np.ndarray          # (N,), -1 for discarded outliers
    centers: np.ndarray         # (k,) mean range of the kept points, ascending
    points: tuple               # k arrays of kept points

    @property
    def k(self):
        return len(self.centers)

    @property
    def n_discarded(self):
        return int(np.sum(self.labels < 0))


def _kmeans_1d(r, k, max_iter=100):
    centers = np.quantile(r, (np.arange(k) + 0.5) / k)
    labels = np.full(r.shape, -1)
    for _ in range(max_iter):
        new = np.argmin(np.abs(r[:, None] - centers[None, :]), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            sel = labels == j
            if sel.any():
                centers[j] = r[sel].mean()
    return labels, centers


def range_histogram_cluster(points, k, outlier_sigma=2.5):
    """Split points into k groups by distance from the camera.

    1D k-means on ranges seeded at the (i + 0.5)/k quantiles, followed by a
    sigma-rule discard of points far from their cluster center. Clusters are
    returned in ascending range order.
    """
    pts = np.asarray(points, float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("no points to cluster")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(pts):
        raise KExceedsPoints(f"k={k} exceeds {len(pts)} points")
    r = np.linalg.norm(pts, axis=1)
    labels, centers = _kmeans_1d(r, k)
    out = labels.copy()
    for j in range(k):
        sel = labels == j
        if not sel.any():
            continue
        sd = r[sel].std()
        far = sel & (np.abs(r - centers[j]) > outlier_sigma * sd)
        if sd > 0:
            out[far] = -1
    for j in range(k):
        sel = out == j
        if sel.any():
            centers[j] = r[sel].mean()
    order = np.argsort(centers, kind="stable")
    remap = np.empty(k, np.int64)
    remap[order] = np.arange(k)
    out = np.where(out >= 0, remap[np.maximum(out, 0)], -1)
    centers = centers[order]
    return RangeClusters(out, centers, tuple(pts[out == j] for j in range(k)))


def _fix_sign(a):
    if abs(a[2]) >= 1e-9:
        return a if a[2] > 0 else -a
    i = int(np.argmax(np.abs(a)))
    return a if a[i] > 0 else -a


def estimate_fruit_pose(cluster, strict=False):
    """Centroid, PCA oriented bounding box and extent of a point cluster.

    Axes are ordered by descending variance, made right-handed, and signed so
    each of the first two has a non-negative z component. With fewer than four
    points or a rank-deficient covariance the estimate carries the centroid
    only (identity orientation, ``degenerate`` set); ``strict`` raises instead.
    """
    pts = np.asarray(cluster, float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("empty cluster")
    c = pts.mean(axis=0)
    mean_range = float(np.linalg.norm(pts, axis=1).mean())
    X = pts - c
    degenerate = len(pts) < 4
    if not degenerate:
        w, V = np.linalg.eigh(X.T @ X / len(pts))
        degenerate = w[0] <= 1e-12 * max(w[2], 1e-300)
    if degenerate:
        if strict:
            raise DegenerateCluster(f"cluster of {len(pts)} points has rank < 3")
        span = X.max(axis=0) - X.min(axis=0)
        return FruitEstimate(c, np.array([1.0, 0, 0, 0]), span, len(pts), mean_range, True)
    a1 = _fix_sign(V[:, 2])
    a2 = _fix_sign(V[:, 1])
    a3 = np.cross(a1, a2)
    R = np.stack([a1, a2, a3], axis=1)
    local = X @ R
    extent = local.max(axis=0) - local.min(axis=0)
    return FruitEstimate(c, matrix_to_quat(R), extent, len(pts), mean_range, False)


def surface_to_center(est, radius=None):
    """Shift a visible-surface centroid to a sphere-center estimate.

    For a sphere seen under roughly uniform pixel sampling the mean visible
    depth sits 2r/3 in front of the center, so the centroid is pushed that far
    along the viewing ray. ``radius`` defaults to a quarter of the two largest
    OBB extents summed.
    """
    if radius is None:
        e = np.sort(est.extent)[::-1]
        radius = 0.25 * (e[0] + e[1])
    ray = est.centroid / max(np.linalg.norm(est.centroid), 1e-12)
    return est.centroid + (2.0 / 3.0) * radius * ray


def perceive(frame, color_intr, detections, outlier_sigma=2.5):
    """Full geometric pipeline; one FruitEstimate per detection, nearest first.

    Masked points of all detections are pooled and split into
    ``detections.count`` range clusters; each cluster is attributed to the
    detection mask that contributed most of its points.
    """
    if detections.count == 0:
        return []
    aligned = align_depth_to_color(frame, color_intr)
    union = detections.union()
    v, u = np.nonzero(union & (aligned > 0))
    pts = backproject_masked_cloud(aligned, union, color_intr)
    if len(pts) < detections.count:
        raise EmptyInput("too few valid depth pixels under the detection masks")
    clusters = range_histogram_cluster(pts, detections.count, outlier_sigma)
    owner = np.full(len(pts), -1)
    for i, m in enumerate(detections.masks):
        owner[m[v, u] & (owner < 0)] = i
    out = []
    for j in range(clusters.k):
        cl = clusters.points[j]
        if len(cl) == 0:
            continue
        sel = clusters.labels == j
        votes = np.bincount(owner[sel], minlength=detections.count)
        est = estimate_fruit_pose(cl)
        out.append(FruitEstimate(est.centroid, est.orientation, est.extent, est.point_count,
                                 est.mean_range, est.degenerate, int(np.argmax(votes))))
    return out


# ---------------------------------------------------------------------------
# file formats


def write_depth(path, frame):
    """Raw little-endian uint16 row-major data plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    path.write_bytes(frame.data.astype("<u2").tobytes())
    side = {"width": frame.intrinsics.width, "height": frame.intrinsics.height,
            "depth_scale": frame.intrinsics.depth_scale,
            "intrinsics": frame.intrinsics.to_dict(),
            "extrinsics": frame.extrinsics_to_color.to_dict()}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")


def read_depth(path, sidecar=None):
    path = Path(path)
    side = json.loads(Path(sidecar or str(path) + ".json").read_text())
    intr = dict(side["intrinsics"])
    intr.setdefault("depth_scale", side.get("depth_scale", 0.001))
    intr = Intrinsics.from_dict(intr)
    raw = np.frombuffer(path.read_bytes(), dtype="<u2")
    if raw.size != intr.width * intr.height:
        raise ShapeMismatch(f"{path} holds {raw.size} samples, expected {intr.width * intr.height}")
    return DepthFrame(raw.reshape(intr.height, intr.width).astype(np.uint16), intr,
                      Pose.from_dict(side.get("extrinsics")))


def write_pgm(path, mask):
    m = (np.asarray(mask) != 0).astype(np.uint8) * 255
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + m.tobytes())


def read_pgm(path):
    """8-bit binary PGM -> bool mask (nonzero = masked)."""
    data = Path(path).read_bytes()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while data[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j].decode("ascii"))
        i = j
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("only 8-bit PGM masks are supported")
    pix = np.frombuffer(data[i + 1:i + 1 + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ShapeMismatch(f"{path}: truncated pixel data")
    return pix.reshape(h, w) != 0
