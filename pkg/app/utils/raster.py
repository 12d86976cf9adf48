"""Pinhole camera math and a vectorized z-buffered triangle rasterizer.

Pixel (row j, col i) covers [i, i + 1) x [j, j + 1); samples are taken at pixel centers.
Camera frame: z along the viewing direction, x to the image right, y to the image bottom.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from app.schemas.render import CameraParams
from app.utils.errors import DegenerateGeometryError, InvalidInputError

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-6
MAX_FRAGMENTS = 2_000_000
INSIDE_TOL = -1e-9


def direction_from_angles(elevation: float, azimuth: float) -> np.ndarray:
    """Unit vector for (elevation, azimuth) in degrees; azimuth 0 is +z, 90 is +x."""
    el, az = np.radians(elevation), np.radians(azimuth)
    return np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])


def camera_center(camera: CameraParams) -> np.ndarray:
    return np.asarray(camera.target) + camera.distance * direction_from_angles(camera.elevation, camera.azimuth)


def camera_rotation(camera: CameraParams) -> np.ndarray:
    """World-to-camera rotation (rows are the camera axes in world coordinates)."""
    forward = np.asarray(camera.target) - camera_center(camera)
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    gamma = np.radians(camera.in_plane)
    x_axis = np.cos(gamma) * right + np.sin(gamma) * down
    y_axis = -np.sin(gamma) * right + np.cos(gamma) * down
    return np.vstack([x_axis, y_axis, forward])


def world_to_camera(points: np.ndarray, camera: CameraParams) -> np.ndarray:
    return (np.asarray(points) - camera_center(camera)) @ camera_rotation(camera).T


def intrinsics(camera: CameraParams) -> Tuple[float, float, float]:
    cx, cy = camera.principal
    return camera.focal, cx, cy


def project_points(points_cam: np.ndarray, camera: CameraParams) -> np.ndarray:
    """Pinhole projection of camera-frame points; every point must have z > 0."""
    points_cam = np.asarray(points_cam, dtype=np.float64)
    if np.any(points_cam[:, 2] <= 0):
        raise InvalidInputError("point at or behind the camera plane")
    f, cx, cy = intrinsics(camera)
    return np.column_stack([
        f * points_cam[:, 0] / points_cam[:, 2] + cx,
        f * points_cam[:, 1] / points_cam[:, 2] + cy,
    ])


@dataclass
class Fragments:
    """Per-pixel result of the z-test: winning triangle (-1 if empty), barycentrics, depth."""

    triangle: np.ndarray
    barycentric: np.ndarray
    depth: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.triangle >= 0


def _chunks(counts: np.ndarray):
    start = 0
    total = 0
    for t, c in enumerate(counts):
        if total and total + c > MAX_FRAGMENTS:
            yield start, t
            start, total = t, 0
        total += c
    if start < len(counts):
        yield start, len(counts)


def rasterize_triangles(
    points_cam: np.ndarray,
    triangles: np.ndarray,
    camera: CameraParams,
) -> Fragments:
    """Z-buffered coverage of camera-frame triangles with perspective-correct barycentrics.

    Triangles with a vertex closer than the near plane are dropped; winding is ignored.
    """
    width, height = camera.image_size
    triangles = np.asarray(triangles, dtype=np.int64)
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[:, 2]
    keep = np.all(z[triangles] > NEAR_PLANE, axis=1)
    tri_ids = np.flatnonzero(keep)

    triangle_map = np.full((height, width), -1, dtype=np.int64)
    bary_map = np.zeros((height, width, 3))
    depth_map = np.full((height, width), np.inf)
    if tri_ids.size == 0:
        return Fragments(triangle_map, bary_map, depth_map)

    f, cx, cy = intrinsics(camera)
    zs = np.where(z > NEAR_PLANE, z, 1.0)
    px = np.column_stack([f * points_cam[:, 0] / zs + cx, f * points_cam[:, 1] / zs + cy])

    tri = triangles[tri_ids]
    xy = px[tri]  # (T, 3, 2)
    area = (xy[:, 1, 0] - xy[:, 0, 0]) * (xy[:, 2, 1] - xy[:, 0, 1]) - \
        (xy[:, 2, 0] - xy[:, 0, 0]) * (xy[:, 1, 1] - xy[:, 0, 1])
    nondegenerate = np.abs(area) > 1e-12
    tri_ids, tri, xy, area = tri_ids[nondegenerate], tri[nondegenerate], xy[nondegenerate], area[nondegenerate]

    x0 = np.clip(np.ceil(xy[:, :, 0].min(axis=1) - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(xy[:, :, 0].max(axis=1) - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(xy[:, :, 1].min(axis=1) - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(xy[:, :, 1].max(axis=1) - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny

    pix_all, z_all, t_all, b_all = [], [], [], []
    for lo, hi in _chunks(counts):
        c = counts[lo:hi]
        total = int(c.sum())
        if total == 0:
            continue
        owner = np.repeat(np.arange(lo, hi), c)
        first = np.repeat(np.cumsum(c) - c, c)
        local = np.arange(total) - first
        pxs = x0[owner] + local % nx[owner]
        pys = y0[owner] + local // nx[owner]
        sx = pxs + 0.5
        sy = pys + 0.5

        v = xy[owner]
        w0 = ((v[:, 1, 0] - sx) * (v[:, 2, 1] - sy) - (v[:, 2, 0] - sx) * (v[:, 1, 1] - sy)) / area[owner]
        w1 = ((v[:, 2, 0] - sx) * (v[:, 0, 1] - sy) - (v[:, 0, 0] - sx) * (v[:, 2, 1] - sy)) / area[owner]
        w2 = 1.0 - w0 - w1
        inside = (w0 >= INSIDE_TOL) & (w1 >= INSIDE_TOL) & (w2 >= INSIDE_TOL)
        if not np.any(inside):
            continue
        owner, pxs, pys = owner[inside], pxs[inside], pys[inside]
        screen = np.column_stack([w0[inside], w1[inside], w2[inside]])

        inv_z = 1.0 / z[tri[owner]]
        persp = screen * inv_z
        inv_depth = persp.sum(axis=1)
        pix_all.append(pys * width + pxs)
        z_all.append(1.0 / inv_depth)
        t_all.append(tri_ids[owner])
        b_all.append(persp / inv_depth[:, None])

    if not pix_all:
        return Fragments(triangle_map, bary_map, depth_map)

    pix = np.concatenate(pix_all)
    depth = np.concatenate(z_all)
    tids = np.concatenate(t_all)
    bary = np.concatenate(b_all)

    order = np.lexsort((tids, depth, pix))
    pix_sorted = pix[order]
    winners = order[np.concatenate([[True], pix_sorted[1:] != pix_sorted[:-1]])]

    rows, cols = np.divmod(pix[winners], width)
    triangle_map[rows, cols] = tids[winners]
    bary_map[rows, cols] = bary[winners]
    depth_map[rows, cols] = depth[winners]
    return Fragments(triangle_map, bary_map, depth_map)


def silhouette_mask(
    points_cam: np.ndarray,
    triangles: np.ndarray,
    camera: CameraParams,
) -> np.ndarray:
    """Coverage mask of camera-frame triangles; raises when nothing lands in the image."""
    if np.all(np.asarray(points_cam)[:, 2] <= NEAR_PLANE):
        raise DegenerateGeometryError("geometry lies entirely behind the camera")
    mask = rasterize_triangles(points_cam, triangles, camera).mask
    if not mask.any():
        raise DegenerateGeometryError("projected extent is empty")
    return mask


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    v = np.asarray(vertices)
    tri = np.asarray(triangles)
    face = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    normals = np.zeros_like(v)
    for k in range(3):
        np.add.at(normals, tri[:, k], face)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norm > 0, norm, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Float [0, 1] -> uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, cval: float = 0.0) -> np.ndarray:
    """Sample (H, W, C) at continuous pixel coordinates (centers at +0.5)."""
    coords = [np.asarray(ys) - 0.5, np.asarray(xs) - 0.5]
    channels = [
        map_coordinates(image[..., c], coords, order=1, mode="grid-constant", cval=cval)
        for c in range(image.shape[-1])
    ]
    return np.stack(channels, axis=-1)
