"""Clothing texture transfer: contours, cyclic DTW matching, MLS warping and atlas baking."""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt, map_coordinates
from skimage import measure

from app.schemas.mesh import Region, TubeSpec
from app.schemas.pipeline import TextureConfig
from app.schemas.render import CameraParams
from app.utils.body_mesh import (
    ArticulatedMesh,
    Mesh,
    SubMesh,
    TemplateMesh,
    pose_mesh,
    split_parts,
)
from app.utils.errors import AssetError, DegenerateGeometryError, InvalidInputError, TextureError
from app.utils.raster import (
    NEAR_PLANE,
    bilinear_sample,
    camera_center,
    rasterize_triangles,
    silhouette_mask,
    to_uint8,
    world_to_camera,
)
from app.utils.skeleton import Pose3D, forward_kinematics

logger = logging.getLogger(__name__)

UPPER_TARGETS = ("torso", "l_upper_arm", "l_forearm", "r_upper_arm", "r_forearm")
LOWER_TARGETS = ("torso", "l_thigh", "l_shin", "r_thigh", "r_shin")
EXTREMITY_REGIONS = {"head": Region.head, "hands": Region.hands, "feet": Region.feet}

STAGE_EMPTY, STAGE_DIRECT, STAGE_FRONT_BACK, STAGE_LEFT_RIGHT, STAGE_NEAREST = range(5)


@dataclass
class SegmentedClothImage:
    image: np.ndarray      # (H, W, 3) float in [0, 1]
    mask: np.ndarray       # (H, W) bool
    category: str          # "upper" | "lower"
    source: str = ""

    @property
    def rgba(self) -> np.ndarray:
        return np.concatenate([self.image, self.mask[..., None].astype(np.float64)], axis=-1)


@dataclass
class Contour:
    """Closed polyline in (x, y) pixel coordinates, positive shoelace area, equal arclength spacing."""

    points: np.ndarray
    perimeter: float

    @classmethod
    def from_points(cls, points: np.ndarray) -> "Contour":
        points = np.asarray(points, dtype=np.float64)
        closed = np.vstack([points, points[:1]])
        return cls(points, float(np.linalg.norm(np.diff(closed, axis=0), axis=1).sum()))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def scale(self) -> float:
        return float(np.linalg.norm(self.points - self.centroid, axis=1).mean())

    def normalized(self) -> np.ndarray:
        return (self.points - self.centroid) / self.scale

    def point_at(self, u: np.ndarray) -> np.ndarray:
        """Points at continuous cyclic parameters u (in index units)."""
        n = len(self.points)
        u = np.mod(np.asarray(u, dtype=np.float64), n)
        i0 = np.floor(u).astype(np.int64) % n
        i1 = (i0 + 1) % n
        t = (u - np.floor(u))[:, None]
        return (1 - t) * self.points[i0] + t * self.points[i1]


@dataclass
class Correspondence:
    """Source index i -> continuous target parameter; ``targets`` is unwrapped (offset added, no modulo)."""

    source_indices: np.ndarray
    targets: np.ndarray
    target_size: int
    offset: int
    cost: float

    @property
    def wrapped(self) -> np.ndarray:
        return np.mod(self.targets, self.target_size)

    def is_monotonic(self) -> bool:
        return bool(np.all(np.diff(self.targets) >= 0))


@dataclass
class CandidateChoice:
    index: int
    correspondence: Correspondence
    energies: List[float]


@dataclass
class BakedRegion:
    colors: np.ndarray          # atlas-sized (H, W, 3)
    stage: np.ndarray           # atlas-sized fill stage per texel
    targets: List[str]
    mask: Optional[np.ndarray] = None   # texels inside the target blocks

    def coverage(self) -> Dict[str, int]:
        names = ["empty", "direct", "front_back", "left_right", "nearest"]
        stage = self.stage if self.mask is None else self.stage[self.mask]
        return {names[k]: int((stage == k).sum()) for k in range(len(names))}


@dataclass
class TextureAtlas:
    colors: np.ndarray
    filled: np.ndarray
    labels: np.ndarray
    tubes: List[TubeSpec]
    provenance: Dict = field(default_factory=dict)

    def region_mask(self, *regions: Region) -> np.ndarray:
        return np.isin(self.labels, [int(r) for r in regions])

    def copy(self) -> "TextureAtlas":
        return replace(self, colors=self.colors.copy(), filled=self.filled.copy(),
                       provenance=json.loads(json.dumps(self.provenance)))


def extract_contour(mask: np.ndarray, n_points: int = 200, min_area_fraction: float = 0.01) -> Contour:
    """Trace the boundary of the largest mask component and resample it to equal arclength."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise InvalidInputError("mask is empty")
    labeled = measure.label(mask, connectivity=2)
    counts = np.bincount(labeled.ravel())
    counts[0] = 0
    largest = int(np.argmax(counts))
    if counts[largest] < min_area_fraction * mask.size:
        raise InvalidInputError(
            f"largest mask component covers {counts[largest]} px, below {min_area_fraction:.0%} of the image"
        )
    padded = np.pad(labeled == largest, 1).astype(np.float64)
    boundary = max(measure.find_contours(padded, 0.5), key=len) - 1.0
    if np.allclose(boundary[0], boundary[-1]):
        boundary = boundary[:-1]
    xy = np.column_stack([boundary[:, 1] + 0.5, boundary[:, 0] + 0.5])

    start = int(np.lexsort((xy[:, 0], xy[:, 1]))[0])
    xy = np.roll(xy, -start, axis=0)
    x, y = xy[:, 0], xy[:, 1]
    if np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y) < 0:
        xy = np.vstack([xy[:1], xy[:0:-1]])

    closed = np.vstack([xy, xy[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-12])
    closed = closed[keep]
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    perimeter = float(cum[-1])
    t = np.arange(n_points) * perimeter / n_points
    points = np.column_stack([np.interp(t, cum, closed[:, 0]), np.interp(t, cum, closed[:, 1])])
    return Contour(points, perimeter)


def project_part_contour(
    part: SubMesh,
    pose: Optional[Pose3D],
    camera: CameraParams,
    n_points: int = 200,
) -> Contour:
    """Silhouette contour of a mesh part, optionally re-posed, seen from the camera."""
    vertices = part.mesh.vertices
    if pose is not None:
        template = part.mesh.template if isinstance(part.mesh, ArticulatedMesh) else part.mesh
        vertices = pose_mesh(template, pose).vertices
    points_cam = world_to_camera(vertices, camera)
    if np.all(points_cam[part.vertex_indices, 2] <= NEAR_PLANE):
        raise DegenerateGeometryError("part lies entirely behind the camera")
    mask = silhouette_mask(points_cam, part.triangles, camera)
    return extract_contour(mask, n_points)


def _accumulate(cost: np.ndarray) -> np.ndarray:
    """Batched DTW accumulation along anti-diagonals; returns the (K, n + 1, m + 1) padded table."""
    k, n, m = cost.shape
    acc = np.full((k, n + 1, m + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for d in range(n + m - 1):
        i = np.arange(max(0, d - m + 1), min(d, n - 1) + 1)
        j = d - i
        best = np.minimum(np.minimum(acc[:, i, j], acc[:, i, j + 1]), acc[:, i + 1, j])
        acc[:, i + 1, j + 1] = cost[:, i, j] + best
    return acc


def _traceback(acc: np.ndarray) -> List[Tuple[int, int]]:
    """Optimal path from the end cell back to (0, 0); ties prefer diagonal, then up, then left."""
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        step = int(np.argmin([acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]]))
        if step == 0:
            i, j = i - 1, j - 1
        elif step == 1:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    return path[::-1]


def cdtw_match(source: Contour, target: Contour, offsets: int = 16) -> Correspondence:
    """Cyclic DTW between normalized contours, trying ``offsets`` evenly spaced target start points."""
    p = source.normalized()
    q = target.normalized()
    n, m = len(p), len(q)
    shifts = [int(np.floor(k * m / offsets + 0.5)) % m for k in range(offsets)]
    q_stack = np.stack([np.roll(q, -s, axis=0) for s in shifts])
    cost = ((p[None, :, None, :] - q_stack[:, None, :, :]) ** 2).sum(axis=-1)
    acc = _accumulate(cost)
    totals = acc[:, n, m]
    best = int(np.argmin(totals))

    matched = [[] for _ in range(n)]
    for i, j in _traceback(acc[best]):
        matched[i].append(j)
    u = np.array([np.mean(js) for js in matched]) + shifts[best]
    return Correspondence(np.arange(n), u, m, shifts[best], float(totals[best]))


def deformation_energy(corr: Correspondence, source: Contour, target: Contour) -> float:
    """Mean squared residual after the best 2D similarity fit of matched points."""
    z = source.points[corr.source_indices]
    w = target.point_at(corr.wrapped)
    zc = (z[:, 0] + 1j * z[:, 1])
    wc = (w[:, 0] + 1j * w[:, 1])
    zc = zc - zc.mean()
    wc = wc - wc.mean()
    denom = float(np.sum(np.abs(zc) ** 2))
    a = np.sum(wc * np.conj(zc)) / denom if denom > 0 else 0.0
    residual = wc - a * zc
    return float(np.mean(np.abs(residual) ** 2))


def select_candidate(
    cloth: Union[SegmentedClothImage, Contour],
    candidates: Sequence[Union[Contour, Tuple[Pose3D, Contour]]],
    offsets: int = 16,
    n_points: int = 200,
) -> CandidateChoice:
    """Candidate with minimal deformation energy; ties go to the lowest index."""
    if not candidates:
        raise InvalidInputError("at least one candidate is required")
    source = cloth if isinstance(cloth, Contour) else extract_contour(cloth.mask, n_points)
    best_index, best_corr, energies = 0, None, []
    for k, candidate in enumerate(candidates):
        contour = candidate if isinstance(candidate, Contour) else candidate[1]
        corr = cdtw_match(source, contour, offsets)
        energy = deformation_energy(corr, source, contour)
        energies.append(energy)
        if best_corr is None or energy < energies[best_index]:
            best_index, best_corr = k, corr
    return CandidateChoice(best_index, best_corr, energies)


def _validate_controls(p: np.ndarray) -> None:
    if len(p) < 3:
        raise InvalidInputError(f"MLS needs at least 3 control points, got {len(p)}")
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if sv[0] <= 0 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateGeometryError("MLS control points are collinear")


def mls_map(points: np.ndarray, p: np.ndarray, q: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Similarity moving-least-squares deformation of ``points``; maps every p_i exactly onto q_i."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _validate_controls(p)
    v = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    vc = v[:, 0] + 1j * v[:, 1]
    pc = p[:, 0] + 1j * p[:, 1]
    qc = q[:, 0] + 1j * q[:, 1]

    d2 = np.abs(vc[:, None] - pc[None, :]) ** 2
    hit = d2 == 0
    on_control = hit.any(axis=1)
    w = 1.0 / np.where(hit, 1.0, d2) ** alpha

    w_sum = w.sum(axis=1)
    p_star = (w @ pc) / w_sum
    q_star = (w @ qc) / w_sum
    p_hat = pc[None, :] - p_star[:, None]
    q_hat = qc[None, :] - q_star[:, None]
    a = (w * np.conj(p_hat) * q_hat).sum(axis=1) / (w * np.abs(p_hat) ** 2).sum(axis=1)
    out = a * (vc - p_star) + q_star

    if on_control.any():
        out[on_control] = qc[np.argmax(hit[on_control], axis=1)]
    return np.column_stack([out.real, out.imag])


def mls_warp(
    image: np.ndarray,
    controls: Union[np.ndarray, Sequence],
    out_size: Tuple[int, int],
    alpha: float = 1.0,
    grid_step: int = 4,
) -> np.ndarray:
    """Warp ``image`` so each control p lands on q; returns RGBA with transparent out-of-source pixels.

    The inverse map is evaluated on a coarse grid and bilinearly interpolated per pixel.
    """
    pairs = np.asarray(controls, dtype=np.float64).reshape(-1, 2, 2)
    p, q = pairs[:, 0], pairs[:, 1]
    width, height = out_size
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-1] == 3:
        image = np.concatenate([image, np.ones(image.shape[:2] + (1,))], axis=-1)

    gx = 0.5 + grid_step * np.arange(int(np.ceil((width - 1) / grid_step)) + 1)
    gy = 0.5 + grid_step * np.arange(int(np.ceil((height - 1) / grid_step)) + 1)
    nodes = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
    source = mls_map(nodes, q, p, alpha).reshape(len(gy), len(gx), 2)

    rows = np.arange(height) / grid_step
    cols = np.arange(width) / grid_step
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    src_x = map_coordinates(source[..., 0], [rr, cc], order=1, mode="nearest")
    src_y = map_coordinates(source[..., 1], [rr, cc], order=1, mode="nearest")
    return bilinear_sample(image, src_x, src_y)


def control_points(corr: Correspondence, source: Contour, target: Contour, stride: int = 5) -> np.ndarray:
    """Every ``stride``-th matched pair as (n, 2, 2) controls (cloth point, model point)."""
    idx = np.arange(0, len(corr.source_indices), stride)
    p = source.points[corr.source_indices[idx]]
    q = target.point_at(corr.wrapped[idx])
    return np.stack([p, q], axis=1)


def _tube_texels(tube: TubeSpec, vertices: np.ndarray, normals: np.ndarray):
    """Surface positions and normals at every texel of a tube block."""
    r0, c0, nr, nc = tube.block
    rows, cols = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
    gi = rows / (nr - 1) * tube.rings
    gk = cols / (nc - 1) * tube.segments
    grid_slice = slice(tube.vertex_offset, tube.vertex_offset + tube.grid_size)
    shape = (tube.rings + 1, tube.segments + 1)
    pos = np.stack([
        map_coordinates(vertices[grid_slice, d].reshape(shape), [gi, gk], order=1, mode="nearest")
        for d in range(3)
    ], axis=-1)
    nrm = np.stack([
        map_coordinates(normals[grid_slice, d].reshape(shape), [gi, gk], order=1, mode="nearest")
        for d in range(3)
    ], axis=-1)
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=-1, keepdims=True), 1e-12)
    return pos, nrm


def front_back_columns(cols: int) -> np.ndarray:
    """Column of the texel mirrored front-to-back (phi -> pi - phi)."""
    period = cols - 1
    return np.mod(period // 2 - np.arange(cols), period)


def left_right_columns(cols: int) -> np.ndarray:
    """Column of the texel mirrored left-to-right in the mirror tube (phi -> -phi)."""
    period = cols - 1
    return np.mod(-np.arange(cols), period)


def bake_texture(
    warped: np.ndarray,
    part: SubMesh,
    pose: Optional[Pose3D],
    camera: CameraParams,
    targets: Optional[Sequence[str]] = None,
    depth_tolerance: float = 0.02,
    nearest_fill: bool = False,
) -> BakedRegion:
    """Bake a warped garment image onto the atlas blocks of ``targets``.

    Fill order: visible front-facing texels, front-back mirror, left-right mirror.
    Texels still empty after mirroring raise ``TextureError`` with a coverage
    report, unless ``nearest_fill`` copies the nearest filled texel of the same tube.
    """
    mesh = part.mesh
    template = mesh.template if isinstance(mesh, ArticulatedMesh) else mesh
    if not isinstance(template, TemplateMesh):
        raise InvalidInputError("bake_texture needs a part of a template mesh")
    if pose is not None:
        mesh = pose_mesh(template, pose)
    if targets is None:
        in_part = np.zeros(len(template.vertices), dtype=bool)
        in_part[part.vertex_indices] = True
        targets = [
            t.name for t in template.tubes
            if in_part[t.vertex_offset:t.vertex_offset + t.vertex_count].any()
        ]
    tubes = {t.name: t for t in template.tubes}
    missing = [name for name in targets if name not in tubes]
    if missing:
        raise InvalidInputError(f"unknown target tubes: {missing}")

    rows, cols = template.atlas_size
    colors = np.zeros((rows, cols, 3))
    stage = np.zeros((rows, cols), dtype=np.int8)

    points_cam = world_to_camera(mesh.vertices, camera)
    depth = rasterize_triangles(points_cam, part.triangles, camera).depth
    normals = mesh.normals
    eye = camera_center(camera)
    width, height = camera.image_size

    for name in targets:
        tube = tubes[name]
        r0, c0, nr, nc = tube.block
        pos, nrm = _tube_texels(tube, mesh.vertices, normals)
        cam = world_to_camera(pos.reshape(-1, 3), camera)
        z = cam[:, 2]
        zs = np.where(z > NEAR_PLANE, z, 1.0)
        cx, cy = camera.principal
        x = camera.focal * cam[:, 0] / zs + cx
        y = camera.focal * cam[:, 1] / zs + cy
        facing = np.einsum("ij,ij->i", nrm.reshape(-1, 3), eye - pos.reshape(-1, 3)) > 0
        inside = (z > NEAR_PLANE) & (x >= 0) & (x < width) & (y >= 0) & (y < height)
        px = np.clip(np.floor(x).astype(np.int64), 0, width - 1)
        py = np.clip(np.floor(y).astype(np.int64), 0, height - 1)
        visible = inside & (z <= depth[py, px] + depth_tolerance)
        sample = bilinear_sample(warped, x, y)
        opaque = sample[:, 3] >= 0.5
        direct = (facing & visible & opaque).reshape(nr, nc)
        rgb = (sample[:, :3] / np.maximum(sample[:, 3:4], 1e-12)).reshape(nr, nc, 3)

        block = (slice(r0, r0 + nr), slice(c0, c0 + nc))
        colors[block][direct] = np.clip(rgb[direct], 0.0, 1.0)
        stage[block][direct] = STAGE_DIRECT

    for name in targets:
        tube = tubes[name]
        r0, c0, nr, nc = tube.block
        block = (slice(r0, r0 + nr), slice(c0, c0 + nc))
        src_cols = front_back_columns(nc)
        blk_stage, blk_colors = stage[block], colors[block]
        take = (blk_stage == STAGE_EMPTY) & (blk_stage[:, src_cols] == STAGE_DIRECT)
        blk_colors[take] = blk_colors[:, src_cols][take]
        blk_stage[take] = STAGE_FRONT_BACK

    for name in targets:
        tube = tubes[name]
        mirror = tubes.get(tube.mirror)
        if mirror is None or mirror.name not in targets:
            continue
        r0, c0, nr, nc = tube.block
        m0, mc0, _, _ = mirror.block
        block = (slice(r0, r0 + nr), slice(c0, c0 + nc))
        mirror_block = (slice(m0, m0 + nr), slice(mc0, mc0 + nc))
        src_cols = left_right_columns(nc)
        src_stage = stage[mirror_block][:, src_cols]
        src_colors = colors[mirror_block][:, src_cols]
        take = (stage[block] == STAGE_EMPTY) & np.isin(src_stage, (STAGE_DIRECT, STAGE_FRONT_BACK))
        colors[block][take] = src_colors[take]
        stage[block][take] = STAGE_LEFT_RIGHT

    mask = np.zeros((rows, cols), dtype=bool)
    for name in targets:
        mask[_block_slices(tubes[name])] = True
    baked = BakedRegion(colors, stage, list(targets), mask)

    unfilled = {
        name: int((stage[_block_slices(tubes[name])] == STAGE_EMPTY).sum()) for name in targets
    }
    unfilled = {name: count for name, count in unfilled.items() if count}
    empty = [name for name in targets if not (stage[_block_slices(tubes[name])] > 0).any()]
    if empty or (unfilled and not nearest_fill):
        raise TextureError(
            f"{sum(unfilled.values())} texels unfilled after mirroring in {sorted(unfilled)}",
            {"coverage": baked.coverage(), "unfilled": unfilled, "empty": empty},
        )

    if unfilled:
        logger.warning(f"Nearest-texel fill for {sum(unfilled.values())} texels in {sorted(unfilled)}")
        for name in unfilled:
            block = _block_slices(tubes[name])
            blk_stage = stage[block]
            holes = blk_stage == STAGE_EMPTY
            idx = distance_transform_edt(holes, return_distances=False, return_indices=True)
            blk_colors = colors[block]
            blk_colors[holes] = blk_colors[idx[0][holes], idx[1][holes]]
            blk_stage[holes] = STAGE_NEAREST

    coverage = baked.coverage()
    if coverage["direct"] < mask.sum():
        logger.warning(f"Baked {targets} with mirrored fill: {coverage}")
    else:
        logger.debug(f"Baked {targets}: {coverage}")
    return baked


def _block_slices(tube: TubeSpec) -> Tuple[slice, slice]:
    r0, c0, nr, nc = tube.block
    return slice(r0, r0 + nr), slice(c0, c0 + nc)


def empty_atlas(template: TemplateMesh) -> TextureAtlas:
    rows, cols = template.atlas_size
    labels = np.full((rows, cols), -1, dtype=np.int64)
    base = seam_rows(template, None, 0.0)
    for tube in template.tubes:
        r0, c0, nr, nc = tube.block
        if tube.region is None:
            r = np.arange(nr)[:, None]
            labels[r0:r0 + nr, c0:c0 + nc] = np.where(r >= base[None, :], Region.upper_cloth, Region.lower_cloth)
        else:
            labels[r0:r0 + nr, c0:c0 + nc] = int(tube.region)
    return TextureAtlas(np.zeros((rows, cols, 3)), np.zeros((rows, cols), dtype=bool), labels, list(template.tubes))


def seam_rows(template: TemplateMesh, rng: Optional[np.random.Generator], jitter: float) -> np.ndarray:
    """Per-column torso row of the waist seam, jittered by U(-jitter, jitter) x body height."""
    torso = template.tube("torso")
    _, _, nr, nc = torso.block
    y0, y1 = torso.start[1], torso.end[1]
    base = (template.waist_height - y0) / (y1 - y0) * (nr - 1)
    if rng is None or jitter <= 0:
        return np.full(nc, base)
    offsets = rng.uniform(-jitter, jitter, nc - 1) * template.height / (y1 - y0) * (nr - 1)
    offsets = np.append(offsets, offsets[0])
    return base + offsets


def combine_garments(
    template: TemplateMesh,
    upper: BakedRegion,
    lower: BakedRegion,
    rng: Optional[np.random.Generator],
    jitter: float,
) -> TextureAtlas:
    """Merge both garment bakes; on the torso the perturbed waist seam decides which one shows."""
    atlas = empty_atlas(template)
    for baked in (lower, upper):
        for name in baked.targets:
            block = _block_slices(template.tube(name))
            atlas.colors[block] = baked.colors[block]
            atlas.filled[block] = baked.stage[block] > 0
    torso = template.tube("torso")
    block = _block_slices(torso)
    seam = seam_rows(template, rng, jitter)
    r = np.arange(torso.block[2])[:, None]
    upper_rows = r >= seam[None, :]
    atlas.colors[block] = np.where(upper_rows[..., None], upper.colors[block], lower.colors[block])
    atlas.filled[block] = np.where(upper_rows, upper.stage[block] > 0, lower.stage[block] > 0)
    atlas.labels[block] = np.where(upper_rows, Region.upper_cloth, Region.lower_cloth)
    return atlas


def texture_extremities(
    atlas: TextureAtlas,
    assets: Mapping[str, Sequence[np.ndarray]],
    rng: np.random.Generator,
    tint_amplitude: float = 0.1,
) -> TextureAtlas:
    """Fill head, hands and feet from randomly chosen tiled assets.

    Each category is blended toward a random tone with weight U(0, tint_amplitude),
    so colors stay inside the convex hull of the asset and the tone.
    """
    for name in EXTREMITY_REGIONS:
        if not assets.get(name):
            raise AssetError(f"missing extremity asset category '{name}'")
    result = atlas.copy()
    chosen = {}
    for name, region in EXTREMITY_REGIONS.items():
        index = int(rng.integers(len(assets[name])))
        tone = rng.uniform(0.0, 1.0, 3)
        weight = float(rng.uniform(0.0, tint_amplitude)) if tint_amplitude > 0 else 0.0
        texture = np.asarray(assets[name][index], dtype=np.float64)[..., :3]
        for tube in result.tubes:
            if tube.region != region:
                continue
            r0, c0, nr, nc = tube.block
            reps = (int(np.ceil(nr / texture.shape[0])), int(np.ceil(nc / texture.shape[1])), 1)
            tiled = np.tile(texture, reps)[:nr, :nc]
            result.colors[r0:r0 + nr, c0:c0 + nc] = (1.0 - weight) * tiled + weight * tone
            result.filled[r0:r0 + nr, c0:c0 + nc] = True
        chosen[name] = {"asset": index, "tone": [float(t) for t in tone], "weight": weight}
    result.provenance["extremities"] = chosen
    return result


def candidate_poses(template: TemplateMesh, category: str) -> List[Pose3D]:
    """Upper: T-pose, arms 45 and 70 degrees down. Lower: legs straight, legs apart."""

    def about_z(deg):
        rad = np.radians(deg)
        c, s = np.cos(rad), np.sin(rad)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def posed(updates: Dict[int, np.ndarray]) -> Pose3D:
        local = np.tile(np.eye(3), (14, 1, 1))
        for bone, rot in updates.items():
            local[bone] = rot
        joints, _ = forward_kinematics(template.rest_joints, local)
        return Pose3D(joints)

    if category == "upper":
        return [posed({}), posed({3: about_z(-45), 6: about_z(45)}), posed({3: about_z(-70), 6: about_z(70)})]
    if category == "lower":
        return [posed({}), posed({9: about_z(15), 12: about_z(-15)})]
    raise InvalidInputError(f"unknown garment category '{category}'")


def frontal_camera(template: TemplateMesh, size: int) -> CameraParams:
    """Camera facing the body front, framing a 2.2 m box around the template."""
    distance = 4.0
    return CameraParams(
        elevation=0.0, azimuth=0.0, in_plane=0.0, distance=distance,
        focal=0.9 * size * distance / 2.2, image_size=(size, size),
        target=(0.0, template.height / 2.0, 0.0),
    )


@dataclass
class Candidate:
    pose: Pose3D
    mesh: ArticulatedMesh
    part: SubMesh
    contour: Contour


def prepare_candidates(
    template: TemplateMesh,
    category: str,
    camera: CameraParams,
    n_points: int = 200,
) -> List[Candidate]:
    prepared = []
    for pose in candidate_poses(template, category):
        mesh = pose_mesh(template, pose)
        upper, lower = split_parts(mesh)
        part = upper if category == "upper" else lower
        prepared.append(Candidate(pose, mesh, part, project_part_contour(part, None, camera, n_points)))
    return prepared


@dataclass
class GarmentTransfer:
    baked: BakedRegion
    candidate: int
    energy: float
    source: str


def transfer_garment(
    cloth: SegmentedClothImage,
    candidates: Sequence[Candidate],
    camera: CameraParams,
    config: Optional[TextureConfig] = None,
) -> GarmentTransfer:
    """Select the least-deforming candidate, warp the garment onto its silhouette and bake it."""
    config = config or TextureConfig()
    source = extract_contour(cloth.mask, config.contour_points)
    choice = select_candidate(source, [c.contour for c in candidates], config.offsets)
    chosen = candidates[choice.index]
    controls = control_points(choice.correspondence, source, chosen.contour, config.control_stride)
    warped = mls_warp(cloth.rgba, controls, camera.image_size, config.mls_alpha, config.grid_step)
    targets = UPPER_TARGETS if cloth.category == "upper" else LOWER_TARGETS
    baked = bake_texture(warped, chosen.part, None, camera, targets, nearest_fill=config.nearest_fill)
    logger.debug(
        f"Garment {cloth.source}: candidate {choice.index}, energy {choice.energies[choice.index]:.4f}"
    )
    return GarmentTransfer(baked, choice.index, choice.energies[choice.index], cloth.source)


def build_atlas(
    template: TemplateMesh,
    upper: SegmentedClothImage,
    lower: SegmentedClothImage,
    assets: Mapping[str, Sequence[np.ndarray]],
    rng: np.random.Generator,
    config: Optional[TextureConfig] = None,
    candidates: Optional[Dict[str, List[Candidate]]] = None,
) -> TextureAtlas:
    """Full body atlas: both garments, perturbed waist seam, textured extremities."""
    config = config or TextureConfig()
    camera = frontal_camera(template, config.candidate_size)
    if candidates is None:
        candidates = {
            cat: prepare_candidates(template, cat, camera, config.contour_points) for cat in ("upper", "lower")
        }
    upper_t = transfer_garment(upper, candidates["upper"], camera, config)
    lower_t = transfer_garment(lower, candidates["lower"], camera, config)
    atlas = combine_garments(template, upper_t.baked, lower_t.baked, rng, config.seam_jitter)
    atlas = texture_extremities(atlas, assets, rng, config.tint_amplitude)
    atlas.provenance.update({
        "upper": {"source": upper_t.source, "candidate": upper_t.candidate, "energy": upper_t.energy},
        "lower": {"source": lower_t.source, "candidate": lower_t.candidate, "energy": lower_t.energy},
    })
    return atlas


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def load_cloth_library(directory: Union[str, Path]) -> Dict[str, List[SegmentedClothImage]]:
    """Read ``upper/`` and ``lower/`` image + ``*_mask.png`` pairs; masks are thresholded at 128."""
    directory = Path(directory)
    library: Dict[str, List[SegmentedClothImage]] = {}
    for category in ("upper", "lower"):
        folder = directory / category
        if not folder.is_dir():
            raise AssetError(f"cloth directory lacks '{category}/': {directory}")
        items = []
        for image_path in sorted(folder.glob("*.png")):
            if image_path.stem.endswith("_mask"):
                continue
            mask_path = image_path.with_name(f"{image_path.stem}_mask.png")
            if not mask_path.exists():
                logger.warning(f"Skipping {image_path.name}: no mask file")
                continue
            with Image.open(mask_path) as m:
                mask = np.asarray(m.convert("L")) >= 128
            items.append(SegmentedClothImage(_read_rgb(image_path), mask, category, image_path.stem))
        if not items:
            raise AssetError(f"no cloth images found in {folder}")
        library[category] = items
    logger.info(f"Loaded {len(library['upper'])} upper and {len(library['lower'])} lower garments")
    return library


def load_extremity_assets(directory: Union[str, Path]) -> Dict[str, List[np.ndarray]]:
    """Read head/, hands/ and feet/ texture images."""
    directory = Path(directory)
    assets = {}
    for name in EXTREMITY_REGIONS:
        files = sorted((directory / name).glob("*.png"))
        if not files:
            raise AssetError(f"missing extremity asset category '{name}' in {directory}")
        assets[name] = [_read_rgb(f) for f in files]
    return assets


def save_atlas(atlas: TextureAtlas, path: Union[str, Path]) -> Path:
    """Atlas colors as PNG plus a JSON provenance sidecar."""
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(atlas.colors), mode="RGB").save(path)
    path.with_suffix(".json").write_text(json.dumps(atlas.provenance, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_atlas(path: Union[str, Path], template: TemplateMesh) -> TextureAtlas:
    path = Path(path).with_suffix(".png")
    if not path.exists():
        raise AssetError(f"atlas not found: {path}")
    colors = _read_rgb(path)
    if colors.shape[:2] != tuple(template.atlas_size):
        raise AssetError(f"atlas {path} has size {colors.shape[:2]}, template expects {template.atlas_size}")
    atlas = empty_atlas(template)
    atlas.colors = colors
    atlas.filled[:] = atlas.labels >= 0
    meta = path.with_suffix(".json")
    if meta.exists():
        atlas.provenance = json.loads(meta.read_text(encoding="utf-8"))
    return atlas
