"""Procedural voxel scenes and the orthographic multi-view renderer.

The renderer is affine in the density grid: pixel = 1 - mean of trilinear
density samples along the ray.  That mean is exposed as a sparse matrix
(`render_operator`) so the reconstruction module gets the exact adjoint for
free and rendering and reconstruction share one code path.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DimensionMismatch, SizeTooLarge
from .imgproc import Image
from .rng import generator

CANONICAL_AZIMUTHS_DEG = (0.0, 90.0, 180.0, 270.0)
CANONICAL_ELEVATION_DEG = 20.0
DEFAULT_SCENE_RESOLUTION = 16
DEFAULT_VIEW_RES = 32

_OCCUPANCY_MIN = 0.02
_OCCUPANCY_MAX = 0.60
_ASYMMETRY_RES = 16  # cheap render used by the generation-time distinctness check
_MAX_DRAWS = 1000

PromptId = int


@dataclass(frozen=True)
class CameraPose:
    """Orbit pose; azimuth wraps into [0, 360), elevation clamps into [-90, 90].

    Wrapping happens at construction so that trig below sees one canonical
    angle per pose and equal poses render bit-identically.
    """

    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self) -> None:
        az = float(self.azimuth_deg) % 360.0
        el = min(max(float(self.elevation_deg), -90.0), 90.0)
        object.__setattr__(self, "azimuth_deg", az)
        object.__setattr__(self, "elevation_deg", el)


@dataclass(frozen=True)
class ViewRig:
    """Exactly four poses plus the shared view resolution."""

    poses: tuple[CameraPose, CameraPose, CameraPose, CameraPose]
    view_res: int

    def __post_init__(self) -> None:
        if len(self.poses) != 4:
            raise DimensionMismatch(f"rig needs exactly 4 poses, got {len(self.poses)}")
        if self.view_res < 16 or self.view_res % 2 != 0:
            raise DimensionMismatch(f"view_res must be even and >= 16, got {self.view_res}")
        object.__setattr__(self, "poses", tuple(self.poses))


def canonical_rig(view_res: int = DEFAULT_VIEW_RES) -> ViewRig:
    """Four azimuths 90 degrees apart at the canonical elevation."""
    poses = tuple(CameraPose(az, CANONICAL_ELEVATION_DEG) for az in CANONICAL_AZIMUTHS_DEG)
    return ViewRig(poses=poses, view_res=view_res)


@dataclass(frozen=True, eq=False)
class VoxelScene:
    """Cubic density grid in [0, 1], indexed [z, y, x] (z slowest)."""

    density: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.density, dtype=np.float64)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise DimensionMismatch(f"density must be a cube, got shape {arr.shape}")
        if arr.shape[0] < 4:
            raise DimensionMismatch(f"resolution must be >= 4, got {arr.shape[0]}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("densities must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "density", arr)

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    def occupancy(self) -> float:
        return float(np.count_nonzero(self.density) / self.density.size)


# --------------------------------------------------------------------------
# Rendering


def _rotation(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Maps screen-space sample points into grid space (inverse of the grid rotation)."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    ca, sa = math.cos(az), math.sin(az)
    ce, se = math.cos(el), math.sin(el)
    rot_y = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    return rot_y @ rot_x


def _single_view_matrix(pose: CameraPose, view_res: int, resolution: int) -> sparse.csr_matrix:
    v, r = view_res, resolution
    # Sample positions in continuous voxel-index units; voxel centers sit on
    # integers, so at view_res == resolution and zero rotation rays hit voxel
    # centers exactly and the rendered mean is exact.
    px = (np.arange(v) + 0.5) * (r / v) - 0.5                # x index per column
    py = (r - 0.5) - (np.arange(v) + 0.5) * (r / v)          # y index per row, top row = +y
    pz = np.arange(r, dtype=np.float64)                      # depth samples at voxel centers
    xs, ys, zs = np.meshgrid(px, py, pz, indexing="xy")      # each (v, v, r)
    center = (r - 1) / 2.0
    delta = np.stack([xs.ravel() - center, ys.ravel() - center, zs.ravel() - center], axis=0)
    u = _rotation(pose.azimuth_deg, pose.elevation_deg) @ delta + center
    ray_index = np.repeat(np.arange(v * v), r)

    base = np.floor(u).astype(np.int64)
    frac = u - base
    rows_out = []
    cols_out = []
    weights = []
    for dx in (0, 1):
        wx = frac[0] if dx else 1.0 - frac[0]
        ix = base[0] + dx
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            iy = base[1] + dy
            for dz in (0, 1):
                wz = frac[2] if dz else 1.0 - frac[2]
                iz = base[2] + dz
                w = wx * wy * wz / r  # mean over the r depth samples
                inside = ((0 <= ix) & (ix < r) & (0 <= iy) & (iy < r)
                          & (0 <= iz) & (iz < r) & (w != 0.0))
                rows_out.append(ray_index[inside])
                cols_out.append((iz[inside] * r + iy[inside]) * r + ix[inside])
                weights.append(w[inside])
    mat = sparse.coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(v * v, r * r * r),
    )
    return mat.tocsr()


@lru_cache(maxsize=64)
def _cached_operator(pose_key: tuple[tuple[float, float], ...], view_res: int,
                     resolution: int) -> sparse.csr_matrix:
    mats = [_single_view_matrix(CameraPose(az, el), view_res, resolution)
            for az, el in pose_key]
    return sparse.vstack(mats, format="csr")


def render_operator(poses: tuple[CameraPose, ...], view_res: int,
                    resolution: int) -> sparse.csr_matrix:
    """Sparse matrix taking a flat density grid to stacked foreground images.

    Row p*view_res^2 + i*view_res + j is the mean trilinear sampling weight
    vector of the ray through pixel (i, j) of pose p; the rendered pixel is
    1 minus that row's dot product with the density.
    """
    key = tuple((p.azimuth_deg, p.elevation_deg) for p in poses)
    return _cached_operator(key, view_res, resolution)


def render_view(scene: VoxelScene, pose: CameraPose, view_res: int = DEFAULT_VIEW_RES) -> Image:
    """Orthographic emission render: white background darkened by density."""
    if view_res < 16 or view_res % 2 != 0:
        raise DimensionMismatch(f"view_res must be even and >= 16, got {view_res}")
    mat = render_operator((pose,), view_res, scene.resolution)
    fg = mat @ scene.density.ravel()
    return Image(np.clip(1.0 - fg.reshape(view_res, view_res), 0.0, 1.0))


def tile_views(views: list[Image] | tuple[Image, ...]) -> Image:
    """2x2 tile; order top-left, top-right, bottom-left, bottom-right."""
    if len(views) != 4:
        raise DimensionMismatch(f"need exactly 4 views, got {len(views)}")
    shapes = {v.data.shape for v in views}
    if len(shapes) != 1:
        raise DimensionMismatch(f"views disagree in shape: {sorted(shapes)}")
    top = np.hstack([views[0].data, views[1].data])
    bottom = np.hstack([views[2].data, views[3].data])
    return Image(np.vstack([top, bottom]))


def untile_views(tile: Image) -> tuple[Image, Image, Image, Image]:
    """Inverse of tile_views; exact slicing, no resampling."""
    if tile.height % 2 != 0 or tile.width % 2 != 0:
        raise DimensionMismatch(f"tile dimensions must be even, got {tile.height}x{tile.width}")
    h2, w2 = tile.height // 2, tile.width // 2
    d = tile.data
    return (Image(d[:h2, :w2]), Image(d[:h2, w2:]),
            Image(d[h2:, :w2]), Image(d[h2:, w2:]))


def render_multiview(scene: VoxelScene, rig: ViewRig) -> tuple[tuple[Image, ...], Image]:
    """All four rig views and their 2x2 tile."""
    views = tuple(render_view(scene, pose, rig.view_res) for pose in rig.poses)
    return views, tile_views(views)


# --------------------------------------------------------------------------
# Scene generation

_PRIM_KINDS = ("box", "sphere", "cylinder")


def _draw_primitives(prompt: PromptId, attempt: int) -> list[dict]:
    rng = generator(prompt, "scene", attempt)
    count = int(rng.integers(1, 5))
    prims = []
    for _ in range(count):
        kind = _PRIM_KINDS[int(rng.integers(0, len(_PRIM_KINDS)))]
        prim = {
            "kind": kind,
            "center": rng.uniform(-0.45, 0.45, size=3),
            "intensity": float(rng.uniform(0.3, 1.0)),
        }
        if kind == "box":
            prim["half"] = rng.uniform(0.12, 0.40, size=3)
        elif kind == "sphere":
            prim["radius"] = float(rng.uniform(0.15, 0.40))
        else:
            prim["axis"] = int(rng.integers(0, 3))
            prim["radius"] = float(rng.uniform(0.12, 0.35))
            prim["half_len"] = float(rng.uniform(0.15, 0.45))
        prims.append(prim)
    return prims


def _rasterize(prims: list[dict], resolution: int, scale: float) -> np.ndarray:
    centers = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    gz, gy, gx = np.meshgrid(centers, centers, centers, indexing="ij")
    density = np.zeros((resolution, resolution, resolution), dtype=np.float64)
    coords = (gx, gy, gz)
    for prim in prims:
        cx, cy, cz = prim["center"] * scale
        dx, dy, dz = coords[0] - cx, coords[1] - cy, coords[2] - cz
        if prim["kind"] == "box":
            hx, hy, hz = prim["half"] * scale
            mask = (np.abs(dx) <= hx) & (np.abs(dy) <= hy) & (np.abs(dz) <= hz)
        elif prim["kind"] == "sphere":
            mask = dx * dx + dy * dy + dz * dz <= (prim["radius"] * scale) ** 2
        else:
            rad = prim["radius"] * scale
            half_len = prim["half_len"] * scale
            deltas = (dx, dy, dz)
            axial = deltas[prim["axis"]]
            others = [d for i, d in enumerate(deltas) if i != prim["axis"]]
            mask = ((others[0] ** 2 + others[1] ** 2 <= rad * rad)
                    & (np.abs(axial) <= half_len))
        density = np.maximum(density, np.where(mask, prim["intensity"], 0.0))
    return density


def _views_pairwise_distinct(density: np.ndarray) -> bool:
    scene = VoxelScene(density)
    views = [render_view(scene, CameraPose(az, CANONICAL_ELEVATION_DEG), _ASYMMETRY_RES)
             for az in CANONICAL_AZIMUTHS_DEG]
    for i in range(4):
        for j in range(i + 1, 4):
            if float(np.abs(views[i].data - views[j].data).mean()) <= 1e-6:
                return False
    return True


def _accepted_draw(prompt: PromptId, resolution: int) -> list[dict]:
    if prompt < 0:
        raise ValueError(f"prompt ids are non-negative, got {prompt}")
    for attempt in range(_MAX_DRAWS):
        prims = _draw_primitives(prompt, attempt)
        density = _rasterize(prims, resolution, scale=1.0)
        occ = np.count_nonzero(density) / density.size
        if not _OCCUPANCY_MIN <= occ <= _OCCUPANCY_MAX:
            continue
        if not _views_pairwise_distinct(density):
            continue
        return prims
    raise RuntimeError(f"no acceptable scene for prompt {prompt} in {_MAX_DRAWS} draws")


def generate_scene(prompt: PromptId, resolution: int = DEFAULT_SCENE_RESOLUTION) -> VoxelScene:
    """Deterministic union of 1-4 solid primitives keyed by the prompt id.

    Rejection sampling enforces occupancy in [2%, 60%] and pairwise-distinct
    canonical views, so downstream consistency checks never see a symmetric
    or empty scene.  Same prompt and resolution always yield the same scene.
    """
    prims = _accepted_draw(prompt, resolution)
    return VoxelScene(_rasterize(prims, resolution, scale=1.0))


def generate_scene_scaled(prompt: PromptId, resolution: int = DEFAULT_SCENE_RESOLUTION,
                          scale: float = 0.5) -> VoxelScene:
    """The same accepted primitive draw as generate_scene, shrunk about the center.

    Used to build shrunken-object pairs: the draw (and its rejection loop) is
    evaluated at scale 1, then re-rasterized at `scale`, so the pair differs
    only in object extent.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    prims = _accepted_draw(prompt, resolution)
    return VoxelScene(_rasterize(prims, resolution, scale=scale))


# --------------------------------------------------------------------------
# Distortions

def patch_distort(img: Image, size: int, seed: int) -> Image:
    """Replace a centered size x size patch with a 50/50 blend of smoothed noise.

    size 0 returns the input unchanged.  The noise field is drawn once at
    full image size (keyed by seed and image shape) and the centered window
    is cut from it, so growing the patch extends the same corruption
    outward instead of redrawing it; distortion levels nest.
    """
    if size < 0:
        raise ValueError(f"size must be >= 0, got {size}")
    if size == 0:
        return img
    if size > min(img.height, img.width):
        raise SizeTooLarge(f"patch {size} exceeds image {img.width}x{img.height}")
    rng = generator(seed, "patch", img.height, img.width)
    field = rng.uniform(0.0, 1.0, size=(img.height, img.width))
    for _ in range(2):  # two 3x3 box-blur passes with replicated edges
        padded = np.pad(field, 1, mode="edge")
        field = sum(padded[dy:dy + img.height, dx:dx + img.width]
                    for dy in range(3) for dx in range(3)) / 9.0
    y0 = (img.height - size) // 2
    x0 = (img.width - size) // 2
    window = field[y0:y0 + size, x0:x0 + size]
    out = img.data.copy()
    out[y0:y0 + size, x0:x0 + size] = 0.5 * out[y0:y0 + size, x0:x0 + size] + 0.5 * window
    return Image(np.clip(out, 0.0, 1.0))


def rotation_distort(scene: VoxelScene, pose: CameraPose, delta_az_deg: float,
                     delta_el_deg: float, view_res: int = DEFAULT_VIEW_RES) -> Image:
    """Render from a slightly rotated pose while keeping the original pose label."""
    shifted = CameraPose(pose.azimuth_deg + delta_az_deg, pose.elevation_deg + delta_el_deg)
    return render_view(scene, shifted, view_res)


# --------------------------------------------------------------------------
# Serialization

_SCENE_MAGIC = b"VOXS"


def save_scene(scene: VoxelScene, path: str | Path) -> None:
    """Raw scene format: magic "VOXS", u32 LE resolution, f64 LE densities (z slowest)."""
    with open(path, "wb") as fh:
        fh.write(_SCENE_MAGIC)
        fh.write(struct.pack("<I", scene.resolution))
        fh.write(scene.density.astype("<f8").tobytes(order="C"))


def load_scene(path: str | Path) -> VoxelScene:
    raw = Path(path).read_bytes()
    if raw[:4] != _SCENE_MAGIC:
        raise DimensionMismatch(f"bad scene magic {raw[:4]!r}")
    resolution = struct.unpack_from("<I", raw, 4)[0]
    expected = 8 + 8 * resolution ** 3
    if len(raw) != expected:
        raise DimensionMismatch(f"scene payload is {len(raw)} bytes, expected {expected}")
    density = np.frombuffer(raw, dtype="<f8", offset=8)
    return VoxelScene(density.reshape(resolution, resolution, resolution))
