"""Heightfield terrain: synthesis, elevation queries, geometric rendering, collision fields.

World frame is x-east, y-north, z-up, all distances in meters. A terrain is a
regular grid of node elevations spaced ``cell_size`` apart; queries between
nodes are bilinear, so the surface is continuous and piecewise differentiable.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

ELEV_MAGIC = b"ELEV"
ELEV_VERSION = 1

# Fixed shading light, normalized (1, 1, 2). Arbitrary but deterministic; gives
# slopes distinct intensities so renders carry terrain-shape information.
DEFAULT_LIGHT = (1.0, 1.0, 2.0)


class OutOfBoundsError(ValueError):
    """Query outside the grid footprint."""


@dataclass(frozen=True)
class ElevationBand:
    """Vertical corridor [E+min_rel, E+max_rel] the vehicle must occupy."""

    min_rel: float = 5.0
    max_rel: float = 15.0

    def __post_init__(self):
        if not (0.0 <= self.min_rel < self.max_rel):
            raise ValueError(f"invalid band [{self.min_rel}, {self.max_rel}]")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: square pixels, horizontal FOV, range-limited."""

    resolution: tuple[int, int] = (64, 64)  # (W, H)
    horizontal_fov: float = math.pi / 2
    max_range: float = 40.0
    tilt: float = 0.0  # pitch offset, radians; negative pitches down

    def __post_init__(self):
        w, h = self.resolution
        if w < 8 or h < 8:
            raise ValueError(f"resolution too small: {self.resolution}")
        if not (0.0 < self.horizontal_fov < math.pi):
            raise ValueError(f"horizontal_fov out of range: {self.horizontal_fov}")
        if self.max_range <= 0.0:
            raise ValueError(f"max_range must be positive: {self.max_range}")


class ElevationGrid:
    """Regular heightfield with bilinear interpolation.

    ``heights`` has shape (height, width): rows along y, columns along x, node
    (ix, iy) at world (x0 + ix*cell, y0 + iy*cell). The queryable footprint is
    the node hull [x0, x0+(width-1)*cell] x [y0, y0+(height-1)*cell].
    """

    def __init__(self, origin: tuple[float, float], cell_size: float, heights):
        heights = np.asarray(heights, dtype=np.float32)
        if heights.ndim != 2 or heights.shape[0] < 2 or heights.shape[1] < 2:
            raise ValueError(f"heights must be at least 2x2, got {heights.shape}")
        if cell_size <= 0.0:
            raise ValueError(f"cell_size must be positive: {cell_size}")
        if not np.all(np.isfinite(heights)):
            raise ValueError("heights contain non-finite values")
        self.origin = (float(origin[0]), float(origin[1]))
        self.cell_size = float(cell_size)
        self.heights = heights

    @property
    def width(self) -> int:
        return self.heights.shape[1]

    @property
    def height(self) -> int:
        return self.heights.shape[0]

    @property
    def max_x(self) -> float:
        return self.origin[0] + (self.width - 1) * self.cell_size

    @property
    def max_y(self) -> float:
        return self.origin[1] + (self.height - 1) * self.cell_size

    def contains(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (
            (x >= self.origin[0])
            & (x <= self.max_x)
            & (y >= self.origin[1])
            & (y <= self.max_y)
        )

    def _cell_index(self, x, y):
        """Cell index and fractional offsets; index clamped to the last cell so
        the far boundary evaluates on its left/lower cell."""
        u = (np.asarray(x, dtype=np.float64) - self.origin[0]) / self.cell_size
        v = (np.asarray(y, dtype=np.float64) - self.origin[1]) / self.cell_size
        ix = np.clip(np.floor(u).astype(np.int64), 0, self.width - 2)
        iy = np.clip(np.floor(v).astype(np.int64), 0, self.height - 2)
        return ix, iy, u - ix, v - iy

    def interpolate(self, x, y):
        """Bilinear elevation at (x, y); no bounds check, inputs may be arrays."""
        ix, iy, fx, fy = self._cell_index(x, y)
        h = self.heights
        h00 = h[iy, ix].astype(np.float64)
        h01 = h[iy, ix + 1].astype(np.float64)
        h10 = h[iy + 1, ix].astype(np.float64)
        h11 = h[iy + 1, ix + 1].astype(np.float64)
        top = h00 * (1.0 - fx) + h01 * fx
        bot = h10 * (1.0 - fx) + h11 * fx
        return top * (1.0 - fy) + bot * fy


def elevation_at(grid: ElevationGrid, x, y):
    """Bilinear terrain elevation; raises OutOfBoundsError off the footprint."""
    inside = grid.contains(x, y)
    if not np.all(inside):
        raise OutOfBoundsError(f"query ({x}, {y}) outside grid footprint")
    out = grid.interpolate(x, y)
    return float(out) if np.ndim(out) == 0 else out


def elevation_gradient(grid: ElevationGrid, x, y):
    """Analytic gradient of the bilinear surface.

    On a cell edge the left/lower cell is used (one-sided convention).
    """
    inside = grid.contains(x, y)
    if not np.all(inside):
        raise OutOfBoundsError(f"query ({x}, {y}) outside grid footprint")
    ix, iy, fx, fy = grid._cell_index(x, y)
    h = grid.heights
    h00 = h[iy, ix].astype(np.float64)
    h01 = h[iy, ix + 1].astype(np.float64)
    h10 = h[iy + 1, ix].astype(np.float64)
    h11 = h[iy + 1, ix + 1].astype(np.float64)
    gx = ((h01 - h00) * (1.0 - fy) + (h11 - h10) * fy) / grid.cell_size
    gy = ((h10 - h00) * (1.0 - fx) + (h11 - h01) * fx) / grid.cell_size
    if np.ndim(gx) == 0:
        return float(gx), float(gy)
    return gx, gy


# ---------------------------------------------------------------------------
# Terrain synthesis
# ---------------------------------------------------------------------------


def _value_noise(xs, ys, lattice, scale):
    """Quintic-fade value noise sampled at world coordinates."""
    u = xs / scale
    v = ys / scale
    i = np.floor(u).astype(np.int64)
    j = np.floor(v).astype(np.int64)
    fu = u - i
    fv = v - j
    # quintic fade keeps the surface C2, so slopes stay smooth between octaves
    su = fu * fu * fu * (fu * (fu * 6.0 - 15.0) + 10.0)
    sv = fv * fv * fv * (fv * (fv * 6.0 - 15.0) + 10.0)
    a = lattice[j, i]
    b = lattice[j, i + 1]
    c = lattice[j + 1, i]
    d = lattice[j + 1, i + 1]
    return (a * (1 - su) + b * su) * (1 - sv) + (c * (1 - su) + d * su) * sv


def generate_terrain(
    seed: int, extent: float, cell_size: float, relief: float
) -> ElevationGrid:
    """Deterministic procedural terrain on [0, extent]^2 with heights in [0, relief].

    Multi-octave value noise, squared after normalization so the median drops
    below the mean: broad low corridors between smooth ridges.
    """
    if cell_size <= 0.0 or extent / cell_size < 2.0:
        raise ValueError(f"need extent/cell_size >= 2, got {extent}/{cell_size}")
    if relief <= 0.0:
        raise ValueError(f"relief must be positive: {relief}")
    n = int(round(extent / cell_size)) + 1
    rng = np.random.default_rng(seed)
    coords = np.arange(n, dtype=np.float64) * cell_size
    xs, ys = np.meshgrid(coords, coords)

    total = np.zeros((n, n), dtype=np.float64)
    amplitude = 1.0
    # broad base features keep slopes gentle enough for band-constrained
    # flight; the last octaves are sub-meter surface texture whose image-space
    # frequency gives renders a usable distance cue
    wavelength = extent / 1.5
    amplitudes = (1.0, 0.35, 0.1225, 0.0429, 0.018, 0.009)
    for amplitude in amplitudes:
        cells = int(math.ceil(extent / wavelength)) + 2
        lattice = rng.random((cells + 1, cells + 1))
        total += amplitude * _value_noise(xs, ys, lattice, wavelength)
        wavelength *= 0.5

    total -= total.min()
    peak = total.max()
    if peak > 0.0:
        total /= peak
    total = total * total * relief
    return ElevationGrid((0.0, 0.0), cell_size, total)


def grid_from_point_cloud(points, cell_size: float) -> ElevationGrid:
    """Rasterize a point cloud to a heightfield: max z per node, nearest-neighbor fill.

    Node buckets are centered on grid nodes (round to nearest). Cells no point
    maps to take the value of the closest filled cell, so the elevation
    function is total over the footprint.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("empty point cloud")
    pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    if cell_size <= 0.0:
        raise ValueError(f"cell_size must be positive: {cell_size}")

    x0, y0 = pts[:, 0].min(), pts[:, 1].min()
    nx = max(2, int(round((pts[:, 0].max() - x0) / cell_size)) + 1)
    ny = max(2, int(round((pts[:, 1].max() - y0) / cell_size)) + 1)
    ix = np.clip(np.round((pts[:, 0] - x0) / cell_size).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.round((pts[:, 1] - y0) / cell_size).astype(np.int64), 0, ny - 1)

    heights = np.full((ny, nx), -np.inf, dtype=np.float64)
    np.maximum.at(heights, (iy, ix), pts[:, 2])

    filled = np.isfinite(heights)
    while not filled.all():
        # one dilation ring per pass; fixed neighbor precedence keeps it deterministic
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            shifted = np.full_like(heights, -np.inf)
            src = np.where(filled, heights, -np.inf)
            if dy < 0:
                shifted[:-1, :] = src[1:, :]
            elif dy > 0:
                shifted[1:, :] = src[:-1, :]
            elif dx < 0:
                shifted[:, :-1] = src[:, 1:]
            else:
                shifted[:, 1:] = src[:, :-1]
            take = ~filled & np.isfinite(shifted)
            heights[take] = shifted[take]
        new_filled = np.isfinite(heights)
        if not new_filled.any() or new_filled.sum() == filled.sum():
            raise RuntimeError("nearest-neighbor fill made no progress")
        filled = new_filled
    return ElevationGrid((float(x0), float(y0)), cell_size, heights)


# ---------------------------------------------------------------------------
# Collision fields
# ---------------------------------------------------------------------------


def collision_cost(grid: ElevationGrid, p, margin: float = 5.0):
    """Quadratic falloff of danger with clearance: max(0, 1 - dist/margin)^2.

    dist is vertical clearance max(0, z - E); at or below the surface the cost
    saturates at 1. Accepts a single (x, y, z) or an (N, 3) array.
    """
    pts = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    e = elevation_at(grid, pts[:, 0], pts[:, 1])
    dist = np.maximum(0.0, pts[:, 2] - e)
    c = np.maximum(0.0, 1.0 - dist / margin) ** 2
    return float(c[0]) if np.ndim(p) == 1 else c


def terrain_penetration(grid: ElevationGrid, p):
    """Depth below the surface, max(0, E - z); zero at or above it."""
    pts = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    e = elevation_at(grid, pts[:, 0], pts[:, 1])
    pen = np.maximum(0.0, e - pts[:, 2])
    return float(pen[0]) if np.ndim(p) == 1 else pen


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def camera_rays(cam: CameraModel, yaw: float):
    """Unit ray directions, shape (H, W, 3). Pixel centers at half-integers,
    row 0 at the top of the image."""
    w, h = cam.resolution
    focal = (w / 2.0) / math.tan(cam.horizontal_fov / 2.0)
    cols = (np.arange(w) + 0.5) - w / 2.0
    rows = h / 2.0 - (np.arange(h) + 0.5)
    u, v = np.meshgrid(cols / focal, rows / focal)

    cy, sy = math.cos(yaw), math.sin(yaw)
    ct, st = math.cos(cam.tilt), math.sin(cam.tilt)
    fwd = np.array([cy * ct, sy * ct, st])
    right = np.array([sy, -cy, 0.0])
    up = np.cross(right, fwd)

    dirs = fwd[None, None, :] + u[..., None] * right[None, None, :] + v[..., None] * up[None, None, :]
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    return dirs


def _march(grid: ElevationGrid, origin, dirs, max_range: float):
    """Ray-march the bilinear surface. Returns (range, hit_mask) flattened.

    Fixed step of cell_size/2, then one bisection to halve the bracket and a
    final linear interpolation on the height residual inside it.
    """
    flat = dirs.reshape(-1, 3)
    n = flat.shape[0]
    step = grid.cell_size / 2.0
    depth = np.full(n, max_range, dtype=np.float64)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    t_prev = np.zeros(n, dtype=np.float64)
    res_prev = np.full(n, np.inf, dtype=np.float64)

    t = step
    while t <= max_range + 1e-9 and active.size:
        p = origin[None, :] + t * flat[active]
        inside = grid.contains(p[:, 0], p[:, 1])
        # leaving the footprint is a miss for that ray
        res = np.full(active.size, np.inf)
        res[inside] = p[inside, 2] - grid.interpolate(p[inside, 0], p[inside, 1])
        below = inside & (res <= 0.0)
        if below.any():
            idx = active[below]
            t_lo = t_prev[idx]
            t_hi = np.full(idx.size, t)
            r_lo = res_prev[idx]
            r_hi = res[below]
            # one bisection step
            t_mid = 0.5 * (t_lo + t_hi)
            pm = origin[None, :] + t_mid[:, None] * flat[idx]
            r_mid = pm[:, 2] - grid.interpolate(pm[:, 0], pm[:, 1])
            lo_side = r_mid > 0.0
            t_lo = np.where(lo_side, t_mid, t_lo)
            r_lo = np.where(lo_side, r_mid, r_lo)
            t_hi = np.where(lo_side, t_hi, t_mid)
            r_hi = np.where(lo_side, r_hi, r_mid)
            # linear interpolation on the residual closes the bracket
            denom = r_lo - r_hi
            safe = np.where(np.isfinite(denom) & (np.abs(denom) > 1e-12), denom, 1.0)
            frac = np.where(np.isfinite(denom) & (np.abs(denom) > 1e-12), r_lo / safe, 0.5)
            frac = np.clip(frac, 0.0, 1.0)
            t_star = t_lo + frac * (t_hi - t_lo)
            # first march step has no valid bracket start
            t_star = np.where(np.isfinite(r_lo), t_star, t_hi)
            depth[idx] = np.minimum(t_star, max_range)
            hit[idx] = True
        dead = below | ~inside
        t_prev[active] = t
        res_prev[active] = res
        active = active[~dead]
        t += step
    return depth, hit


def render_depth(grid: ElevationGrid, position, yaw: float, cam: CameraModel):
    """Per-pixel range image of the terrain from a yaw+tilt camera pose.

    Misses (sky, off-map) read max_range. Raises if the camera is outside the
    footprint or at/below the surface.
    """
    position = np.asarray(position, dtype=np.float64)
    _check_camera(grid, position)
    dirs = camera_rays(cam, yaw)
    depth, _ = _march(grid, position, dirs, cam.max_range)
    w, h = cam.resolution
    return depth.reshape(h, w).astype(np.float32)


def render_shaded(grid: ElevationGrid, position, yaw: float, cam: CameraModel, light=DEFAULT_LIGHT):
    """Lambert-shaded intensity image in [0, 1]; misses are 0."""
    position = np.asarray(position, dtype=np.float64)
    _check_camera(grid, position)
    dirs = camera_rays(cam, yaw)
    depth, hit = _march(grid, position, dirs, cam.max_range)
    out = np.zeros(depth.shape, dtype=np.float64)
    if hit.any():
        flat = dirs.reshape(-1, 3)[hit]
        p = position[None, :] + depth[hit, None] * flat
        x = np.clip(p[:, 0], grid.origin[0], grid.max_x)
        y = np.clip(p[:, 1], grid.origin[1], grid.max_y)
        gx, gy = elevation_gradient(grid, x, y)
        normal = np.stack([-np.asarray(gx), -np.asarray(gy), np.ones_like(x)], axis=1)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        lv = np.asarray(light, dtype=np.float64)
        lv /= np.linalg.norm(lv)
        out[hit] = np.clip(normal @ lv, 0.0, 1.0)
    w, h = cam.resolution
    return out.reshape(h, w).astype(np.float32)


def _check_camera(grid: ElevationGrid, position):
    if not bool(np.all(grid.contains(position[0], position[1]))):
        raise OutOfBoundsError(f"camera ({position[0]}, {position[1]}) outside grid")
    e = grid.interpolate(position[0], position[1])
    if position[2] <= e:
        raise ValueError(f"camera at z={position[2]:.3f} is below terrain ({e:.3f})")


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def save_elevation(grid: ElevationGrid, path):
    """Little-endian ELEV binary: magic, u32 version, f64 origin x2, f64 cell,
    u32 width, u32 height, row-major f32 heights."""
    with open(path, "wb") as fh:
        fh.write(ELEV_MAGIC)
        fh.write(struct.pack("<I", ELEV_VERSION))
        fh.write(struct.pack("<ddd", grid.origin[0], grid.origin[1], grid.cell_size))
        fh.write(struct.pack("<II", grid.width, grid.height))
        fh.write(grid.heights.astype("<f4").tobytes())


def load_elevation(path) -> ElevationGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ELEV_MAGIC:
            raise ValueError(f"not an elevation file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != ELEV_VERSION:
            raise ValueError(f"unsupported elevation file version {version}")
        x0, y0, cell = struct.unpack("<ddd", fh.read(24))
        w, h = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * w * h), dtype="<f4").reshape(h, w)
    return ElevationGrid((x0, y0), cell, data)


def save_xyz(points, path):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_xyz(path):
    pts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x, y, z = line.split()[:3]
            pts.append((float(x), float(y), float(z)))
    return np.asarray(pts, dtype=np.float64)


def save_ply(points, path, comment: str = ""):
    """ASCII PLY with x, y, z vertex properties."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        if comment:
            fh.write(f"comment {comment}\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_ply(path):
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        count = None
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line == "end_header":
                break
        if count is None:
            raise ValueError("PLY header missing vertex element")
        pts = []
        for _ in range(count):
            parts = fh.readline().split()
            pts.append((float(parts[0]), float(parts[1]), float(parts[2])))
    return np.asarray(pts, dtype=np.float64)


def grid_to_points(grid: ElevationGrid):
    """Node positions as an (N, 3) cloud, row-major."""
    xs = grid.origin[0] + np.arange(grid.width) * grid.cell_size
    ys = grid.origin[1] + np.arange(grid.height) * grid.cell_size
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), grid.heights.astype(np.float64).ravel()], axis=1)


def write_pgm(image, path, scale: float):
    """8-bit binary PGM for debugging; values divided by scale then mapped to 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export expects a 2-D image")
    data = np.clip(img / scale, 0.0, 1.0)
    data = np.round(data * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
