"""Synthetic tactile imprints.

Two renderers share one photometric model: intensity is the gel indentation
depth divided by ``FULL_SCALE_DEPTH``, smoothed by a 1 px Gaussian, perturbed by
additive noise and clamped to [0, 1].

* Grip images show the thread squeezed between the finger gels as a line.
* Eyelet images show the needle pressed into the gel behind it (a rim around a
  distinct hole region) plus, when the tip pokes the gel, a round bump.

Pixel coordinates are ``(row, col)`` with row 0 at the top. The sensor plane
uses ``x`` to the right and ``y`` up, centred on the image. Eyelet sensors can
carry radial lens distortion: a pixel at undistorted radius ``r`` images the
gel point at radius ``r (1 + k r^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import dlo
from .geometry import Pose

FULL_SCALE_DEPTH = 2e-3
GEL_MODULUS = 0.123e6
#: Depth at which the gripper squeezes the thread into the finger gels (m).
GRIP_DEPTH = 2e-3
HOLE_LEVEL = 0.15
RIM_LEVEL = 0.4
#: Bump radius grows by this fraction of the indentation depth.
BUMP_SPREAD = 0.15
#: Prefactor of the indentation force model.
FORCE_COEFF = 0.25
BLUR_SIGMA = 1.0
DEFAULT_RESOLUTION = (400, 300)
DEFAULT_FOV = (0.020, 0.015)
#: Radial distortion of the eyelet camera (1/m^2).
EYELET_DISTORTION = 5.0e3


@dataclass(frozen=True)
class SensorSpec:
    width_px: int = DEFAULT_RESOLUTION[0]
    height_px: int = DEFAULT_RESOLUTION[1]
    fov_u: float = DEFAULT_FOV[0]
    fov_v: float = DEFAULT_FOV[1]
    gel_young_modulus: float = GEL_MODULUS
    noise_sigma: float = 0.01
    distortion: float = 0.0

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        su, sv = self.fov_u / self.width_px, self.fov_v / self.height_px
        if abs(su - sv) > 0.01 * max(su, sv):
            raise ValueError("pixel scale must agree across axes within 1%")
        if self.distortion < 0 or self.noise_sigma < 0:
            raise ValueError("distortion and noise_sigma must be non-negative")

    @property
    def mm_per_px(self) -> float:
        """Pixel pitch; despite the name it is stored in metres."""
        return self.fov_u / self.width_px

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    @property
    def diagonal_px(self) -> float:
        return math.hypot(self.width_px, self.height_px)


def grip_sensor(resolution=DEFAULT_RESOLUTION, noise_sigma: float = 0.01) -> SensorSpec:
    w, h = resolution
    return SensorSpec(w, h, noise_sigma=noise_sigma)


def eyelet_sensor(resolution=DEFAULT_RESOLUTION, noise_sigma: float = 0.01, distortion: float = EYELET_DISTORTION) -> SensorSpec:
    w, h = resolution
    return SensorSpec(w, h, noise_sigma=noise_sigma, distortion=distortion)


@dataclass
class TactileImage:
    intensities: np.ndarray
    mm_per_px: float
    frame: Pose
    distortion: float = 0.0

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        if self.intensities.ndim != 2:
            raise ValueError("intensities must be a 2-D grid")
        if not self.mm_per_px > 0:
            raise ValueError("mm_per_px must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensities.shape

    @property
    def diagonal_px(self) -> float:
        h, w = self.shape
        return math.hypot(w, h)


# --- pixel <-> plane mappings -------------------------------------------------

def _centre(shape) -> tuple[float, float]:
    h, w = shape
    return (h - 1) / 2.0, (w - 1) / 2.0


@lru_cache(maxsize=16)
def _grid(shape, pitch: float, k: float):
    cr, cc = _centre(shape)
    rows, cols = np.indices(shape, dtype=float)
    x, y = (cols - cc) * pitch, (cr - rows) * pitch
    u, v = distort(x, y, k)
    for a in (x, y, u, v):
        a.flags.writeable = False
    return x, y, u, v


def pixel_grid(shape, pitch: float) -> tuple[np.ndarray, np.ndarray]:
    """Undistorted sensor-plane (x, y) of every pixel centre."""
    x, y, _, _ = _grid(tuple(shape), float(pitch), 0.0)
    return x, y


def gel_grid(shape, pitch: float, k: float) -> tuple[np.ndarray, np.ndarray]:
    """Gel-plane (u, v) imaged by every pixel centre."""
    _, _, u, v = _grid(tuple(shape), float(pitch), float(k))
    return u, v


def distort(x, y, k: float):
    """Gel-plane point imaged at undistorted sensor-plane point (x, y)."""
    s = 1.0 + k * (x * x + y * y)
    return x * s, y * s


def undistort(u, v, k: float):
    """Inverse of :func:`distort` by Newton iteration on the radius."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if k == 0:
        return u, v
    rg = np.hypot(u, v)
    r = rg.copy()
    for _ in range(30):
        r = r - (r + k * r**3 - rg) / (1 + 3 * k * r**2)
    scale = np.divide(r, rg, out=np.ones_like(rg), where=rg > 0)
    return u * scale, v * scale


def plane_to_pixel(shape, pitch: float, uv, k: float = 0.0) -> np.ndarray:
    """(row, col) at which the plane point ``uv`` appears."""
    uv = np.asarray(uv, dtype=float)
    x, y = undistort(uv[..., 0], uv[..., 1], k)
    cr, cc = _centre(shape)
    return np.stack([cr - y / pitch, cc + x / pitch], axis=-1)


def pixel_to_plane(shape, pitch: float, rc, k: float = 0.0) -> np.ndarray:
    rc = np.asarray(rc, dtype=float)
    cr, cc = _centre(shape)
    x = (rc[..., 1] - cc) * pitch
    y = (cr - rc[..., 0]) * pitch
    u, v = distort(x, y, k)
    return np.stack([u, v], axis=-1)


def _finish(depth: np.ndarray, sensor: SensorSpec, rng) -> np.ndarray:
    return _add_noise(_blur(depth), sensor, rng)


# --- grip images ---------------------------------------------------------------

def rasterize_polyline(shape, pitch: float, points, width: float) -> np.ndarray:
    """Boolean footprint of a thread polyline in sensor-plane coordinates.

    Segments are flat-ended; round caps are added only at interior joints so
    that the free end of the thread stops exactly at its last point.
    """
    x, y = pixel_grid(shape, pitch)
    mask = np.zeros(shape, dtype=bool)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    r = width / 2
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        length2 = d @ d
        if length2 == 0:
            continue
        t = ((x - a[0]) * d[0] + (y - a[1]) * d[1]) / length2
        px = a[0] + t * d[0]
        py = a[1] + t * d[1]
        mask |= (t >= 0) & (t <= 1) & (np.hypot(x - px, y - py) <= r)
    for p in pts[1:-1]:
        mask |= np.hypot(x - p[0], y - p[1]) <= r
    return mask


def grip_footprint(world, sensor: SensorSpec) -> np.ndarray:
    """Noise-free boolean thread footprint on the grip sensor."""
    frame = world.gripper_pose
    local = frame.inverse().apply(world.thread.positions)
    thickness = world.thread.material.thickness
    # keep the stretch of thread lying in the gripper jaws
    near = np.abs(local[:, 2]) <= max(thickness, 1e-3)
    if near.sum() < 2:
        return np.zeros(sensor.shape, dtype=bool)
    idx = np.flatnonzero(near)
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    mask = np.zeros(sensor.shape, dtype=bool)
    for run in runs:
        if len(run) >= 2:
            mask |= rasterize_polyline(sensor.shape, sensor.mm_per_px, local[run, :2], thickness)
    return mask


@dataclass
class GripView:
    """Minimal stand-in for a world when only the gripper and thread matter."""

    thread: dlo.ParticleChain
    gripper_pose: Pose


def render_grip_image(world, sensor: SensorSpec, rng: np.random.Generator | None = None) -> TactileImage:
    """Line imprint of the thread on the finger sensor centred at the gripper."""
    mask = grip_footprint(world, sensor)
    img = _finish(mask * GRIP_DEPTH, sensor, rng)
    return TactileImage(img, sensor.mm_per_px, world.gripper_pose)


# --- eyelet images -------------------------------------------------------------

@dataclass(frozen=True)
class EyeletScene:
    """Needle imprint geometry in gel (u, v) coordinates, metres."""

    slot_center: tuple[float, float]
    slot_width: float
    slot_height: float
    rim_width: float
    gel_half: float = 0.0075

    def body(self, u, v):
        """Needle material pressed against the gel."""
        du = np.abs(u - self.slot_center[0])
        on_gel = (np.abs(u) <= self.gel_half) & (np.abs(v) <= self.gel_half)
        return on_gel & (du <= self.slot_width / 2 + self.rim_width) & ~self.slot(u, v)

    def slot(self, u, v):
        on_gel = (np.abs(u) <= self.gel_half) & (np.abs(v) <= self.gel_half)
        return (
            on_gel
            & (np.abs(u - self.slot_center[0]) <= self.slot_width / 2)
            & (np.abs(v - self.slot_center[1]) <= self.slot_height / 2)
        )

    def contact(self, tip_uv, thickness: float) -> str:
        """Where a tip of the given thickness ends up when pushed towards the gel.

        Returns ``"slot"`` (through the eyelet), ``"gel"`` (beside the needle),
        ``"blocked"`` (stopped by needle material) or ``"off"`` (misses the gel).
        """
        u, v = float(tip_uv[0]), float(tip_uv[1])
        r = thickness / 2
        if abs(u) > self.gel_half or abs(v) > self.gel_half:
            return "off"
        du = abs(u - self.slot_center[0])
        dv = abs(v - self.slot_center[1])
        if du <= self.slot_width / 2 - r and dv <= self.slot_height / 2 - r:
            return "slot"
        if du >= self.slot_width / 2 + self.rim_width + r:
            return "gel"
        return "blocked"


def scene_from_world(world) -> EyeletScene:
    from .scene import GEL_SIZE, RIM_WIDTH

    return EyeletScene(
        tuple(world.slot_center), world.needle.slot_width, world.needle.slot_height, RIM_WIDTH, GEL_SIZE / 2
    )


def indentation_force(gel_modulus: float, depth: float, thickness: float) -> float:
    """Force needed to push a tip of ``thickness`` ``depth`` into the gel.

    Hertz-like scaling F = c E depth^1.5 sqrt(thickness / 2), used as a gate
    against buckling rather than as a contact model.
    """
    if depth <= 0:
        return 0.0
    return FORCE_COEFF * gel_modulus * depth**1.5 * math.sqrt(thickness / 2)


def bump_feasible(material: dlo.MaterialSpec, free_length: float, force: float) -> bool:
    """The tail carries ``force`` without buckling."""
    return force <= dlo.buckling_load(material, free_length)


def bump_radius(thickness: float, depth: float) -> float:
    return thickness / 2 + BUMP_SPREAD * depth


def eyelet_depth_map(scene: EyeletScene, sensor: SensorSpec, bump_uv=None, bump_depth: float = 0.0, thickness: float = 0.0) -> np.ndarray:
    """Indentation depth (m) seen by each pixel, before blur and noise."""
    depth = _static_depth(scene, sensor).copy()
    if bump_uv is not None and bump_depth > 0:
        u, v = gel_grid(sensor.shape, sensor.mm_per_px, sensor.distortion)
        _stamp_bump(depth, scene, u, v, bump_uv, bump_depth, thickness)
    return depth


@lru_cache(maxsize=64)
def _static_depth(scene: EyeletScene, sensor: SensorSpec) -> np.ndarray:
    u, v = gel_grid(sensor.shape, sensor.mm_per_px, sensor.distortion)
    depth = np.zeros(sensor.shape)
    depth[scene.slot(u, v)] = HOLE_LEVEL * FULL_SCALE_DEPTH
    depth[scene.body(u, v)] = RIM_LEVEL * FULL_SCALE_DEPTH
    depth.flags.writeable = False
    return depth


@lru_cache(maxsize=64)
def _static_blur(scene: EyeletScene, sensor: SensorSpec) -> np.ndarray:
    img = _blur(_static_depth(scene, sensor))
    img.flags.writeable = False
    return img


def _blur(depth: np.ndarray) -> np.ndarray:
    img = np.clip(depth / FULL_SCALE_DEPTH, 0.0, 1.0)
    return ndimage.gaussian_filter(img, BLUR_SIGMA, mode="nearest")


def _stamp_bump(depth, scene, u, v, bump_uv, bump_depth, thickness) -> None:
    r = bump_radius(thickness, bump_depth)
    body = scene.body(u, v)
    on_gel = (np.abs(u) <= scene.gel_half) & (np.abs(v) <= scene.gel_half)
    disk = (np.hypot(u - bump_uv[0], v - bump_uv[1]) <= r) & ~body & on_gel
    depth[disk] = np.maximum(depth[disk], bump_depth)


#: Gaussian kernel half-width in pixels (scipy truncates at 4 sigma).
_BLUR_RADIUS = int(4.0 * BLUR_SIGMA + 0.5)


def _bump_box(sensor: SensorSpec, bump_uv, radius: float, margin: int):
    """Pixel box covering the bump disk plus ``margin``; distortion only shrinks disks in pixels."""
    rc = plane_to_pixel(sensor.shape, sensor.mm_per_px, bump_uv, sensor.distortion)
    h, w = sensor.shape
    half = radius / sensor.mm_per_px + 2 + margin
    r0, r1 = int(math.floor(rc[0] - half)), int(math.ceil(rc[0] + half)) + 1
    c0, c1 = int(math.floor(rc[1] - half)), int(math.ceil(rc[1] + half)) + 1
    return slice(max(r0, 0), min(max(r1, 0), h)), slice(max(c0, 0), min(max(c1, 0), w))


def _blurred_eyelet(scene: EyeletScene, sensor: SensorSpec, bump_uv, depth: float, thickness: float) -> np.ndarray:
    """Noise-free blurred eyelet image.

    The static needle layer is blurred once per scene. A bump only changes a
    small patch, so the blur is recomputed on a box around it with enough
    margin that the patch interior equals a full-image blur exactly.
    """
    base = _static_blur(scene, sensor)
    if bump_uv is None or depth <= 0:
        return base.copy()
    img = base.copy()
    r = bump_radius(thickness, depth)
    m = 2 * _BLUR_RADIUS
    outer = _bump_box(sensor, bump_uv, r, m)
    if outer[0].start >= outer[0].stop or outer[1].start >= outer[1].stop:
        return img
    u, v = gel_grid(sensor.shape, sensor.mm_per_px, sensor.distortion)
    patch = _static_depth(scene, sensor)[outer].copy()
    _stamp_bump(patch, scene, u[outer], v[outer], bump_uv, depth, thickness)
    blurred = _blur(patch)
    h, w = sensor.shape
    # keep only rows/cols whose kernel footprint lies inside the patch,
    # except along true image borders where both use the same edge mode
    lo_r = 0 if outer[0].start == 0 else _BLUR_RADIUS
    hi_r = 0 if outer[0].stop == h else _BLUR_RADIUS
    lo_c = 0 if outer[1].start == 0 else _BLUR_RADIUS
    hi_c = 0 if outer[1].stop == w else _BLUR_RADIUS
    pr, pc = blurred.shape
    img[outer[0].start + lo_r : outer[0].stop - hi_r, outer[1].start + lo_c : outer[1].stop - hi_c] = blurred[
        lo_r : pr - hi_r, lo_c : pc - hi_c
    ]
    return img


def _add_noise(img: np.ndarray, sensor: SensorSpec, rng) -> np.ndarray:
    if sensor.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        img = img + rng.normal(0.0, sensor.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_eyelet(
    scene: EyeletScene,
    sensor: SensorSpec,
    tip_uv=None,
    depth: float = 0.0,
    thickness: float = 0.0,
    rng: np.random.Generator | None = None,
    frame: Pose | None = None,
) -> TactileImage:
    """Eyelet image with an optional bump at ``tip_uv`` of the given depth."""
    bump = None if tip_uv is None else (float(tip_uv[0]), float(tip_uv[1]))
    img = _add_noise(_blurred_eyelet(scene, sensor, bump, depth, thickness), sensor, rng)
    return TactileImage(img, sensor.mm_per_px, frame if frame is not None else Pose.identity(), sensor.distortion)


def render_eyelet_image(
    world,
    sensor: SensorSpec,
    poke_force: float | None = None,
    rng: np.random.Generator | None = None,
) -> TactileImage:
    """Eyelet image for the thread's current tip position.

    A bump appears when the tip is below the gel surface and the tail can carry
    the indentation force without buckling. ``poke_force`` defaults to the
    force model evaluated at the tip's current depth.
    """
    scene = scene_from_world(world)
    chain = world.thread
    tip = chain.positions[-1]
    u, v, height = world.gel_coords(tip)[0]
    depth = -height
    thickness = chain.material.thickness
    bump = None
    if depth > 0 and scene.contact((u, v), thickness) in ("slot", "gel"):
        force = indentation_force(sensor.gel_young_modulus, depth, thickness) if poke_force is None else poke_force
        if bump_feasible(chain.material, free_tail_length(world), force):
            bump = (u, v)
    return render_eyelet(scene, sensor, bump, depth if bump else 0.0, thickness, rng, world.gel_pose)


def free_tail_length(world) -> float:
    chain = world.thread
    if world.grasp_index is None:
        return chain.rest_length
    return chain.rest_spacing * (len(chain) - 1 - world.grasp_index)


def pixel_threshold(width_px: int, height_px: int) -> int:
    """Minimum bump pixel count, 500 at 1600x1200 scaled by image area."""
    return int(math.floor(500 * width_px * height_px / (1600 * 1200) + 0.5))
