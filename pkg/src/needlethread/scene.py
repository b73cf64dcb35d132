"""World state for the two-arm threading setup.

The thread hangs from a braked spool, the thread gripper either slides along it
or holds it, and the needle sits in a base support with the eyelet-side gel
pressed against the back of its plate. Robot arms are emulated kinematically.

Gel frame conventions: ``v`` runs along the needle shaft (the slot's long
side), ``normal`` points from the gel towards the approaching thread and
``u = v x normal``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import dlo
from .geometry import Pose, frame_from_normal, rotation_between

GEL_SIZE = 0.015
PLATE_THICKNESS = 1e-3
#: Width of needle material on either side of the slot (m).
RIM_WIDTH = 0.7e-3
BEGIN_DROP = 0.02
APPROACH_STANDOFF = 0.01
WORKSPACE_HALF = 0.5
MAX_CALIBRATION_NOISE = 0.03
SPOOL_POSITION = (0.0, 0.0, 0.45)
BASE_REGION_CENTER = (0.30, 0.0, 0.05)
BASE_REGION_HALF = 0.10
#: Height of the gel centre above the needle base, along the shaft (m).
EYELET_HEIGHT = 0.06


class PlanningError(RuntimeError):
    """Requested pose lies outside the reachable workspace."""


@dataclass(frozen=True)
class ThreadSpec:
    index: int
    name: str
    material: dlo.MaterialSpec

    @property
    def label(self) -> str:
        return f"#{self.index} ({self.material.thickness * 1e3:g} mm)"


@dataclass(frozen=True)
class NeedleSpec:
    slot_width: float
    slot_height: float
    plate_thickness: float = PLATE_THICKNESS
    mount_angle: float = 90.0
    index: int = 0

    def __post_init__(self):
        if not (self.slot_width > 0 and self.slot_height > 0 and self.plate_thickness > 0):
            raise ValueError("slot dimensions must be positive")
        if not 45.0 <= self.mount_angle <= 90.0:
            raise ValueError("mount angle must lie in [45, 90] degrees")

    @property
    def label(self) -> str:
        return f"#{self.index} ({self.slot_width * 1e3:g}x{self.slot_height * 1e3:g} mm)"


THREADS = {
    1: ThreadSpec(1, "metal", dlo.MaterialSpec(50e9, 7850.0, 0.2e-3)),
    2: ThreadSpec(2, "nylon", dlo.MaterialSpec(8.3e9, 1150.0, 0.5e-3)),
    3: ThreadSpec(3, "glass fibre", dlo.MaterialSpec(90e9, 2550.0, 1.0e-3)),
    4: ThreadSpec(4, "nylon", dlo.MaterialSpec(8.3e9, 1150.0, 2.0e-3)),
}

NEEDLE_SLOTS = {1: (0.6e-3, 7.5e-3), 2: (1.6e-3, 15e-3), 3: (2.4e-3, 9e-3)}
MOUNT_ANGLES = (45.0, 60.0, 90.0)


def thread_spec(index: int) -> ThreadSpec:
    if index not in THREADS:
        raise ValueError(f"unknown thread index {index}")
    return THREADS[index]


def needle_spec(index: int, angle: float = 90.0) -> NeedleSpec:
    if index not in NEEDLE_SLOTS:
        raise ValueError(f"unknown needle index {index}")
    w, h = NEEDLE_SLOTS[index]
    return NeedleSpec(w, h, PLATE_THICKNESS, float(angle), index)


def compatible(needle: int, thread: int) -> bool:
    """A thread fits a needle when it is thinner than the slot."""
    return THREADS[thread].material.thickness < NEEDLE_SLOTS[needle][0]


def gel_frame(mount_angle: float) -> np.ndarray:
    """Columns (u, v, normal) of the gel for a needle leaning at ``mount_angle``."""
    a = math.radians(mount_angle)
    shaft = np.array([math.cos(a), 0.0, math.sin(a)])
    normal = np.array([-math.sin(a), 0.0, math.cos(a)])
    return frame_from_normal(normal, np.cross(shaft, normal))


#: Gripper orientation while tracing: sensor u along world y, image-up along +z.
TRACE_ORIENTATION = np.column_stack([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


@dataclass
class WorldState:
    thread: dlo.ParticleChain
    gripper_pose: Pose
    grip_closed: bool
    spool_pose: Pose
    brake_engaged: bool
    needle: NeedleSpec
    needle_pose: Pose
    eyelet_gel: dlo.CollisionPlane
    needle_plate: dlo.CollisionPlane
    marker_pose: Pose
    marker_to_gel: Pose
    rng_seed: int
    thread_index: int = 2
    #: Slot centre in gel (u, v) coordinates (m).
    slot_center: tuple[float, float] = (0.0, 0.0)
    grasp_index: int | None = None
    traversed: float = 0.0
    sensor_height: float = 0.015
    extras: dict = field(default_factory=dict)

    @property
    def anchor(self) -> np.ndarray:
        return self.spool_pose.position

    @property
    def beginning_point(self) -> np.ndarray:
        return self.anchor - np.array([0.0, 0.0, BEGIN_DROP])

    @property
    def gel_pose(self) -> Pose:
        return Pose.from_matrix(self.eyelet_gel.origin, gel_frame(self.needle.mount_angle))

    @property
    def thread_length(self) -> float:
        """Rest length of thread hanging below the beginning point."""
        return self.thread.rest_length - BEGIN_DROP

    def copy(self) -> "WorldState":
        return replace(self, thread=self.thread.copy(), extras=dict(self.extras))

    def gel_coords(self, points) -> np.ndarray:
        """(u, v, height above gel surface) of world points."""
        u, v, d = self.eyelet_gel.plane_coords(points)
        return np.column_stack([u, v, d])


def make_world(
    thread: int = 2,
    needle: int = 2,
    angle: float = 90.0,
    seed: int = 0,
    thread_length: float = 0.14,
    slot_jitter: float = 0.002,
    randomize_base: bool = True,
    spacing: float = dlo.DEFAULT_SPACING,
    material: dlo.MaterialSpec | None = None,
    sensor_height: float = 0.015,
) -> WorldState:
    """Build a world with the thread hanging straight from the spool.

    The base support and the slot's offset from the gel centre are drawn from
    ``seed``; ``slot_jitter`` bounds the offset along each gel axis.
    """
    spec = thread_spec(thread)
    nspec = needle_spec(needle, angle)
    rng = np.random.default_rng(seed)
    mat = spec.material if material is None else material

    anchor = np.array(SPOOL_POSITION)
    chain = dlo.new_chain(thread_length + BEGIN_DROP, mat, spacing, origin=anchor)
    chain.pin([0])

    base = np.array(BASE_REGION_CENTER, dtype=float)
    if randomize_base:
        base[:2] += rng.uniform(-BASE_REGION_HALF, BASE_REGION_HALF, size=2)
    frame = gel_frame(angle)
    u_ax, v_ax, n_ax = frame.T
    gel_center = base + EYELET_HEIGHT * v_ax
    offset = rng.uniform(-slot_jitter, slot_jitter, size=2) if slot_jitter > 0 else np.zeros(2)
    offset = _clip_slot_offset(offset, nspec)
    gel = dlo.CollisionPlane(gel_center, n_ax, GEL_SIZE, GEL_SIZE, u_axis=u_ax)
    plate_origin = gel_center + offset[0] * u_ax + offset[1] * v_ax + nspec.plate_thickness * n_ax
    plate = dlo.CollisionPlane(
        plate_origin,
        n_ax,
        nspec.slot_width + 2 * RIM_WIDTH,
        GEL_SIZE + 2 * abs(offset[1]),
        holes=[dlo.RectHole((0.0, 0.0), nspec.slot_width, nspec.slot_height)],
        u_axis=u_ax,
        depth=nspec.plate_thickness,
    )
    needle_pose = Pose.from_matrix(base, frame)
    # marker sits on the base support; T_0 is the fixed marker-to-gel transform
    marker_pose = Pose.from_matrix(base + np.array([0.0, 0.0, -0.02]), frame)
    marker_to_gel = marker_pose.inverse().compose(Pose.from_matrix(gel_center, frame))
    gripper = Pose.from_matrix(anchor - np.array([0.0, 0.0, BEGIN_DROP + sensor_height / 2]), TRACE_ORIENTATION)
    return WorldState(
        thread=chain,
        gripper_pose=gripper,
        grip_closed=False,
        spool_pose=Pose.identity(anchor),
        brake_engaged=True,
        needle=nspec,
        needle_pose=needle_pose,
        eyelet_gel=gel,
        needle_plate=plate,
        marker_pose=marker_pose,
        marker_to_gel=marker_to_gel,
        rng_seed=int(seed),
        thread_index=thread,
        slot_center=(float(offset[0]), float(offset[1])),
        sensor_height=sensor_height,
    )


def _clip_slot_offset(offset: np.ndarray, needle: NeedleSpec) -> np.ndarray:
    # keep the needle body on the gel across u
    lim_u = GEL_SIZE / 2 - needle.slot_width / 2 - RIM_WIDTH
    return np.array([np.clip(offset[0], -lim_u, lim_u), offset[1]])


@dataclass(frozen=True)
class EyeletEstimate:
    pose: Pose
    injected_error: np.ndarray


def sample_disk(rng: np.random.Generator, radius: float) -> np.ndarray:
    """Uniform sample from a disk of ``radius`` centred at the origin."""
    r = radius * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2 * math.pi)
    return np.array([r * math.cos(phi), r * math.sin(phi)])


def estimate_eyelet_pose(world: WorldState, noise_bound: float, rng: np.random.Generator) -> EyeletEstimate:
    """Marker-based gel-centre estimate with a uniform in-plane error."""
    if not 0.0 <= noise_bound <= MAX_CALIBRATION_NOISE:
        raise ValueError("noise_bound must lie in [0, 0.03] m")
    truth = world.marker_pose.compose(world.marker_to_gel)
    if noise_bound == 0.0:
        return EyeletEstimate(truth, np.zeros(3))
    du, dv = sample_disk(rng, noise_bound)
    frame = truth.matrix
    err = du * frame[:, 0] + dv * frame[:, 1]
    return EyeletEstimate(truth.translated(err), err)


class Approach(NamedTuple):
    gripper: Pose | None
    tip: Pose


def tail_axis(pose: Pose) -> np.ndarray:
    """Direction the tail points for a tip pose (its local +z)."""
    return pose.matrix[:, 2]


def plan_approach(
    tip_estimate: Pose,
    eyelet_estimate: EyeletEstimate,
    gripper_pose: Pose | None = None,
    workspace_half: float = WORKSPACE_HALF,
) -> Approach:
    """Target a tip pose 1 cm in front of the estimated gel centre, tail along -normal.

    ``tip_estimate`` is the current tip pose whose local +z is the tail
    direction. When ``gripper_pose`` is given, the rigid motion that carries
    the tip to its target is applied to it as well.
    """
    frame = eyelet_estimate.pose.matrix
    normal = frame[:, 2]
    target = eyelet_estimate.pose.position + APPROACH_STANDOFF * normal
    if not (np.isfinite(tip_estimate.position).all() and np.isfinite(target).all()):
        raise PlanningError("non-finite pose")
    turn = rotation_between(tail_axis(tip_estimate), -normal)
    tip_target = Pose(target, (turn * tip_estimate.rotation).as_quat())
    gripper = None
    if gripper_pose is not None:
        lever = turn.apply(gripper_pose.position - tip_estimate.position)
        gripper = Pose(target + lever, (turn * gripper_pose.rotation).as_quat())
    for pose in (tip_target, gripper):
        if pose is not None and np.abs(pose.position).max() > workspace_half:
            raise PlanningError(f"pose {pose.position} outside workspace")
    return Approach(gripper, tip_target)


def grasp_thread(world: WorldState, grasp_point, tail_length: float) -> WorldState:
    """Close the grip at ``grasp_point`` with ``tail_length`` of thread below it.

    The chain is rebuilt so that a particle sits exactly at the grasp point:
    the tail keeps its exact length and the segment back to the spool takes the
    same spacing, absorbing any remainder as slack.
    """
    if not tail_length > 0:
        raise ValueError("tail_length must be positive")
    world = world.copy()
    old = world.thread
    grasp_point = np.asarray(grasp_point, dtype=float)
    n_tail = math.ceil(tail_length / old.rest_spacing - 1e-9)
    rest = tail_length / n_tail
    upper = np.linalg.norm(grasp_point - world.anchor)
    n_up = max(2, math.ceil(upper / rest - 1e-9))
    tail_dir = old.positions[-1] - old.positions[-2]
    tail_dir = tail_dir / np.linalg.norm(tail_dir)
    # the particle just above the grasp is held by the fingers and fixes the tail direction
    lock = grasp_point - rest * tail_dir
    up_pts = world.anchor + np.outer(np.linspace(0.0, 1.0, n_up), lock - world.anchor)
    tail_pts = grasp_point + np.outer(np.arange(0, n_tail + 1) * rest, tail_dir)
    positions = np.vstack([up_pts, tail_pts])
    stretch, bend = dlo.compliances(old.material, rest)
    chain = dlo.ParticleChain(
        positions=positions,
        velocities=np.zeros_like(positions),
        inverse_masses=np.full(len(positions), 1.0 / (old.material.linear_density * rest)),
        rest_spacing=rest,
        stretch_compliance=stretch,
        bend_compliance=bend,
        damping=old.damping,
        material=old.material,
    )
    chain.pin(np.arange(n_up + 1))
    world.thread = chain
    world.grasp_index = n_up
    world.grip_closed = True
    return world


def taut_length(world: WorldState) -> float:
    """Thread length available between the spool and the grasp."""
    if world.grasp_index is None:
        return world.thread.rest_length
    return world.grasp_index * world.thread.rest_spacing


def move_gripper(world: WorldState, delta: Pose, payout_allowed: bool = False) -> WorldState:
    """Apply the rigid motion ``delta`` (rotation about the gripper, then translation).

    While holding the thread the grasped particle and the tail follow the
    gripper. If the move needs more thread than hangs off the spool, the spool
    pays out in whole segments when the brake is released and payout is
    allowed; otherwise the translation is clipped at the taut length.
    """
    if not (np.isfinite(delta.position).all() and np.isfinite(delta.orientation).all()):
        raise ValueError("delta must be finite")
    world = world.copy()
    old = world.gripper_pose
    step = delta.position.copy()
    if world.grip_closed and world.grasp_index is not None:
        need = np.linalg.norm(old.position + step - world.anchor)
        avail = taut_length(world)
        if need > avail + 1e-12:
            if payout_allowed and not world.brake_engaged:
                _pay_out(world, need - avail)
            else:
                step = step * _clip_fraction(old.position - world.anchor, step, avail)
    new = Pose(old.position + step, (delta.rotation * old.rotation).as_quat())
    world.gripper_pose = new
    if world.grip_closed and world.grasp_index is not None:
        k = world.grasp_index
        x = world.thread.positions
        rel = x[k - 1 :] - old.position
        x[k - 1 :] = new.position + delta.rotation.apply(rel)
        x[:k] = world.anchor + np.outer(np.linspace(0.0, 1.0, k), x[k - 1] - world.anchor)
        world.thread.velocities[:] = 0.0
    return world


def _clip_fraction(start: np.ndarray, step: np.ndarray, radius: float) -> float:
    """Largest s in [0, 1] with |start + s step| <= radius."""
    a = step @ step
    if a == 0:
        return 0.0
    b = 2 * start @ step
    c = start @ start - radius**2
    if c > 0:
        return 0.0
    return float(min(1.0, (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)))


def _pay_out(world: WorldState, excess: float) -> None:
    chain = world.thread
    extra = math.ceil(excess / chain.rest_spacing - 1e-12)
    k = world.grasp_index
    new_pos = np.vstack([np.repeat(chain.positions[:1], extra, axis=0), chain.positions])
    w = np.concatenate([np.zeros(extra), chain.inverse_masses])
    world.thread = replace(
        chain,
        positions=new_pos,
        velocities=np.zeros_like(new_pos),
        inverse_masses=w,
    )
    world.grasp_index = k + extra


class GlideResult(NamedTuple):
    world: WorldState
    traversed: float
    clipped: bool


def glide_along_thread(world: WorldState, step: float) -> GlideResult:
    """Slide the open grip ``step`` further down the straightened thread.

    ``traversed`` is the distance of the sensor's entry edge below the
    beginning point. Motion stops where the sensor centre reaches the tip.
    """
    if world.grip_closed:
        raise ValueError("gliding requires the sliding (open) grip")
    if not world.brake_engaged:
        raise ValueError("gliding requires the spool brake")
    if step < 0:
        raise ValueError("step must be non-negative")
    world = world.copy()
    half = world.sensor_height / 2
    limit = max(world.thread_length - half, 0.0)
    target = world.traversed + step
    clipped = target + half >= world.thread_length
    world.traversed = min(target, limit)
    centre = world.beginning_point - np.array([0.0, 0.0, world.traversed + half])
    world.gripper_pose = Pose(centre, world.gripper_pose.orientation)
    return GlideResult(world, world.traversed, bool(clipped))


def reset_glide(world: WorldState) -> WorldState:
    """Open the grip and return the sensor to the beginning point."""
    world = world.copy()
    world.traversed = 0.0
    world.grip_closed = False
    centre = world.beginning_point - np.array([0.0, 0.0, world.sensor_height / 2])
    world.gripper_pose = Pose.from_matrix(centre, TRACE_ORIENTATION)
    return world


def random_orientation(rng: np.random.Generator) -> Rotation:
    return Rotation.random(random_state=rng)
