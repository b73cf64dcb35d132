"""XPBD particle-chain model of a thread.

The thread is a chain of particles held together by compliant stretch
constraints (neighbouring particles) and discrete-curvature bend constraints
(every interior particle), integrated with small substeps. Each solver
iteration performs a global multiplier update over all constraints, followed by
position projection against collision planes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])

#: Resolution unit of the thread discretisation (m); spacing = resolution * unit.
RESOLUTION_UNIT = 0.01
DEFAULT_RESOLUTION = 0.7
DEFAULT_SPACING = DEFAULT_RESOLUTION * RESOLUTION_UNIT
DEFAULT_DAMPING = 0.9
DEFAULT_DT = 5e-3
DEFAULT_ITERATIONS = 20
DEFAULT_SUBSTEPS = 5

#: Lumped-mass correction on the bend compliance. Calibrated so that a 20 mm
#: cantilever discretised at the default spacing droops like q L^4 / (8 E I).
BEND_SCALE = 0.40

# position-correction size below which an iteration counts as converged
_SOLVE_TOL = 1e-15
_DEGENERATE_EPS = 1e-9


class SimulationError(RuntimeError):
    """Raised when the integrator produces non-finite state."""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


@dataclass(frozen=True)
class MaterialSpec:
    young_modulus: float  # Pa
    density: float  # kg/m^3
    thickness: float  # m, circular cross-section diameter

    def __post_init__(self):
        for name in ("young_modulus", "density", "thickness"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def area(self) -> float:
        return math.pi * (self.thickness / 2) ** 2

    @property
    def second_moment(self) -> float:
        return math.pi * self.thickness**4 / 64

    @property
    def bending_stiffness(self) -> float:
        return self.young_modulus * self.second_moment

    @property
    def linear_density(self) -> float:
        return self.density * self.area


@dataclass(frozen=True)
class RectHole:
    """Axis-aligned rectangular cut-out in plane coordinates."""

    center: tuple[float, float]
    width: float  # along u
    height: float  # along v

    def contains(self, u, v, margin: float = 0.0):
        cu, cv = self.center
        return (np.abs(u - cu) <= self.width / 2 - margin) & (np.abs(v - cv) <= self.height / 2 - margin)


@dataclass
class CollisionPlane:
    """Finite planar obstacle; particles are kept on the side the normal points to.

    ``depth`` limits how far behind the surface a particle is still pushed out,
    which turns the plane into a plate of that thickness.
    """

    origin: np.ndarray
    normal: np.ndarray
    extent_u: float
    extent_v: float
    holes: list[RectHole] = field(default_factory=list)
    u_axis: np.ndarray | None = None
    depth: float = math.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit length")
        if self.u_axis is None:
            helper = np.array([1.0, 0.0, 0.0])
            if abs(self.normal @ helper) > 0.9:
                helper = np.array([0.0, 1.0, 0.0])
            u = helper - (helper @ self.normal) * self.normal
        else:
            u = np.asarray(self.u_axis, dtype=float)
            u = u - (u @ self.normal) * self.normal
        self.u_axis = u / np.linalg.norm(u)
        for hole in self.holes:
            cu, cv = hole.center
            if abs(cu) + hole.width / 2 > self.extent_u / 2 + 1e-12 or abs(cv) + hole.height / 2 > self.extent_v / 2 + 1e-12:
                raise ValueError("hole must lie within the plane extents")

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    def plane_coords(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (u, v, signed distance) of ``points`` in the plane frame."""
        d = np.atleast_2d(points) - self.origin
        return d @ self.u_axis, d @ self.v_axis, d @ self.normal

    def signed_distance(self, points) -> np.ndarray:
        return self.plane_coords(points)[2]

    def covers(self, points) -> np.ndarray:
        """True where the plane's solid material lies under ``points``."""
        u, v, _ = self.plane_coords(points)
        inside = (np.abs(u) <= self.extent_u / 2) & (np.abs(v) <= self.extent_v / 2)
        for hole in self.holes:
            inside &= ~hole.contains(u, v)
        return inside

    def penetrating(self, points) -> np.ndarray:
        dist = self.signed_distance(points)
        return self.covers(points) & (dist < 0.0) & (dist > -self.depth)


@dataclass
class ParticleChain:
    positions: np.ndarray
    velocities: np.ndarray
    inverse_masses: np.ndarray
    rest_spacing: float
    stretch_compliance: float
    bend_compliance: float
    damping: float
    material: MaterialSpec
    step_count: int = 0

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        self.velocities = np.array(self.velocities, dtype=float).reshape(-1, 3)
        self.inverse_masses = np.array(self.inverse_masses, dtype=float).reshape(-1)
        n = len(self.positions)
        if n < 2 or len(self.velocities) != n or len(self.inverse_masses) != n:
            raise ValueError("positions, velocities and inverse_masses need equal length >= 2")
        if not self.rest_spacing > 0:
            raise ValueError("rest_spacing must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    def copy(self) -> "ParticleChain":
        return replace(
            self,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            inverse_masses=self.inverse_masses.copy(),
        )

    @property
    def pinned(self) -> np.ndarray:
        return self.inverse_masses == 0

    @property
    def rest_length(self) -> float:
        return self.rest_spacing * (len(self) - 1)

    @property
    def particle_mass(self) -> float:
        return self.material.linear_density * self.rest_spacing

    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.positions, axis=0), axis=1)

    def stretch_residuals(self) -> np.ndarray:
        """|C| of every stretch constraint with at least one free endpoint."""
        free = ~(self.pinned[:-1] & self.pinned[1:])
        return np.abs(self.segment_lengths() - self.rest_spacing)[free]

    def max_speed(self) -> float:
        free = ~self.pinned
        if not free.any():
            return 0.0
        return float(np.linalg.norm(self.velocities[free], axis=1).max())

    def pin(self, indices) -> None:
        self.inverse_masses[np.asarray(indices)] = 0.0
        self.velocities[np.asarray(indices)] = 0.0

    def unpin(self, indices) -> None:
        self.inverse_masses[np.asarray(indices)] = 1.0 / self.particle_mass


def compliances(material: MaterialSpec, spacing: float) -> tuple[float, float]:
    """Stretch compliance spacing/(EA) and bend compliance for the curvature constraint."""
    stretch = spacing / (material.young_modulus * material.area)
    bend = BEND_SCALE * spacing**3 / material.bending_stiffness
    return stretch, bend


def new_chain(
    length: float,
    material: MaterialSpec,
    spacing: float = DEFAULT_SPACING,
    damping: float = DEFAULT_DAMPING,
    origin=(0.0, 0.0, 0.0),
    direction=(0.0, 0.0, -1.0),
) -> ParticleChain:
    """Straight chain hanging from ``origin`` along ``direction``.

    The segment count is ``ceil(length / spacing)``; when ``length`` is not a
    multiple of ``spacing`` the rest spacing shrinks so the chain keeps its
    exact length.
    """
    if not length > 0 or not spacing > 0:
        raise ValueError("length and spacing must be positive")
    if length < 2 * spacing * (1 - 1e-9):
        raise ValueError("length must be at least two spacings")
    n_seg = math.ceil(length / spacing - 1e-9)
    rest = length / n_seg
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    positions = np.asarray(origin, dtype=float) + np.outer(np.arange(n_seg + 1) * rest, direction)
    mass = material.linear_density * rest
    stretch, bend = compliances(material, rest)
    return ParticleChain(
        positions=positions,
        velocities=np.zeros_like(positions),
        inverse_masses=np.full(n_seg + 1, 1.0 / mass),
        rest_spacing=rest,
        stretch_compliance=stretch,
        bend_compliance=bend,
        damping=damping,
        material=material,
    )


def solve_distance_constraint(xi, xj, wi, wj, rest, compliance, lam, dt):
    """One XPBD projection of ``|xj - xi| = rest``.

    Returns ``(dxi, dxj, dlambda)``.
    """
    if not rest > 0:
        raise ValueError("rest length must be positive")
    if not wi + wj > 0:
        raise ValueError("at least one endpoint must be free")
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    d = xj - xi
    dist = np.linalg.norm(d)
    if dist < _DEGENERATE_EPS:
        d = d + np.array([_DEGENERATE_EPS, 0.0, 0.0])
        dist = np.linalg.norm(d)
    n = d / dist
    alpha = compliance / dt**2
    dlam = (-(dist - rest) - alpha * lam) / (wi + wj + alpha)
    return -wi * dlam * n, wj * dlam * n, dlam


class _System:
    """Constraint topology of a chain, rebuilt only when pinning changes."""

    def __init__(self, chain: ParticleChain):
        n = len(chain)
        w = chain.inverse_masses
        self.n = n
        self.stretch_idx = np.flatnonzero(~((w[:-1] == 0) & (w[1:] == 0)))
        bend_centres = np.arange(1, n - 1)
        active = ~((w[:-2] == 0) & (w[1:-1] == 0) & (w[2:] == 0))
        self.bend_idx = bend_centres[active]
        ns, nb = len(self.stretch_idx), len(self.bend_idx)
        self.ns = ns
        self.m = ns + 3 * nb
        jb = np.zeros((3 * nb, 3 * n))
        for k, i in enumerate(self.bend_idx):
            for a in range(3):
                r = 3 * k + a
                jb[r, 3 * (i - 1) + a] = 1.0
                jb[r, 3 * i + a] = -2.0
                jb[r, 3 * (i + 1) + a] = 1.0
        self.jac_bend = jb
        self.wdiag = np.repeat(w, 3)
        self.alpha = np.concatenate(
            [np.full(ns, chain.stretch_compliance), np.full(3 * nb, chain.bend_compliance)]
        )

    def constraints(self, p: np.ndarray, rest: float):
        n = self.n
        idx = self.stretch_idx
        d = p[idx + 1] - p[idx]
        dist = np.linalg.norm(d, axis=1)
        small = dist < _DEGENERATE_EPS
        if small.any():
            d[small] += np.array([_DEGENERATE_EPS, 0.0, 0.0])
            dist = np.linalg.norm(d, axis=1)
        nrm = d / dist[:, None]
        js = np.zeros((self.ns, 3 * n))
        rows = np.arange(self.ns)[:, None]
        cols = 3 * idx[:, None] + np.arange(3)
        js[rows, cols] = -nrm
        js[rows, cols + 3] = nrm
        b = self.bend_idx
        cb = (p[b - 1] - 2 * p[b] + p[b + 1]).reshape(-1)
        c = np.concatenate([dist - rest, cb])
        return c, np.vstack([js, self.jac_bend])


def _project_planes(p: np.ndarray, free: np.ndarray, planes: Sequence[CollisionPlane]) -> np.ndarray:
    contact = np.zeros(len(p), dtype=bool)
    for plane in planes:
        hit = plane.penetrating(p) & free
        if hit.any():
            dist = plane.signed_distance(p[hit])
            p[hit] -= np.outer(dist, plane.normal)
            contact |= hit
    return contact


def step(
    chain: ParticleChain,
    planes: Sequence[CollisionPlane] = (),
    dt: float = DEFAULT_DT,
    iterations: int = DEFAULT_ITERATIONS,
    substeps: int = DEFAULT_SUBSTEPS,
    gravity=GRAVITY,
) -> ParticleChain:
    """Advance ``chain`` by ``dt``; returns a new chain.

    ``damping`` is the velocity factor per call, spread evenly over substeps.
    """
    if not 0 < dt <= 0.02:
        raise ValueError("dt must lie in (0, 0.02]")
    if iterations < 1 or substeps < 1:
        raise ValueError("iterations and substeps must be >= 1")
    out = chain.copy()
    x, v = out.positions, out.velocities
    w = out.inverse_masses
    free = w > 0
    gravity = np.asarray(gravity, dtype=float)
    h = dt / substeps
    sub_damping = out.damping ** (1.0 / substeps)
    system = _System(out)
    alpha = system.alpha / h**2
    contact = np.zeros(len(x), dtype=bool)

    for _ in range(substeps):
        v[free] += gravity * h
        p = x + v * h
        lam = np.zeros(system.m)
        for _ in range(iterations):
            if system.m:
                c, jac = system.constraints(p, out.rest_spacing)
                wj = jac * system.wdiag
                lhs = wj @ jac.T
                lhs[np.diag_indices_from(lhs)] += alpha
                dlam = np.linalg.solve(lhs, -c - alpha * lam)
                lam += dlam
                dp = (wj.T @ dlam).reshape(-1, 3)
                p += dp
                moved = np.abs(dp).max()
            else:
                moved = 0.0
            contact = _project_planes(p, free, planes)
            if moved < _SOLVE_TOL:
                break
        v_new = (p - x) / h * sub_damping
        if contact.any():
            for plane in planes:
                touching = contact & (np.abs(plane.signed_distance(p)) < 1e-12) & plane.covers(p)
                # contact removes the tangential and inward velocity
                v_new[touching] = np.outer(np.maximum(v_new[touching] @ plane.normal, 0.0), plane.normal)
        v_new[~free] = 0.0
        p[~free] = x[~free]
        x[:], v[:] = p, v_new

    out.step_count += 1
    if not (np.isfinite(x).all() and np.isfinite(v).all()):
        raise SimulationError("non-finite particle state", out.step_count)
    return out


class SettleResult(NamedTuple):
    chain: ParticleChain
    converged: bool
    steps: int


def settle(
    chain: ParticleChain,
    planes: Sequence[CollisionPlane] = (),
    tol: float = 1e-8,
    max_steps: int = 2000,
    dt: float = DEFAULT_DT,
    iterations: int = DEFAULT_ITERATIONS,
    substeps: int = DEFAULT_SUBSTEPS,
    gravity=GRAVITY,
) -> SettleResult:
    """Step until the fastest free particle moves slower than ``tol`` (m/s)."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    current = chain
    for k in range(1, max_steps + 1):
        current = step(current, planes, dt, iterations, substeps, gravity)
        if current.max_speed() < tol:
            return SettleResult(current, True, k)
    return SettleResult(current, False, max_steps)


def buckling_load(material: MaterialSpec, free_length: float) -> float:
    """Euler critical load of a clamped-free column, pi^2 E I / (4 L^2)."""
    if not free_length > 0:
        raise ValueError("free_length must be positive")
    return math.pi**2 * material.bending_stiffness / (4 * free_length**2)


def cantilever_droop(material: MaterialSpec, length: float, gravity: float = 9.81) -> float:
    """Small-deflection tip droop of a horizontal cantilever under self-weight."""
    q = material.linear_density * gravity
    return q * length**4 / (8 * material.bending_stiffness)


def clamped_tail(
    material: MaterialSpec,
    tail_length: float,
    spacing: float = DEFAULT_SPACING,
    damping: float = DEFAULT_DAMPING,
    clamp=(0.0, 0.0, 0.0),
    direction=(0.0, 0.0, -1.0),
) -> ParticleChain:
    """Chain whose first two particles are pinned so that the clamp point sits at
    index 1 and ``tail_length`` of free thread extends along ``direction``."""
    if not tail_length > 0:
        raise ValueError("tail_length must be positive")
    n_tail = math.ceil(tail_length / spacing - 1e-9)
    rest = tail_length / n_tail
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    origin = np.asarray(clamp, dtype=float) - rest * direction
    chain = new_chain(tail_length + rest, material, rest, damping, origin, direction)
    chain.pin([0, 1])
    return chain
