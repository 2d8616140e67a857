"""Ground-truth particle simulators: RigidFall, FluidCube and MassRope.

All three are position-based: predict positions from velocities, project them
onto constraints (contacts, springs, density, rigid shapes), then recover
velocities from the position change. Rigid objects are re-projected onto
their rest shape by shape matching as the last position update of each step.
Unforced RigidFall and FluidCube scenes are frozen once every particle has
stayed slow for a few consecutive steps.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .geometry import neighbor_pairs, project_rigid
from .nn import rng_stream

logger = logging.getLogger("pinfer")

GRAVITY = -9.8


class EnvKind(str, enum.Enum):
    RIGIDFALL = "rigidfall"
    FLUIDCUBE = "fluidcube"
    MASSROPE = "massrope"

    @property
    def code(self) -> int:
        return _ENV_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "EnvKind":
        for kind, c in _ENV_CODES.items():
            if c == code:
                return kind
        raise ContractViolation(f"unknown env code {code}")


_ENV_CODES = {EnvKind.RIGIDFALL: 0, EnvKind.FLUIDCUBE: 1, EnvKind.MASSROPE: 2}

PARAM_NAMES = {
    EnvKind.RIGIDFALL: "gravity",
    EnvKind.FLUIDCUBE: "viscosity",
    EnvKind.MASSROPE: "stiffness",
}
PARAM_UNITS = {
    EnvKind.RIGIDFALL: "m/s^2",
    EnvKind.FLUIDCUBE: "1",
    EnvKind.MASSROPE: "1",
}
PARAM_RANGES = {
    EnvKind.RIGIDFALL: (-15.0, -5.0),
    EnvKind.FLUIDCUBE: (1.0, 100.0),
    EnvKind.MASSROPE: (0.25, 1.20),
}
OBJECT_NAMES = {
    EnvKind.RIGIDFALL: ("cube0", "cube1", "cube2"),
    EnvKind.FLUIDCUBE: ("fluid", "block"),
    EnvKind.MASSROPE: ("rope", "mass"),
}
RIGIDNESS = {
    EnvKind.RIGIDFALL: (True, True, True),
    EnvKind.FLUIDCUBE: (False, True),
    EnvKind.MASSROPE: (False, True),
}

# RigidFall
CUBE_EDGE = 0.2
STACK_BASE = 0.2
STACK_GAP = 0.05
STACK_JITTER = 0.03
GROUND_FRICTION = 0.3
CONTACT_EPS = 1e-9

# unforced scenes whose particles all stay below REST_SPEED for REST_STEPS
# consecutive steps are frozen until something drives them again
REST_SPEED = 0.1
REST_STEPS = 10

# FluidCube
KERNEL_RADIUS = 0.1
REST_SPACING = 0.05
CONTAINER_SIZE = (0.5, 1.0, 0.25)
BLOCK_MASS_RATIO = 0.8
CONSTRAINT_RELAXATION = 10.0

# MassRope
ACTUATOR_START = (0.0, 1.0, 0.0)
ROPE_DAMPING = 0.5
ROPE_PARTICLE_MASS = 0.02
SPRING_RANGE = (50.0, 240.0)


@dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind
    lattices: tuple[tuple[int, int, int], ...]
    spacing: float
    param_range: tuple[float, float]
    dt: float = 1.0 / 60.0
    steps: int = 120
    substeps: int = 1
    iterations: int = 4
    actuation_limit: float = 0.0
    velocity_limit: float = 0.0
    container_size: tuple[float, float, float] = CONTAINER_SIZE
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.param_range
        if not lo < hi:
            raise ContractViolation(f"param_range lo must be < hi, got {self.param_range}")
        if not self.dt > 0:
            raise ContractViolation(f"dt must be positive, got {self.dt}")
        if self.steps < 1 or self.substeps < 1 or self.iterations < 1:
            raise ContractViolation("steps, substeps and iterations must be >= 1")
        if any(min(lat) < 1 for lat in self.lattices) or not self.lattices:
            raise ContractViolation(f"every object needs >= 1 particle, got {self.lattices}")

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(np.prod(lat)) for lat in self.lattices)

    @property
    def n_particles(self) -> int:
        return sum(self.counts)

    @property
    def n_objects(self) -> int:
        return len(self.lattices)

    @property
    def param_name(self) -> str:
        return PARAM_NAMES[self.kind]

    @classmethod
    def preset(cls, kind: EnvKind | str, scale: str = "desk", **overrides) -> "EnvConfig":
        kind = EnvKind(kind)
        if scale not in ("desk", "full"):
            raise ContractViolation(f"unknown scale {scale!r}")
        full = scale == "full"
        if kind is EnvKind.RIGIDFALL:
            n = 4 if full else 3
            base = cls(kind, ((n, n, n),) * 3, CUBE_EDGE / (n - 1), PARAM_RANGES[kind],
                       iterations=4)
        elif kind is EnvKind.FLUIDCUBE:
            fluid = (10, 6, 5) if full else (5, 5, 5)
            block = (4, 4, 3) if full else (3, 3, 3)
            size = (0.6, 1.0, 0.25) if full else CONTAINER_SIZE
            base = cls(kind, (fluid, block), REST_SPACING, PARAM_RANGES[kind],
                       iterations=3, actuation_limit=2.0, velocity_limit=0.5,
                       container_size=size)
        else:
            mass = (9, 3, 3) if full else (3, 3, 3)
            base = cls(kind, ((1, 14, 1), mass), REST_SPACING, PARAM_RANGES[kind],
                       substeps=10, actuation_limit=3.0, velocity_limit=1.0)
        return dataclasses.replace(base, **overrides) if overrides else base

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        d["kind"] = EnvKind(d["kind"])
        d["lattices"] = tuple(tuple(int(v) for v in lat) for lat in d["lattices"])
        d["param_range"] = tuple(float(v) for v in d["param_range"])
        d["container_size"] = tuple(float(v) for v in d["container_size"])
        return cls(**d)


@dataclass
class ParticleSystem:
    positions: np.ndarray
    velocities: np.ndarray
    grouping: np.ndarray
    rigidness: np.ndarray
    masses: np.ndarray
    rest_shapes: dict[int, np.ndarray] = field(default_factory=dict)
    springs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    spring_rest: np.ndarray = field(default_factory=lambda: np.zeros(0))
    external_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    external_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rest_steps: int = 0

    def __post_init__(self):
        for obj, rigid in enumerate(self.rigidness):
            if rigid and obj not in self.rest_shapes:
                raise ContractViolation(f"rigid object {obj} has no rest shape")

    @property
    def n_objects(self) -> int:
        return len(self.rigidness)

    def indices(self, obj: int) -> np.ndarray:
        return np.flatnonzero(self.grouping == obj)

    def copy(self) -> "ParticleSystem":
        return dataclasses.replace(
            self,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            external_position=self.external_position.copy(),
            external_velocity=self.external_velocity.copy(),
        )

    def kinetic_energy(self, objects: tuple[int, ...] | None = None) -> float:
        mask = np.ones(len(self.masses), dtype=bool) if objects is None else np.isin(self.grouping, objects)
        v2 = np.sum(self.velocities[mask] ** 2, axis=1)
        return float(0.5 * np.sum(self.masses[mask] * v2))

    @property
    def asleep(self) -> bool:
        return self.rest_steps >= REST_STEPS


@dataclass
class Trajectory:
    env_kind: EnvKind
    params: np.ndarray      # float32 [n_params]
    grouping: np.ndarray    # uint32 [N]
    rigidness: np.ndarray   # bool [M]
    positions: np.ndarray   # float32 [T, N, 3]
    actuation: np.ndarray   # float32 [T, 3]

    def __post_init__(self):
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise ContractViolation(f"positions must be [T, N, 3], got {self.positions.shape}")
        if self.positions.shape[1] != len(self.grouping):
            raise ContractViolation("grouping length does not match particle count")
        if self.actuation.shape != (self.positions.shape[0], 3):
            raise ContractViolation("actuation must be [T, 3]")

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def n_objects(self) -> int:
        return len(self.rigidness)


# -- layout -----------------------------------------------------------------------

def _lattice(dims: tuple[int, int, int], spacing: float) -> np.ndarray:
    axes = [np.arange(n) * spacing for n in dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid


def _centered_xz(points: np.ndarray) -> np.ndarray:
    out = points.copy()
    out[:, 0] -= out[:, 0].mean()
    out[:, 2] -= out[:, 2].mean()
    return out


def _rest(points: np.ndarray) -> np.ndarray:
    return points - points.mean(axis=0)


def initial_state(config: EnvConfig, rng: np.random.Generator) -> ParticleSystem:
    builders = {
        EnvKind.RIGIDFALL: _init_rigidfall,
        EnvKind.FLUIDCUBE: _init_fluidcube,
        EnvKind.MASSROPE: _init_massrope,
    }
    return builders[config.kind](config, rng)


def _init_rigidfall(config: EnvConfig, rng: np.random.Generator) -> ParticleSystem:
    chunks, groups, rest = [], [], {}
    base = STACK_BASE
    for obj, dims in enumerate(config.lattices):
        cube = _centered_xz(_lattice(dims, config.spacing))
        edge = cube[:, 1].max()
        jitter = rng.uniform(-STACK_JITTER, STACK_JITTER, size=2)
        cube = cube + np.array([jitter[0], base, jitter[1]])
        chunks.append(cube)
        groups.append(np.full(len(cube), obj))
        rest[obj] = _rest(cube)
        base += edge + config.spacing + STACK_GAP
    x = np.concatenate(chunks)
    return ParticleSystem(
        positions=x,
        velocities=np.zeros_like(x),
        grouping=np.concatenate(groups).astype(np.int64),
        rigidness=np.ones(config.n_objects, dtype=bool),
        masses=np.ones(len(x)),
        rest_shapes=rest,
    )


def _poly6(r2: np.ndarray, h: float) -> np.ndarray:
    coeff = 315.0 / (64.0 * np.pi * h ** 9)
    return np.where(r2 < h * h, coeff * np.clip(h * h - r2, 0.0, None) ** 3, 0.0)


def _spiky_grad(diff: np.ndarray, r: np.ndarray, h: float) -> np.ndarray:
    coeff = -45.0 / (np.pi * h ** 6)
    mag = np.where((r > 1e-12) & (r < h), coeff * (h - r) ** 2 / np.maximum(r, 1e-12), 0.0)
    return diff * mag[:, None]


def rest_density(h: float = KERNEL_RADIUS, spacing: float = REST_SPACING) -> float:
    """Poly6 density (unit masses) of an interior particle of a cubic lattice."""
    reach = int(np.ceil(h / spacing))
    offs = np.arange(-reach, reach + 1) * spacing
    grid = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3)
    return float(np.sum(_poly6(np.sum(grid * grid, axis=1), h)))


def _init_fluidcube(config: EnvConfig, rng: np.random.Generator) -> ParticleSystem:
    fluid_dims, block_dims = config.lattices
    fluid = _centered_xz(_lattice(fluid_dims, config.spacing))
    block = _centered_xz(_lattice(block_dims, config.spacing))
    block[:, 1] += fluid[:, 1].max() + config.spacing
    m_fluid = 1.0 / rest_density(KERNEL_RADIUS, config.spacing)
    x = np.concatenate([fluid, block])
    grouping = np.concatenate([np.zeros(len(fluid)), np.ones(len(block))]).astype(np.int64)
    masses = np.where(grouping == 0, m_fluid, BLOCK_MASS_RATIO * m_fluid)
    return ParticleSystem(
        positions=x,
        velocities=np.zeros_like(x),
        grouping=grouping,
        rigidness=np.array([False, True]),
        masses=masses,
        rest_shapes={1: _rest(block)},
    )


def _init_massrope(config: EnvConfig, rng: np.random.Generator) -> ParticleSystem:
    rope_dims, mass_dims = config.lattices
    n_rope = int(np.prod(rope_dims))
    s = config.spacing
    top = np.asarray(ACTUATOR_START, dtype=np.float64)
    rope = top + np.stack([np.zeros(n_rope), -np.arange(n_rope) * s, np.zeros(n_rope)], axis=1)
    mass = _centered_xz(_lattice(mass_dims, s))
    mass[:, 1] += rope[-1, 1] - s - mass[:, 1].max()
    top_layer = np.flatnonzero(np.isclose(mass[:, 1], mass[:, 1].max()))
    attach = top_layer[np.argmin(np.abs(mass[top_layer, 0]) + np.abs(mass[top_layer, 2]))]
    x = np.concatenate([rope, mass])
    chain = [(i, i + 1) for i in range(n_rope - 1)] + [(n_rope - 1, n_rope + int(attach))]
    springs = np.asarray(chain, dtype=np.int64)
    rest_len = np.linalg.norm(x[springs[:, 1]] - x[springs[:, 0]], axis=1)
    grouping = np.concatenate([np.zeros(n_rope), np.ones(len(mass))]).astype(np.int64)
    return ParticleSystem(
        positions=x,
        velocities=np.zeros_like(x),
        grouping=grouping,
        rigidness=np.array([False, True]),
        masses=np.full(len(x), ROPE_PARTICLE_MASS),
        rest_shapes={1: _rest(mass)},
        springs=springs,
        spring_rest=rest_len,
        external_position=top.copy(),
    )


# -- shared projections ------------------------------------------------------------

def _project_rigid_objects(x: np.ndarray, state: ParticleSystem) -> np.ndarray:
    for obj, rest in state.rest_shapes.items():
        idx = state.indices(obj)
        x[idx] = project_rigid(x[idx], rest)
    return x


def _separate_objects(x: np.ndarray, grouping: np.ndarray, distance: float) -> np.ndarray:
    """Push apart particle pairs of different objects closer than ``distance``.

    Each particle moves by the mean of its pair corrections.
    """
    pairs = neighbor_pairs(x, distance)
    if len(pairs) == 0:
        return x
    s, r = pairs[:, 0], pairs[:, 1]
    keep = (s < r) & (grouping[s] != grouping[r])
    s, r = s[keep], r[keep]
    if len(s) == 0:
        return x
    diff = x[r] - x[s]
    dist = np.linalg.norm(diff, axis=1)
    overlap = distance - dist
    hit = (overlap > 0) & (dist > 1e-12)
    s, r = s[hit], r[hit]
    push = 0.5 * (overlap[hit] / dist[hit])[:, None] * diff[hit]
    delta = np.zeros_like(x)
    count = np.zeros(len(x))
    np.add.at(delta, r, push)
    np.add.at(delta, s, -push)
    np.add.at(count, r, 1.0)
    np.add.at(count, s, 1.0)
    return x + delta / np.maximum(count, 1.0)[:, None]


def _settle_stack(x: np.ndarray, state: ParticleSystem, distance: float) -> np.ndarray:
    """Translate objects upward, lowest first, so none sits below the ground or
    closer than ``distance`` to a particle below it in an object it rests on."""
    order = sorted(range(state.n_objects), key=lambda o: x[state.indices(o), 1].min())
    settled: list[np.ndarray] = []
    for obj in order:
        idx = state.indices(obj)
        lift = max(0.0, -x[idx, 1].min())
        for below in settled:
            dx = x[idx][:, None, :] - x[below][None, :, :]
            dy = dx[..., 1] + lift
            horiz2 = dx[..., 0] ** 2 + dx[..., 2] ** 2
            resting = (horiz2 + dy ** 2 < distance ** 2) & (dy > 0)
            if np.any(resting):
                need = np.sqrt(distance ** 2 - horiz2[resting]) - dy[resting]
                lift += max(0.0, float(need.max()))
        if lift > 0:
            x[idx, 1] += lift
        settled.append(idx)
    return x


def _contact_velocity(v: np.ndarray, friction: float) -> np.ndarray:
    """Velocity of one rigid object after touching the ground or another object:
    zero restitution along y, ``friction`` taken off sliding and spin."""
    mean = v.mean(axis=0)
    spin = v - mean
    mean[1] = min(mean[1], 0.0)
    mean[[0, 2]] *= 1.0 - friction
    return mean + (1.0 - friction) * spin


def _rest_count(previous: ParticleSystem, v: np.ndarray, forced: bool = False) -> int:
    if forced or np.linalg.norm(v, axis=1).max() >= REST_SPEED:
        return 0
    return previous.rest_steps + 1


# -- RigidFall ----------------------------------------------------------------------

def step_rigidfall(state: ParticleSystem, g: float, dt: float, *, iterations: int = 4,
                   contact_distance: float = 0.1,
                   friction: float = GROUND_FRICTION) -> ParticleSystem:
    if not g < 0:
        raise ContractViolation(f"RigidFall gravity must be negative, got {g}")
    if not bool(np.all(state.rigidness)):
        raise ContractViolation("RigidFall expects only rigid objects")
    s = state.copy()
    if state.asleep:
        s.velocities = np.zeros_like(state.velocities)
        return s
    x0 = state.positions
    v = s.velocities.copy()
    v[:, 1] += g * dt
    x_pred = x0 + v * dt
    x = x_pred.copy()
    for _ in range(iterations):
        x[:, 1] = np.maximum(x[:, 1], 0.0)
        x = _separate_objects(x, s.grouping, contact_distance)
        x = _project_rigid_objects(x, s)
    x = _settle_stack(x, s, contact_distance)
    v = (x - x0) / dt
    for obj in range(s.n_objects):
        idx = s.indices(obj)
        if np.abs(x[idx] - x_pred[idx]).max() > CONTACT_EPS:
            v[idx] = _contact_velocity(v[idx], friction)
    s.positions, s.velocities = x, v
    s.rest_steps = _rest_count(state, v)
    return s


# -- MassRope -----------------------------------------------------------------------

def spring_constant(stiffness: float) -> float:
    lo, hi = PARAM_RANGES[EnvKind.MASSROPE]
    k_lo, k_hi = SPRING_RANGE
    return k_lo + (stiffness - lo) / (hi - lo) * (k_hi - k_lo)


def _as_xz_accel(accel) -> np.ndarray:
    a = np.asarray(accel, dtype=np.float64).reshape(-1)
    if a.shape == (2,):
        return np.array([a[0], 0.0, a[1]])
    if a.shape == (3,):
        if a[1] != 0.0:
            raise ContractViolation(f"actuator acceleration must have zero y, got {a}")
        return a
    raise ContractViolation(f"actuator acceleration must be xz or xyz, got shape {a.shape}")


def step_massrope(state: ParticleSystem, stiffness: float, actuator_accel_xz, dt: float, *,
                  substeps: int = 10, damping: float = ROPE_DAMPING,
                  velocity_limit: float = 1.0, gravity: float = GRAVITY) -> ParticleSystem:
    accel = _as_xz_accel(actuator_accel_xz)
    k = spring_constant(stiffness)
    s = state.copy()
    h = dt / substeps
    rope = s.indices(0)
    anchor = rope[0]
    a_idx, b_idx = s.springs[:, 0], s.springs[:, 1]
    x, v = s.positions.copy(), s.velocities.copy()
    inv_m = 1.0 / s.masses[:, None]
    for _ in range(substeps):
        s.external_velocity = np.clip(s.external_velocity + accel * h, -velocity_limit, velocity_limit)
        s.external_position = s.external_position + s.external_velocity * h
        force = np.zeros_like(x)
        force[:, 1] = s.masses * gravity
        d = x[b_idx] - x[a_idx]
        length = np.linalg.norm(d, axis=1)
        f = (k * (length - s.spring_rest) / np.maximum(length, 1e-12))[:, None] * d
        np.add.at(force, a_idx, f)
        np.add.at(force, b_idx, -f)
        v = (v + force * inv_m * h) * (1.0 - damping * h)
        x_new = x + v * h
        x_new[anchor] = s.external_position
        x_new = _project_rigid_objects(x_new, s)
        v = (x_new - x) / h
        v[anchor] = s.external_velocity
        x = x_new
    s.positions, s.velocities = x, v
    return s


# -- FluidCube ----------------------------------------------------------------------

def xsph_coefficient(viscosity: float) -> float:
    lo, hi = PARAM_RANGES[EnvKind.FLUIDCUBE]
    return 0.01 + 0.19 * (viscosity - lo) / (hi - lo)


def _kernel_pairs(x: np.ndarray, h: float):
    pairs = neighbor_pairs(x, h)
    s, r = pairs[:, 0], pairs[:, 1]
    diff = x[r] - x[s]
    return s, r, diff, np.sum(diff * diff, axis=1)


def densities(x: np.ndarray, masses: np.ndarray, h: float = KERNEL_RADIUS) -> np.ndarray:
    s, r, _, r2 = _kernel_pairs(x, h)
    rho = masses * _poly6(np.zeros(len(x)), h)
    np.add.at(rho, r, masses[s] * _poly6(r2, h))
    return rho


def density_residual(x: np.ndarray, masses: np.ndarray, h: float = KERNEL_RADIUS) -> float:
    """RMS of the unilateral density constraint ``max(rho - 1, 0)``."""
    c = np.maximum(densities(x, masses, h) - 1.0, 0.0)
    return float(np.sqrt(np.mean(c * c)))


def solve_density(x: np.ndarray, masses: np.ndarray, iterations: int, *,
                  h: float = KERNEL_RADIUS,
                  clamp=None) -> np.ndarray:
    """Jacobi iterations of the unilateral PBF density constraint."""
    m_ref = masses.max()
    for _ in range(iterations):
        s, r, diff, r2 = _kernel_pairs(x, h)
        rho = masses * _poly6(np.zeros(len(x)), h)
        np.add.at(rho, r, masses[s] * _poly6(r2, h))
        c = np.maximum(rho - 1.0, 0.0)
        grad = _spiky_grad(diff, np.sqrt(r2), h) * masses[s][:, None]
        grad_i = np.zeros_like(x)
        np.add.at(grad_i, r, grad)
        norm2 = np.sum(grad_i * grad_i, axis=1)
        np.add.at(norm2, r, np.sum(grad * grad, axis=1))
        lam = -c / (norm2 + CONSTRAINT_RELAXATION)
        dx = np.zeros_like(x)
        np.add.at(dx, r, ((lam[r] + lam[s]) * masses[s])[:, None] * _spiky_grad(diff, np.sqrt(r2), h))
        x = x + dx * (m_ref / masses)[:, None]
        if clamp is not None:
            x = clamp(x)
    return x


def container_bounds(offset: np.ndarray, size=CONTAINER_SIZE) -> tuple[np.ndarray, np.ndarray]:
    sx, sy, sz = size
    lo = np.array([offset[0] - sx / 2, 0.0, -sz / 2])
    hi = np.array([offset[0] + sx / 2, sy, sz / 2])
    return lo, hi


def _contain_rigid(x: np.ndarray, idx: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    pts = x[idx]
    shift = np.maximum(lo - pts.min(axis=0), 0.0) - np.maximum(pts.max(axis=0) - hi, 0.0)
    x[idx] = pts + shift
    return x


def step_fluidcube(state: ParticleSystem, viscosity: float, container_accel_x: float, dt: float,
                   *, iterations: int = 3, velocity_limit: float = 0.5,
                   container_size=CONTAINER_SIZE, gravity: float = GRAVITY) -> ParticleSystem:
    ax = float(np.asarray(container_accel_x).reshape(-1)[0])
    c = xsph_coefficient(viscosity)
    s = state.copy()
    if state.asleep and ax == 0.0 and not np.any(state.external_velocity):
        s.velocities = np.zeros_like(state.velocities)
        return s
    s.external_velocity[0] = np.clip(s.external_velocity[0] + ax * dt, -velocity_limit, velocity_limit)
    s.external_position = s.external_position + s.external_velocity * dt
    lo, hi = container_bounds(s.external_position, container_size)

    def clamp(p):
        return np.clip(p, lo, hi)

    x0 = state.positions
    v = s.velocities.copy()
    v[:, 1] += gravity * dt
    x = clamp(x0 + v * dt)
    x = solve_density(x, s.masses, iterations, clamp=clamp)
    for obj in s.rest_shapes:
        idx = s.indices(obj)
        x = _project_rigid_objects(x, s)
        x = _contain_rigid(x, idx, lo, hi)
    x[s.grouping == 0] = clamp(x[s.grouping == 0])
    v = (x - x0) / dt

    fluid = s.grouping == 0
    src, dst, _, r2 = _kernel_pairs(x, KERNEL_RADIUS)
    rho = densities(x, s.masses)
    w = s.masses[src] / rho[src] * _poly6(r2, KERNEL_RADIUS)
    smooth = np.zeros_like(v)
    np.add.at(smooth, dst, w[:, None] * (v[src] - v[dst]))
    v[fluid] += c * smooth[fluid]
    s.positions, s.velocities = x, v
    s.rest_steps = _rest_count(state, v, forced=ax != 0.0 or bool(np.any(s.external_velocity)))
    return s


# -- trajectories ----------------------------------------------------------------------

def draw_actuation(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    lim = config.actuation_limit
    if config.kind is EnvKind.FLUIDCUBE:
        return np.array([rng.uniform(-lim, lim), 0.0, 0.0])
    if config.kind is EnvKind.MASSROPE:
        a = rng.uniform(-lim, lim, size=2)
        return np.array([a[0], 0.0, a[1]])
    return np.zeros(3)


def advance(config: EnvConfig, state: ParticleSystem, param: float,
            accel: np.ndarray) -> ParticleSystem:
    if config.kind is EnvKind.RIGIDFALL:
        return step_rigidfall(state, param, config.dt, iterations=config.iterations,
                              contact_distance=config.spacing)
    if config.kind is EnvKind.FLUIDCUBE:
        return step_fluidcube(state, param, accel[0], config.dt, iterations=config.iterations,
                              velocity_limit=config.velocity_limit,
                              container_size=config.container_size)
    return step_massrope(state, param, accel, config.dt, substeps=config.substeps,
                         velocity_limit=config.velocity_limit)


def check_params(config: EnvConfig, params) -> np.ndarray:
    p = np.atleast_1d(np.asarray(params, dtype=np.float64))
    lo, hi = config.param_range
    if p.shape != (1,):
        raise ContractViolation(f"{config.kind.value} takes exactly one parameter, got {p.shape}")
    if not (lo <= p[0] <= hi):
        raise ContractViolation(f"{config.param_name}={p[0]} outside range [{lo}, {hi}]")
    return p


def simulate(config: EnvConfig, params, seed: int) -> Trajectory:
    """Run one labeled trajectory; a pure function of (config, params, seed)."""
    p = check_params(config, params)
    rng = rng_stream(seed, "simulate", config.kind.value)
    t0 = time.perf_counter()
    state = initial_state(config, rng)
    positions = np.empty((config.steps, config.n_particles, 3))
    actuation = np.zeros((config.steps, 3))
    for t in range(config.steps):
        positions[t] = state.positions
        if t == config.steps - 1:
            break
        accel = draw_actuation(config, rng)
        actuation[t] = accel
        state = advance(config, state, float(p[0]), accel)
    logger.debug("simulate env=%s %s=%.4f seed=%s steps=%s took=%.1fms", config.kind.value,
                 config.param_name, p[0], seed, config.steps, (time.perf_counter() - t0) * 1000)
    return Trajectory(
        env_kind=config.kind,
        params=p.astype(np.float32),
        grouping=state.grouping.astype(np.uint32),
        rigidness=state.rigidness.astype(bool),
        positions=positions.astype(np.float32),
        actuation=actuation.astype(np.float32),
    )
