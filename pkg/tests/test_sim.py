import dataclasses

import numpy as np
import pytest

from pinfer.errors import ContractViolation
from pinfer.geometry import pairwise_distances
from pinfer.nn import rng_stream
from pinfer.sim import (
    EnvConfig,
    EnvKind,
    REST_STEPS,
    ParticleSystem,
    advance,
    container_bounds,
    density_residual,
    initial_state,
    rest_density,
    simulate,
    solve_density,
    spring_constant,
    step_fluidcube,
    step_massrope,
    step_rigidfall,
    xsph_coefficient,
)

DT = 1.0 / 60.0


def _rigid_error(state: ParticleSystem) -> float:
    worst = 0.0
    for obj, rest in state.rest_shapes.items():
        d = pairwise_distances(state.positions[state.indices(obj)])
        worst = max(worst, float(np.abs(d - pairwise_distances(rest)).max()))
    return worst


def _stack(seed: int = 0) -> tuple[EnvConfig, ParticleSystem]:
    cfg = EnvConfig.preset("rigidfall")
    return cfg, initial_state(cfg, rng_stream(seed, "simulate", "rigidfall"))


def _sampled_energies(cfg: EnvConfig, state: ParticleSystem, param: float, steps: int = 200):
    """Run unforced and return the final state plus kinetic energy at every 10th step."""
    energies = {}
    for t in range(1, steps + 1):
        state = advance(cfg, state, param, np.zeros(3))
        assert _rigid_error(state) < 1e-6
        if t % 10 == 0:
            energies[t] = state.kinetic_energy()
    return state, energies


def _assert_non_increasing_after_transient(energies: dict[int, float]):
    samples = [energies[t] for t in sorted(energies) if t >= 50]
    for prev, cur in zip(samples, samples[1:]):
        assert cur <= prev + 1e-12


@pytest.mark.parametrize("kind,scale,n,m", [
    ("rigidfall", "desk", 81, 3), ("rigidfall", "full", 192, 3),
    ("fluidcube", "desk", 152, 2), ("fluidcube", "full", 348, 2),
    ("massrope", "desk", 41, 2), ("massrope", "full", 95, 2),
])
def test_presets(kind, scale, n, m):
    cfg = EnvConfig.preset(kind, scale)
    assert (cfg.n_particles, cfg.n_objects) == (n, m)
    assert EnvConfig.from_dict(cfg.to_dict()) == cfg


def test_env_config_validation():
    with pytest.raises(ContractViolation):
        EnvConfig.preset("rigidfall", param_range=(-5.0, -15.0))
    with pytest.raises(ContractViolation):
        EnvConfig.preset("rigidfall", dt=0.0)
    with pytest.raises(ContractViolation):
        EnvConfig.preset("rigidfall", scale="huge")


def test_parameter_maps():
    assert spring_constant(0.25) == pytest.approx(50.0)
    assert spring_constant(1.2) == pytest.approx(240.0)
    assert xsph_coefficient(1.0) == pytest.approx(0.01)
    assert xsph_coefficient(100.0) == pytest.approx(0.2)


# -- RigidFall ------------------------------------------------------------------------------

def test_free_fall_matches_symplectic_sum():
    cfg = EnvConfig.preset("rigidfall", lattices=((3, 3, 3),))
    state = initial_state(cfg, rng_stream(0))
    state.positions[:, 1] += 10.0
    y0 = state.positions[:, 1].mean()
    g, k = -9.8, 25
    for _ in range(k):
        state = step_rigidfall(state, g, DT, contact_distance=cfg.spacing)
    expect = y0 + g * DT * DT * k * (k + 1) / 2
    assert state.positions[:, 1].mean() == pytest.approx(expect, abs=1e-9)


def test_cube_resting_on_ground_stays_above_it():
    cfg = EnvConfig.preset("rigidfall", lattices=((3, 3, 3),))
    state = initial_state(cfg, rng_stream(0))
    state.positions[:, 1] -= state.positions[:, 1].min()
    for _ in range(30):
        state = step_rigidfall(state, -9.8, DT, contact_distance=cfg.spacing)
        assert state.positions[:, 1].min() >= -1e-6


@pytest.mark.parametrize("seed", range(5))
def test_jittered_stack_comes_to_rest_without_interpenetration(seed):
    cfg, state = _stack(seed)
    state, energies = _sampled_energies(cfg, state, -9.8)
    assert np.linalg.norm(state.velocities, axis=1).max() < 1e-3
    assert state.positions[:, 1].min() >= -1e-4
    d = pairwise_distances(state.positions)
    other = state.grouping[:, None] != state.grouping[None, :]
    assert d[other].min() >= cfg.spacing - 1e-4
    _assert_non_increasing_after_transient(energies)


def test_resting_stack_stays_frozen():
    cfg, state = _stack(1)
    state, _ = _sampled_energies(cfg, state, -9.8, steps=120)
    assert state.asleep
    later = step_rigidfall(state, -9.8, DT, contact_distance=cfg.spacing)
    np.testing.assert_array_equal(later.positions, state.positions)
    assert later.kinetic_energy() == 0.0


def test_rigidfall_rejects_positive_gravity():
    cfg, state = _stack()
    with pytest.raises(ContractViolation):
        step_rigidfall(state, 1.0, DT)


# -- MassRope ------------------------------------------------------------------------------

def _hang(steps: int, stiffness: float = 1.2):
    cfg = EnvConfig.preset("massrope")
    state = initial_state(cfg, rng_stream(0))
    energies = []
    for _ in range(steps):
        state = step_massrope(state, stiffness, np.zeros(2), DT, substeps=cfg.substeps)
        energies.append(state.kinetic_energy())
    return cfg, state, energies


def test_anchor_follows_actuator_and_mass_stays_rigid():
    cfg = EnvConfig.preset("massrope")
    state = initial_state(cfg, rng_stream(0))
    rng = rng_stream(1)
    for _ in range(200):
        state = step_massrope(state, 0.6, rng.uniform(-3, 3, size=2), DT, substeps=cfg.substeps)
        np.testing.assert_array_equal(state.positions[0], state.external_position)
        assert _rigid_error(state) < 1e-6


def test_actuator_at_rest_keeps_anchor_in_place():
    _, state, _ = _hang(20)
    np.testing.assert_array_equal(state.positions[0], [0.0, 1.0, 0.0])


def test_actuator_rejects_vertical_acceleration():
    cfg = EnvConfig.preset("massrope")
    state = initial_state(cfg, rng_stream(0))
    with pytest.raises(ContractViolation):
        step_massrope(state, 0.6, [0.0, 1.0, 0.0], DT)


def test_hanging_rope_reaches_static_equilibrium():
    cfg, state, _ = _hang(1500)
    k = spring_constant(1.2)
    w = 0.02 * 9.8
    n_rope = cfg.counts[0]
    n_mass = cfg.counts[1]
    for j, (a, b) in enumerate(state.springs):
        below = n_mass + (n_rope - 1 - j) if j < n_rope - 1 else n_mass
        stretch = np.linalg.norm(state.positions[b] - state.positions[a]) - state.spring_rest[j]
        assert stretch == pytest.approx(below * w / k, rel=0.05)


def test_rope_kinetic_energy_decays_after_transient():
    _, _, energies = _hang(650)
    peaks = [max(energies[s:s + 100]) for s in range(50, 650, 100)]
    for prev, cur in zip(peaks, peaks[1:]):
        assert cur <= prev * 1.05


# -- FluidCube -----------------------------------------------------------------------------

def test_density_solve_reduces_residual_of_a_settling_step():
    cfg = EnvConfig.preset("fluidcube")
    state = initial_state(cfg, rng_stream(0))
    lo, hi = container_bounds(state.external_position, cfg.container_size)

    def clamp(p):
        return np.clip(p, lo, hi)

    x = clamp(state.positions + np.array([0.0, -9.8 * DT * DT, 0.0]))
    before = density_residual(x, state.masses)
    after = density_residual(solve_density(x, state.masses, cfg.iterations, clamp=clamp), state.masses)
    assert before > 0
    assert after < before


def test_rest_lattice_has_unit_interior_density():
    cfg = EnvConfig.preset("fluidcube")
    state = initial_state(cfg, rng_stream(0))
    assert state.masses[0] == pytest.approx(1.0 / rest_density())


def test_fluid_stays_inside_container():
    cfg = EnvConfig.preset("fluidcube")
    state = initial_state(cfg, rng_stream(0))
    rng = rng_stream(2)
    for _ in range(60):
        state = step_fluidcube(state, 50.0, rng.uniform(-2, 2), DT, container_size=cfg.container_size)
        lo, hi = container_bounds(state.external_position, cfg.container_size)
        assert np.all(state.positions >= lo - 1e-6)
        assert np.all(state.positions <= hi + 1e-6)
        assert _rigid_error(state) < 1e-6


def test_viscous_fluid_moves_less_under_same_shaking():
    cfg = EnvConfig.preset("fluidcube")
    accel = rng_stream(3).uniform(-2, 2, size=100)

    def fluid_energy(viscosity):
        state = initial_state(cfg, rng_stream(0))
        for a in accel:
            state = step_fluidcube(state, viscosity, a, DT, container_size=cfg.container_size)
        return state.kinetic_energy(objects=(0,))

    assert fluid_energy(100.0) < fluid_energy(1.0)


def test_unshaken_fluid_energy_decays_after_transient():
    cfg = EnvConfig.preset("fluidcube")
    state = initial_state(cfg, rng_stream(0, "simulate", "fluidcube"))
    state, energies = _sampled_energies(cfg, state, 50.0)
    _assert_non_increasing_after_transient(energies)
    lo, hi = container_bounds(state.external_position, cfg.container_size)
    assert np.all(state.positions >= lo - 1e-6) and np.all(state.positions <= hi + 1e-6)


def test_shaking_wakes_a_resting_fluid():
    cfg = EnvConfig.preset("fluidcube")
    state = initial_state(cfg, rng_stream(0))
    state = dataclasses.replace(state, rest_steps=REST_STEPS)
    still = step_fluidcube(state, 50.0, 0.0, DT, container_size=cfg.container_size)
    np.testing.assert_array_equal(still.positions, state.positions)
    shaken = step_fluidcube(state, 50.0, 2.0, DT, container_size=cfg.container_size)
    assert shaken.external_velocity[0] > 0
    assert not shaken.asleep


# -- simulate -------------------------------------------------------------------------------

@pytest.mark.parametrize("kind", [k.value for k in EnvKind])
def test_simulate_is_deterministic(kind):
    cfg = EnvConfig.preset(kind, steps=8)
    lo, hi = cfg.param_range
    p = [0.5 * (lo + hi)]
    a, b = simulate(cfg, p, 11), simulate(cfg, p, 11)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.actuation, b.actuation)
    assert a.positions.shape == (8, cfg.n_particles, 3)
    assert a.n_objects == cfg.n_objects
    assert a.positions.dtype == np.float32


def test_simulate_rejects_out_of_range_params():
    cfg = EnvConfig.preset("rigidfall", steps=4)
    with pytest.raises(ContractViolation):
        simulate(cfg, [-20.0], 0)
    with pytest.raises(ContractViolation):
        simulate(cfg, [-10.0, 1.0], 0)


def test_first_frame_is_initial_state():
    cfg = EnvConfig.preset("massrope", steps=3)
    traj = simulate(cfg, [0.8], 5)
    state = initial_state(cfg, rng_stream(5, "simulate", "massrope"))
    np.testing.assert_array_equal(traj.positions[0], state.positions.astype(np.float32))
    assert np.all(traj.actuation[-1] == 0)
    assert np.all(traj.actuation[:, 1] == 0)
