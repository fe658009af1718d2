"""Seven point masses on a line joined by six actuated spring-dampers.

Actuation modulates each joint's rest length; anisotropic ground drag (stronger
when sliding backwards, scaled by gravity) turns body waves into forward
motion.  State layout ``[positions(7), velocities(7)]``.  Parameter layout
``[gravity, damping(6), stiffness(6)]``.
"""

import numpy as np

N_MASSES = 7
N_JOINTS = 6
MASS = 250.0  # kg per point mass
REST_LENGTH = 0.5  # m
ACTUATION_STROKE = 0.4  # fraction of rest length at |u| = 1
DRAG_FORWARD = 0.02  # s/m, per unit weight
DRAG_BACKWARD = 0.4
DT = 0.01
FRAME_SKIP = 4
OBS_DIM = 14
ACT_DIM = 6
STATE_DIM = 14
CONTROL_COST = 0.1


def _unpack_theta(theta):
    theta = np.asarray(theta, dtype=float)
    return theta[..., 0], theta[..., 1:7], theta[..., 7:13]


def spring_forces(state, torques, theta):
    """Tension in each joint (positive pulls the two masses together)."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(torques, dtype=float)
    _, damping, stiffness = _unpack_theta(theta)
    x, v = state[..., :N_MASSES], state[..., N_MASSES:]
    rest = REST_LENGTH * (1.0 + ACTUATION_STROKE * u)
    extension = np.diff(x, axis=-1) - rest
    return stiffness * extension + damping * np.diff(v, axis=-1)


def drag_forces(state, theta):
    gravity, _, _ = _unpack_theta(theta)
    v = np.asarray(state, dtype=float)[..., N_MASSES:]
    coeff = np.where(v > 0.0, DRAG_FORWARD, DRAG_BACKWARD)
    return -MASS * np.asarray(gravity)[..., None] * coeff * v


def accelerations(state, torques, theta):
    tension = spring_forces(state, torques, theta)
    force = drag_forces(state, theta)
    force[..., :-1] += tension
    force[..., 1:] -= tension
    return force / MASS


def chain_step(state, torques, theta, dt=DT):
    """One semi-implicit Euler substep."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    torques = np.asarray(torques, dtype=float)
    if torques.shape[-1] != N_JOINTS:
        raise ValueError(f"expected {N_JOINTS} torques, got shape {torques.shape}")
    if np.any(np.abs(torques) > 1.0 + 1e-12):
        raise ValueError("torques must lie in [-1, 1]")
    state = np.asarray(state, dtype=float)
    acc = accelerations(state, torques, theta)
    nxt = np.empty_like(state)
    nxt[..., N_MASSES:] = state[..., N_MASSES:] + dt * acc
    nxt[..., :N_MASSES] = state[..., :N_MASSES] + dt * nxt[..., N_MASSES:]
    return nxt


def energy(state, theta, torques=None):
    """Kinetic plus elastic energy (springs measured from their current rest lengths)."""
    state = np.asarray(state, dtype=float)
    _, _, stiffness = _unpack_theta(theta)
    u = np.zeros(state.shape[:-1] + (N_JOINTS,)) if torques is None else np.asarray(torques)
    x, v = state[..., :N_MASSES], state[..., N_MASSES:]
    extension = np.diff(x, axis=-1) - REST_LENGTH * (1.0 + ACTUATION_STROKE * u)
    return 0.5 * MASS * np.sum(v * v, axis=-1) + 0.5 * np.sum(stiffness * extension ** 2, axis=-1)


def com_velocity(state):
    return np.mean(np.asarray(state)[..., N_MASSES:], axis=-1)


def observe(state):
    """Positions relative to the centre of mass, then velocities."""
    state = np.asarray(state, dtype=float)
    x = state[..., :N_MASSES]
    obs = np.empty(state.shape[:-1] + (OBS_DIM,))
    obs[..., :N_MASSES] = x - x.mean(axis=-1, keepdims=True)
    obs[..., N_MASSES:] = state[..., N_MASSES:]
    return obs


def reward_done(state, action, theta):
    u = np.asarray(action, dtype=float)
    reward = com_velocity(state) - CONTROL_COST * np.sum(u * u, axis=-1)
    return reward, np.zeros(np.shape(reward), dtype=bool)


def rest_state(n=None):
    shape = (STATE_DIM,) if n is None else (n, STATE_DIM)
    s = np.zeros(shape)
    s[..., :N_MASSES] = REST_LENGTH * np.arange(N_MASSES)
    return s


def initial_state(rng, n=None, jitter=0.01):
    s = rest_state(n)
    rng = np.random.default_rng(rng)
    s[..., :N_MASSES] += rng.uniform(-jitter, jitter, size=s[..., :N_MASSES].shape)
    return s
