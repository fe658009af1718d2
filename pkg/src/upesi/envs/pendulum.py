"""Cart with two stacked uniform rods, balanced upright.

State layout ``[x, phi1, phi2, xdot, omega1, omega2]``: ``phi1`` is the first
link's angle from vertical, ``phi2`` the second hinge angle relative to the
first link (both unwrapped).  All functions broadcast over leading batch
dimensions.
"""

import numpy as np

CART_MASS = 1.0  # kg
LINK_LINEAR_DENSITY = 1.0  # kg/m at density scale 1
FORCE_LIMIT = 12.0  # N
DT = 0.01
FRAME_SKIP = 5
OBS_DIM = 11
ACT_DIM = 1
STATE_DIM = 6
TIP_FALL_RATIO = 0.8  # done when tip height < ratio * (length1 + length2)

# reward coefficients
ALIVE_BONUS = 10.0
CART_PENALTY = 0.01
VELOCITY_PENALTY = 5e-3


def _unpack_theta(theta):
    theta = np.asarray(theta, dtype=float)
    damping, gravity, l1, l2, density = np.moveaxis(theta, -1, 0)
    m1 = density * l1 * LINK_LINEAR_DENSITY
    m2 = density * l2 * LINK_LINEAR_DENSITY
    return damping, gravity, l1, l2, m1, m2


def mass_matrix(state, theta):
    """Mass matrix in (x, absolute angle 1, absolute angle 2) coordinates."""
    _, _, l1, l2, m1, m2 = _unpack_theta(theta)
    state = np.asarray(state, dtype=float)
    t1 = state[..., 1]
    t2 = t1 + state[..., 2]
    a1, a2 = 0.5 * l1, 0.5 * l2
    M = np.empty(state.shape[:-1] + (3, 3))
    M[..., 0, 0] = CART_MASS + m1 + m2
    M[..., 0, 1] = M[..., 1, 0] = (m1 * a1 + m2 * l1) * np.cos(t1)
    M[..., 0, 2] = M[..., 2, 0] = m2 * a2 * np.cos(t2)
    M[..., 1, 1] = m1 * a1 ** 2 + m1 * l1 ** 2 / 12.0 + m2 * l1 ** 2
    M[..., 1, 2] = M[..., 2, 1] = m2 * l1 * a2 * np.cos(t1 - t2)
    M[..., 2, 2] = m2 * a2 ** 2 + m2 * l2 ** 2 / 12.0
    return M


def _terms(state, force, theta):
    """Mass matrix, damping matrix, damping-free generalized force, absolute rates."""
    state = np.asarray(state, dtype=float)
    force = np.asarray(force, dtype=float)
    damping, g, l1, l2, m1, m2 = _unpack_theta(theta)
    t1 = state[..., 1]
    t2 = t1 + state[..., 2]
    w1 = state[..., 4]
    w2 = w1 + state[..., 5]
    a1, a2 = 0.5 * l1, 0.5 * l2
    s1, s2, s12 = np.sin(t1), np.sin(t2), np.sin(t1 - t2)
    M = mass_matrix(state, theta)
    rhs = np.empty(M.shape[:-1])
    rhs[..., 0] = force + (m1 * a1 + m2 * l1) * s1 * w1 ** 2 + m2 * a2 * s2 * w2 ** 2
    rhs[..., 1] = -m2 * l1 * a2 * s12 * w2 ** 2 + g * (m1 * a1 + m2 * l1) * s1
    rhs[..., 2] = m2 * l1 * a2 * s12 * w1 ** 2 + g * m2 * a2 * s2
    # slider and both hinges share one damping coefficient; hinge rates are relative
    C = np.zeros_like(M)
    C[..., 0, 0] = damping
    C[..., 1, 1] = 2.0 * damping
    C[..., 1, 2] = C[..., 2, 1] = -damping
    C[..., 2, 2] = damping
    qd = np.stack([state[..., 3], w1, w2], axis=-1)
    return M, C, rhs, qd


def _to_relative(qd_abs):
    out = qd_abs.copy()
    out[..., 2] = qd_abs[..., 2] - qd_abs[..., 1]
    return out


def accelerations(state, force, theta):
    """Continuous-time accelerations ``[xddot, phi1ddot, phi2ddot]`` (relative hinge)."""
    M, C, rhs, qd = _terms(state, force, theta)
    rhs = rhs - np.einsum("...ij,...j->...i", C, qd)
    return _to_relative(np.linalg.solve(M, rhs[..., None])[..., 0])


def pendulum_step(state, force, theta, dt=DT):
    """One semi-implicit Euler substep; the damping term is taken implicitly."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    force = np.asarray(force, dtype=float)
    if np.any(np.abs(force) > FORCE_LIMIT + 1e-12):
        raise ValueError(f"force exceeds limit {FORCE_LIMIT} N")
    state = np.asarray(state, dtype=float)
    M, C, rhs, qd = _terms(state, force, theta)
    lhs = M + dt * C
    b = np.einsum("...ij,...j->...i", M, qd) + dt * rhs
    qd_new = np.linalg.solve(lhs, b[..., None])[..., 0]
    nxt = np.empty_like(state)
    nxt[..., 3:] = _to_relative(qd_new)
    nxt[..., :3] = state[..., :3] + dt * nxt[..., 3:]
    return nxt


def energy(state, theta):
    """Total mechanical energy; potential measured from the cart rail."""
    state = np.asarray(state, dtype=float)
    _, g, l1, l2, m1, m2 = _unpack_theta(theta)
    t1 = state[..., 1]
    t2 = t1 + state[..., 2]
    qd = np.stack([state[..., 3], state[..., 4], state[..., 4] + state[..., 5]], axis=-1)
    M = mass_matrix(state, theta)
    kinetic = 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)
    potential = g * (m1 * 0.5 * l1 * np.cos(t1) + m2 * (l1 * np.cos(t1) + 0.5 * l2 * np.cos(t2)))
    return kinetic + potential


def tip_height(state, theta):
    _, _, l1, l2, _, _ = _unpack_theta(theta)
    t1 = state[..., 1]
    t2 = t1 + state[..., 2]
    return l1 * np.cos(t1) + l2 * np.cos(t2)


def observe(state):
    """Noiseless emission: cart position, sines, cosines, velocities, 3 zero slots."""
    state = np.asarray(state, dtype=float)
    obs = np.zeros(state.shape[:-1] + (OBS_DIM,))
    t1 = state[..., 1]
    t2 = state[..., 2]
    obs[..., 0] = state[..., 0]
    obs[..., 1] = np.sin(t1)
    obs[..., 2] = np.sin(t2)
    obs[..., 3] = np.cos(t1)
    obs[..., 4] = np.cos(t2)
    obs[..., 5:8] = state[..., 3:6]
    return obs


def reward_done(state, action, theta):
    _, _, l1, l2, _, _ = _unpack_theta(theta)
    height = tip_height(state, theta)
    full = l1 + l2
    deficit = full - height
    reward = (ALIVE_BONUS - CART_PENALTY * state[..., 0] ** 2 - deficit ** 2
              - VELOCITY_PENALTY * (state[..., 4] ** 2 + state[..., 5] ** 2))
    done = height < TIP_FALL_RATIO * full
    return reward, done


def initial_state(rng, n=None, scale=0.05):
    size = (STATE_DIM,) if n is None else (n, STATE_DIM)
    return np.random.default_rng(rng).uniform(-scale, scale, size=size)
