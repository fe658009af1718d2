"""Batched environments with observation noise, observation delay and action noise."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import chain, pendulum
from .params import DEFAULT_RANGES


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    obs_dim: int
    act_dim: int
    state_dim: int
    dt: float
    frame_skip: int
    module: object

    @property
    def ranges(self):
        return DEFAULT_RANGES[self.kind]

    @property
    def theta_dim(self):
        return self.ranges.dim


SPECS = {
    "pendulum": EnvSpec("pendulum", pendulum.OBS_DIM, pendulum.ACT_DIM, pendulum.STATE_DIM,
                        pendulum.DT, pendulum.FRAME_SKIP, pendulum),
    "chain": EnvSpec("chain", chain.OBS_DIM, chain.ACT_DIM, chain.STATE_DIM,
                     chain.DT, chain.FRAME_SKIP, chain),
}


def get_spec(kind):
    try:
        return SPECS[kind]
    except KeyError:
        raise ValueError(f"unknown environment kind {kind!r}") from None


@dataclass
class NoiseConfig:
    observation_noise_std: object = 0.0  # scalar or one value per observation dimension
    action_noise_std: float = 0.0
    observation_delay_steps: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.observation_noise_std) < 0) or self.action_noise_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if int(self.observation_delay_steps) != self.observation_delay_steps or self.observation_delay_steps < 0:
            raise ValueError("observation delay must be a non-negative integer")
        self.observation_delay_steps = int(self.observation_delay_steps)


ZERO_NOISE = NoiseConfig()


@dataclass
class NoiseRanges:
    observation_noise_std: tuple = (0.0, 0.05)
    action_noise_std: tuple = (0.0, 0.05)
    observation_delay_steps: tuple = (0, 1, 2)

    def sample(self, rng):
        rng = np.random.default_rng(rng)
        lo, hi = self.observation_noise_std
        obs_std = lo + (hi - lo) * rng.random()
        lo, hi = self.action_noise_std
        act_std = lo + (hi - lo) * rng.random()
        delay = int(rng.choice(np.asarray(self.observation_delay_steps)))
        return NoiseConfig(obs_std, act_std, delay)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: object
    done: object
    terminated: object = None
    info: dict = field(default_factory=dict)


class VecEnv:
    """``n`` independent copies of one environment kind stepped together.

    Each copy has its own dynamics parameters and noise settings.  Copies that
    are done stop advancing; their rewards are zero until the next reset.
    """

    def __init__(self, kind, thetas, noises=ZERO_NOISE, seed=None, max_steps=1000):
        self.spec = get_spec(kind)
        self.kind = kind
        self.module = self.spec.module
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self.spec.theta_dim:
            raise ValueError(f"{kind} expects {self.spec.theta_dim} dynamics parameters, got {thetas.shape[1]}")
        self.thetas = thetas
        self.n = thetas.shape[0]
        if isinstance(noises, NoiseConfig):
            noises = [noises] * self.n
        if len(noises) != self.n:
            raise ValueError("need one NoiseConfig per environment copy")
        self.noises = list(noises)
        self.obs_std = np.stack([np.broadcast_to(np.asarray(nc.observation_noise_std, dtype=float),
                                                 (self.spec.obs_dim,)) for nc in noises])
        self.act_std = np.array([nc.action_noise_std for nc in noises], dtype=float)
        self.delay = np.array([nc.observation_delay_steps for nc in noises], dtype=int)
        self.max_steps = int(max_steps)
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.done = np.ones(self.n, dtype=bool)
        self.aborted = np.zeros(self.n, dtype=bool)
        self.t = 0

    def _emit(self, clean):
        self.history.append(clean)
        lag = np.minimum(self.delay, len(self.history) - 1)
        hist = list(self.history)
        delayed = np.stack([hist[-1 - lag[i]][i] for i in range(self.n)]) if np.any(lag) else clean
        noise = self.rng.standard_normal(clean.shape) * self.obs_std
        return delayed + noise

    def reset(self):
        self.state = self.module.initial_state(self.rng, self.n)
        self.done = np.zeros(self.n, dtype=bool)
        self.aborted = np.zeros(self.n, dtype=bool)
        self.t = 0
        self.history = deque(maxlen=int(self.delay.max(initial=0)) + 1)
        obs = self._emit(self.module.observe(self.state))
        self.last_obs = obs
        return StepResult(obs, np.zeros(self.n), self.done.copy(), self.done.copy())

    def clean_observation(self):
        return self.module.observe(self.state)

    def step(self, actions):
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        if np.all(self.done):
            raise RuntimeError("step() called after every copy is done")
        actions = np.asarray(actions, dtype=float).reshape(self.n, self.spec.act_dim)
        noisy = actions + self.rng.standard_normal(actions.shape) * self.act_std[:, None]
        noisy = np.clip(noisy, -1.0, 1.0)
        active = ~self.done
        state = self.state
        if self.kind == "pendulum":
            control = pendulum.FORCE_LIMIT * noisy[:, 0]
            stepper = pendulum.pendulum_step
        else:
            control = noisy
            stepper = chain.chain_step
        with np.errstate(all="ignore"):
            for _ in range(self.spec.frame_skip):
                state = stepper(state, control, self.thetas, self.spec.dt)
        finite = np.all(np.isfinite(state), axis=1)
        newly_aborted = active & ~finite
        state = np.where(active[:, None] & finite[:, None], state, self.state)
        reward, terminated = self.module.reward_done(state, noisy, self.thetas)
        reward = np.where(active, reward, 0.0)
        terminated = (terminated | newly_aborted) & active
        self.state = state
        self.aborted |= newly_aborted
        self.t += 1
        truncated = active & ~terminated & (self.t >= self.max_steps)
        obs = self._emit(self.module.observe(state))
        obs = np.where(active[:, None], obs, self.last_obs)
        self.last_obs = obs
        self.done = self.done | terminated | truncated
        return StepResult(obs, reward, self.done.copy(), terminated,
                          {"truncated": truncated, "active": active, "aborted": newly_aborted})


class Env:
    """Single environment instance: thin wrapper around a one-copy VecEnv."""

    def __init__(self, kind, theta, noise=ZERO_NOISE, seed=None, max_steps=1000):
        self.vec = VecEnv(kind, np.asarray(theta, dtype=float)[None, :], noise, seed, max_steps)
        self.spec = self.vec.spec
        self.kind = kind
        self.theta = self.vec.thetas[0]
        self.noise = noise

    @property
    def state(self):
        return self.vec.state[0]

    @state.setter
    def state(self, value):
        self.vec.state = np.asarray(value, dtype=float)[None, :].copy()

    @property
    def done(self):
        return bool(self.vec.done[0])

    def reset(self):
        r = self.vec.reset()
        return StepResult(r.observation[0], 0.0, False, False)

    def step(self, action):
        if self.vec.state is not None and self.done:
            raise RuntimeError("step() after episode end; call reset()")
        r = self.vec.step(np.asarray(action, dtype=float)[None, :])
        info = {k: bool(v[0]) for k, v in r.info.items()}
        return StepResult(r.observation[0], float(r.reward[0]), bool(r.done[0]),
                          bool(r.terminated[0]), info)


def reset(env_kind, theta, seed=None, noise=ZERO_NOISE, max_steps=1000):
    """Create an environment, reset it, and return ``(env, first StepResult)``."""
    env = Env(env_kind, theta, noise, seed, max_steps)
    return env, env.reset()


def step(env, action):
    return env.step(action)
