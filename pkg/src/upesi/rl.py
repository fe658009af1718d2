"""TD3 for plain, domain-randomized and dynamics-conditioned (universal) policies.

The conditioning vector, when present, is appended to the observation for both
actor and critics and stays fixed for a whole episode.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import NoiseConfig, NoiseRanges, VecEnv, get_spec, sample_dynamics, ZERO_NOISE
from .nn import MLP, Adam, NonFiniteError, save_mlp, load_mlp

log = logging.getLogger(__name__)

VARIANTS = ("no_dr", "dr_only", "up_true_theta", "up_embedding")
CONDITIONING_SOURCES = ("none", "true_theta", "true_embedding", "bo_embedding", "osi_prediction")
HIDDEN = 128


def conditioning_dim(variant, theta_dim, latent_dim):
    if variant not in VARIANTS:
        raise ValueError(f"unknown policy variant {variant!r}")
    return {"no_dr": 0, "dr_only": 0, "up_true_theta": theta_dim, "up_embedding": latent_dim}[variant]


@dataclass
class TD3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    exploration_noise: float = 0.1
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    learning_rate: float = 3e-4
    start_steps: int = 1000  # uniform random actions before the first update
    max_steps: int = 1000  # control steps per episode
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.policy_delay < 1:
            raise ValueError("policy delay must be at least 1")


class ReplayBuffer:
    """FIFO ring buffer of ``(x, a, r, x', terminal)`` with uniform sampling."""

    def __init__(self, capacity, input_dim, act_dim, dtype=np.float32):
        self.capacity = int(capacity)
        self.x = np.zeros((self.capacity, input_dim), dtype=dtype)
        self.a = np.zeros((self.capacity, act_dim), dtype=dtype)
        self.r = np.zeros(self.capacity, dtype=dtype)
        self.x2 = np.zeros((self.capacity, input_dim), dtype=dtype)
        self.d = np.zeros(self.capacity, dtype=dtype)
        self.size = 0
        self.ptr = 0

    def __len__(self):
        return self.size

    def add(self, x, a, r, x2, terminal):
        x, a, x2 = np.atleast_2d(x), np.atleast_2d(a), np.atleast_2d(x2)
        r, terminal = np.atleast_1d(r), np.atleast_1d(terminal)
        for i in range(len(x)):
            j = self.ptr
            self.x[j], self.a[j], self.r[j], self.x2[j], self.d[j] = x[i], a[i], r[i], x2[i], terminal[i]
            self.ptr = (self.ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, batch_size):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.x[idx], self.a[idx], self.r[idx], self.x2[idx], self.d[idx]


class TD3Agent:
    """Actor, twin critics, their targets and optimizers."""

    def __init__(self, input_dim, act_dim, config=None, rng=None):
        self.config = config or TD3Config()
        dtype = np.dtype(self.config.dtype)
        rng = np.random.default_rng(rng)
        self.input_dim, self.act_dim = input_dim, act_dim
        sizes = [input_dim, HIDDEN, HIDDEN, HIDDEN, act_dim]
        csizes = [input_dim + act_dim, HIDDEN, HIDDEN, HIDDEN, 1]
        self.actor = MLP(sizes, "tanh", "tanh", rng=rng, dtype=dtype)
        self.critic1 = MLP(csizes, "relu", rng=rng, dtype=dtype)
        self.critic2 = MLP(csizes, "relu", rng=rng, dtype=dtype)
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        lr = self.config.learning_rate
        self.actor_opt = Adam(self.actor.n_params, lr, dtype=dtype)
        self.critic1_opt = Adam(self.critic1.n_params, lr, dtype=dtype)
        self.critic2_opt = Adam(self.critic2.n_params, lr, dtype=dtype)
        self.updates = 0

    def q_values(self, x, a):
        xa = np.hstack([x, a])
        return self.critic1.forward(xa)[:, 0], self.critic2.forward(xa)[:, 0]


def act(policy, obs, conditioning=None, exploration_noise_std=0.0, rng=None, bound=1.0):
    """Deterministic tanh action (scaled to ``bound``) plus optional clipped Gaussian noise."""
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    if conditioning is not None and np.size(conditioning):
        c = np.broadcast_to(np.asarray(conditioning, dtype=float), (x.shape[0], np.shape(conditioning)[-1]))
        x = np.hstack([x, c])
    actor = policy.actor if isinstance(policy, TD3Agent) else policy
    if x.shape[1] != actor.in_dim:
        raise ValueError(f"policy expects input width {actor.in_dim}, got {x.shape[1]}")
    a = bound * np.asarray(actor.forward(x), dtype=float)
    if exploration_noise_std > 0:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        a = np.clip(a + exploration_noise_std * bound * rng.standard_normal(a.shape), -bound, bound)
    return a[0] if np.ndim(obs) == 1 else a


def _polyak(target, source, tau):
    target.params *= 1.0 - tau
    target.params += tau * source.params


def td3_update(agent, batch, rng):
    """One TD3 step on a sampled batch; returns diagnostics."""
    cfg = agent.config
    x, a, r, x2, d = batch
    dt = agent.actor.dtype
    noise = np.clip(cfg.target_noise * rng.standard_normal(a.shape), -cfg.target_noise_clip,
                    cfg.target_noise_clip).astype(dt)
    a2 = np.clip(agent.actor_target.forward(x2) + noise, -1.0, 1.0)
    xa2 = np.hstack([x2, a2])
    q_next = np.minimum(agent.critic1_target.forward(xa2), agent.critic2_target.forward(xa2))[:, 0]
    y = (r + cfg.gamma * (1.0 - d) * q_next)[:, None]
    xa = np.hstack([x, a])
    losses = []
    for net, opt in ((agent.critic1, agent.critic1_opt), (agent.critic2, agent.critic2_opt)):
        q, acts = net.forward_cache(xa)
        diff = q - y
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise NonFiniteError(f"critic loss non-finite at update {agent.updates}")
        g, _ = net.backward(acts, (2.0 / len(diff)) * diff)
        opt.step(net.params, g)
        losses.append(loss)
    agent.updates += 1
    actor_loss = None
    if agent.updates % cfg.policy_delay == 0:
        pa, pacts = agent.actor.forward_cache(x)
        q, qacts = agent.critic1.forward_cache(np.hstack([x, pa]))
        actor_loss = -float(np.mean(q))
        if not np.isfinite(actor_loss):
            raise NonFiniteError(f"actor loss non-finite at update {agent.updates}")
        _, g_in = agent.critic1.backward(qacts, np.full_like(q, -1.0 / len(q)), want_input_grad=True,
                                         want_param_grad=False)
        g, _ = agent.actor.backward(pacts, g_in[:, agent.input_dim:])
        agent.actor_opt.step(agent.actor.params, g)
        _polyak(agent.actor_target, agent.actor, cfg.tau)
        _polyak(agent.critic1_target, agent.critic1, cfg.tau)
        _polyak(agent.critic2_target, agent.critic2, cfg.tau)
    return {"critic1": losses[0], "critic2": losses[1], "actor": actor_loss}


@dataclass
class TrainedPolicy:
    agent: TD3Agent
    variant: str
    env_kind: str
    episode_rewards: np.ndarray
    episode_lengths: np.ndarray
    conditioning_log: list = field(default_factory=list)

    def save(self, path, extra=None):
        meta = {"variant": self.variant, "env_kind": self.env_kind}
        meta.update(extra or {})
        save_mlp(path, self.agent.actor, meta)


def load_policy(path):
    actor, meta = load_mlp(path, with_metadata=True)
    return actor, meta


def _conditioning(variant, theta_norm, encoder):
    if variant in ("no_dr", "dr_only"):
        return np.zeros(0)
    if variant == "up_true_theta":
        return np.asarray(theta_norm, dtype=float)
    return np.asarray(encoder(theta_norm), dtype=float).ravel()


def train_policy(variant, env_kind, episodes, seed=0, encoder=None, ranges=None,
                 noise_ranges=None, config=None, log_conditioning=False, callback=None):
    """Train one policy variant for ``episodes`` episodes.

    ``encoder`` maps normalized theta to the embedding and is required exactly
    for ``up_embedding``; it is treated as frozen.
    """
    if (variant == "up_embedding") != (encoder is not None):
        raise ValueError("an encoder is required for up_embedding and only for it")
    spec = get_spec(env_kind)
    ranges = ranges or spec.ranges
    noise_ranges = noise_ranges or NoiseRanges()
    config = config or TD3Config()
    rng = np.random.default_rng(seed)
    cond_dim = len(_conditioning(variant, np.zeros(ranges.dim), encoder))
    agent = TD3Agent(spec.obs_dim + cond_dim, spec.act_dim, config, rng)
    dtype = agent.actor.dtype
    buf = ReplayBuffer(config.buffer_capacity, agent.input_dim, spec.act_dim, dtype)
    rewards, lengths, cond_log = [], [], []
    total_steps = 0
    for ep in range(episodes):
        if variant == "no_dr":
            theta, noise = ranges.midpoint, ZERO_NOISE
        else:
            theta, noise = sample_dynamics(ranges, rng), noise_ranges.sample(rng)
        theta_norm = ranges.normalize(theta)
        cond = _conditioning(variant, theta_norm, encoder).astype(dtype)
        env = VecEnv(env_kind, theta[None, :], noise, seed=rng.integers(2 ** 63), max_steps=config.max_steps)
        obs = env.reset().observation[0]
        ep_reward, steps = 0.0, 0
        while True:
            x = np.concatenate([obs, cond]).astype(dtype)
            if total_steps < config.start_steps:
                a = rng.uniform(-1.0, 1.0, spec.act_dim)
            else:
                a = act(agent.actor, x, None, config.exploration_noise, rng)
            res = env.step(a[None, :])
            obs2 = res.observation[0]
            buf.add(x, a, res.reward[0], np.concatenate([obs2, cond]), float(res.terminated[0]))
            if log_conditioning:
                cond_log.append((ep, cond.copy()))
            ep_reward += float(res.reward[0])
            steps += 1
            total_steps += 1
            if total_steps >= config.start_steps and len(buf) >= config.batch_size:
                td3_update(agent, buf.sample(rng, config.batch_size), rng)
            obs = obs2
            if res.done[0]:
                break
        rewards.append(ep_reward)
        lengths.append(steps)
        if callback is not None:
            callback(ep, ep_reward, steps)
    return TrainedPolicy(agent, variant, env_kind, np.array(rewards), np.array(lengths), cond_log)


@dataclass
class EvaluationResult:
    rewards: np.ndarray  # (n_theta, episodes_per_theta)
    theta_estimates: list = field(default_factory=list)

    @property
    def mean(self):
        return float(self.rewards.mean())

    @property
    def std(self):
        return float(self.rewards.std())


def evaluate(policy, env_kind, thetas, episodes_per_theta=10, conditioning_source="none",
             conditioning=None, osi=None, noises=None, seed=0, max_steps=1000, ranges=None):
    """Roll out a frozen policy on every theta; all episodes run as one batch.

    ``conditioning`` holds one vector per theta (true theta, true or fitted
    embedding).  With ``osi_prediction`` the conditioning is re-predicted at
    every step from a per-episode transition stack.  ``noises`` gives one
    NoiseConfig per theta.
    """
    if conditioning_source not in CONDITIONING_SOURCES:
        raise ValueError(f"unknown conditioning source {conditioning_source!r}")
    actor = policy.agent.actor if isinstance(policy, TrainedPolicy) else policy
    if isinstance(actor, TD3Agent):
        actor = actor.actor
    spec = get_spec(env_kind)
    ranges = ranges or spec.ranges
    thetas = np.atleast_2d(thetas)
    n_theta = len(thetas)
    idx = np.repeat(np.arange(n_theta), episodes_per_theta)
    noises = [ZERO_NOISE] * n_theta if noises is None else list(noises)
    env = VecEnv(env_kind, thetas[idx], [noises[i] for i in idx], seed=seed, max_steps=max_steps)
    obs = env.reset().observation
    total = np.zeros(len(idx))
    estimates = []
    stack = None
    if conditioning_source == "osi_prediction":
        from .osi import TransitionStack
        stack = TransitionStack(len(idx), spec.obs_dim, spec.act_dim)
        stack.reset(obs)
    elif conditioning_source != "none":
        cond = np.asarray(conditioning, dtype=float)[idx]
    while not np.all(env.done):
        if stack is not None:
            c = osi.predict(stack)
            estimates.append(c)
        elif conditioning_source == "none":
            c = None
        else:
            c = cond
        a = act(actor, obs, c)
        res = env.step(a)
        total += res.reward
        obs = res.observation
        if stack is not None:
            stack.push(a, obs)
    return EvaluationResult(total.reshape(n_theta, episodes_per_theta), estimates)
