import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upesi.dynamics import DynamicsModel
from upesi.envs import PENDULUM_RANGES, NoiseConfig, sample_dynamics
from upesi.nn import NonFiniteError
from upesi.rl import (ReplayBuffer, TD3Agent, TD3Config, act, conditioning_dim, evaluate, td3_update,
                      train_policy)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(0.1, 1e3), bound=st.floats(0.1, 12.5))
def test_actions_within_bounds(seed, scale, bound):
    rng = np.random.default_rng(seed)
    agent = TD3Agent(11, 3, rng=rng)
    obs = scale * rng.standard_normal((16, 11))
    for noise in (0.0, 0.5):
        a = act(agent, obs, exploration_noise_std=noise, rng=rng, bound=bound)
        assert a.shape == (16, 3) and np.all(np.abs(a) <= bound)


def test_zero_policy_gives_zero_action():
    agent = TD3Agent(11, 2, rng=0)
    agent.actor.params[:] = 0.0
    np.testing.assert_array_equal(act(agent, np.ones(11)), np.zeros(2))
    with pytest.raises(ValueError):
        act(agent, np.ones(10))


def _batch(rng, n=32, input_dim=4, act_dim=1):
    return (rng.standard_normal((n, input_dim)).astype(np.float32),
            rng.uniform(-1, 1, (n, act_dim)).astype(np.float32),
            rng.standard_normal(n).astype(np.float32),
            rng.standard_normal((n, input_dim)).astype(np.float32),
            np.zeros(n, dtype=np.float32))


def test_unit_tau_copies_targets():
    rng = np.random.default_rng(0)
    agent = TD3Agent(4, 1, TD3Config(tau=1.0, policy_delay=1), rng=0)
    td3_update(agent, _batch(rng), rng)
    for net, tgt in ((agent.actor, agent.actor_target), (agent.critic1, agent.critic1_target),
                     (agent.critic2, agent.critic2_target)):
        np.testing.assert_array_equal(net.params, tgt.params)


def test_policy_and_targets_frozen_between_delays():
    rng = np.random.default_rng(1)
    agent = TD3Agent(4, 1, TD3Config(policy_delay=2), rng=1)
    actor0, target0 = agent.actor.params.copy(), agent.critic1_target.params.copy()
    critic0 = agent.critic1.params.copy()
    info = td3_update(agent, _batch(rng), rng)
    assert info["actor"] is None
    np.testing.assert_array_equal(agent.actor.params, actor0)
    np.testing.assert_array_equal(agent.critic1_target.params, target0)
    assert np.any(agent.critic1.params != critic0)
    info = td3_update(agent, _batch(rng), rng)
    assert info["actor"] is not None and np.any(agent.actor.params != actor0)


def test_terminal_single_step_values_converge_to_reward():
    rng = np.random.default_rng(2)
    agent = TD3Agent(3, 1, rng=2)
    x = np.ones((64, 3), dtype=np.float32)
    r = np.full(64, 1.5, dtype=np.float32)
    done = np.ones(64, dtype=np.float32)
    for _ in range(5000):
        a = rng.uniform(-1, 1, (64, 1)).astype(np.float32)
        td3_update(agent, (x, a, r, x, done), rng)
    q1, q2 = agent.q_values(x[:20], np.linspace(-1, 1, 20, dtype=np.float32)[:, None])
    assert np.max(np.abs(q1 - 1.5)) < 1e-2 and np.max(np.abs(q2 - 1.5)) < 1e-2


def test_non_finite_loss_aborts():
    rng = np.random.default_rng(3)
    agent = TD3Agent(4, 1, rng=3)
    x, a, r, x2, d = _batch(rng)
    r[0] = np.nan
    with pytest.raises(NonFiniteError):
        td3_update(agent, (x, a, r, x2, d), rng)


def test_replay_buffer_is_fifo():
    buf = ReplayBuffer(3, 1, 1)
    for i in range(5):
        buf.add([float(i)], [0.0], float(i), [float(i)], 0.0)
    assert len(buf) == 3
    assert sorted(buf.r.tolist()) == [2.0, 3.0, 4.0]
    assert sorted(buf.sample(np.random.default_rng(0), 100)[2].tolist())[0] == 2.0
    with pytest.raises(ValueError):
        ReplayBuffer(2, 1, 1).sample(np.random.default_rng(0), 1)


def test_config_validation_and_variants():
    with pytest.raises(ValueError):
        TD3Config(gamma=1.0)
    with pytest.raises(ValueError):
        TD3Config(tau=0.0)
    assert conditioning_dim("up_true_theta", 5, 2) == 5
    assert conditioning_dim("up_embedding", 5, 2) == 2
    with pytest.raises(ValueError):
        conditioning_dim("oracle", 5, 2)
    with pytest.raises(ValueError):
        train_policy("up_embedding", "pendulum", 1)
    with pytest.raises(ValueError):
        train_policy("dr_only", "pendulum", 1, encoder=lambda t: t)


def test_embedding_conditioning_equals_encoder_output():
    model = DynamicsModel(11, 1, 5, 2, rng=0)
    seen = []

    def encoder(theta_norm):
        alpha = model.encode(theta_norm)
        seen.append(alpha.copy())
        return alpha

    cfg = TD3Config(start_steps=10_000, max_steps=20)
    pol = train_policy("up_embedding", "pendulum", 4, seed=0, encoder=encoder, config=cfg, log_conditioning=True)
    per_episode = {}
    for ep, c in pol.conditioning_log:
        per_episode.setdefault(ep, c)
        np.testing.assert_array_equal(c, per_episode[ep])
    # the first call only sizes the input
    for ep, c in per_episode.items():
        np.testing.assert_array_equal(c, seen[ep + 1].astype(np.float32))
    assert pol.agent.input_dim == 13


def test_evaluate_shape_and_determinism():
    agent = TD3Agent(11 + 5, 1, rng=4)
    th = sample_dynamics(PENDULUM_RANGES, 0, 3)
    cond = PENDULUM_RANGES.normalize(th)
    noises = [NoiseConfig(0.02, 0.01, 1)] * 3
    kw = dict(episodes_per_theta=4, conditioning_source="true_theta", conditioning=cond, noises=noises,
              seed=7, max_steps=50)
    a = evaluate(agent, "pendulum", th, **kw)
    b = evaluate(agent, "pendulum", th, **kw)
    assert a.rewards.shape == (3, 4)
    np.testing.assert_array_equal(a.rewards, b.rewards)
    assert a.mean == pytest.approx(a.rewards.mean()) and a.std == pytest.approx(a.rewards.std())
    with pytest.raises(ValueError):
        evaluate(agent, "pendulum", th, conditioning_source="psychic")
