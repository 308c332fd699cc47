import numpy as np
import pytest

from mlr.envs import (EnvSpec, PixelCatch, PixelPendulum, TwoStateMDP, default_spec, make, registered,
                      wrap)
from mlr.errors import InvalidSpec, SteppedDoneEnv


def test_registry():
    assert {"pixel_pendulum", "pixel_catch"} <= set(registered())
    with pytest.raises(InvalidSpec):
        make("nope")
    assert default_spec("pixel_catch").discrete


def test_pendulum_energy_drift_without_torque():
    env = PixelPendulum(render_size=16)
    env.reset(seed=0)
    env.theta, env.omega = 2.0, 0.0
    e0 = env.energy()
    for _ in range(100):
        env.step([0.0])
        assert abs(env.energy() - e0) <= 0.01 * abs(e0)


def test_pendulum_reward_range_and_upright_max():
    env = PixelPendulum(render_size=16)
    env.reset(seed=0)
    env.theta, env.omega = 0.0, 0.0
    r, done = env.step([0.0])
    assert r == pytest.approx(1.0, abs=1e-3) and not done
    env.theta, env.omega = np.pi, 8.0
    r, _ = env.step([1.0])
    assert 0.0 <= r < 0.1


def test_catch_scripted_policy_is_perfect():
    env = PixelCatch(render_size=7, n_balls=5)
    env.reset(seed=3)
    total, done = 0.0, False
    while not done:
        _, col = env.ball
        action = 1 + int(np.sign(col - env.paddle))
        r, done = env.step(action)
        total += r
    assert total == 5.0


def test_catch_idle_policy_scores_match_columns():
    env = PixelCatch(render_size=7, n_balls=1)
    env.reset(seed=0)
    col = env.ball[1]
    done = False
    while not done:
        r, done = env.step(1)
    assert r == (1.0 if col == PixelCatch.grid // 2 else -1.0)


def test_observation_shape_and_range():
    env = make("pixel_pendulum", EnvSpec("pixel_pendulum", action_dim=1, size=(32, 32), frame_stack=3))
    obs = env.reset(seed=0)
    assert obs.shape == env.observation_shape == (9, 32, 32)
    assert obs.dtype == np.float32 and 0.0 <= obs.min() and obs.max() <= 1.0
    catch = make("pixel_catch", EnvSpec("pixel_catch", num_actions=3, size=(21, 21), frame_stack=4,
                                        grayscale=True))
    assert catch.reset(seed=0).shape == (4, 21, 21)


def test_action_repeat_counts_frames_and_truncates():
    env = make("pixel_pendulum", EnvSpec("pixel_pendulum", action_dim=1, size=(16, 16), action_repeat=4,
                                         max_episode_frames=10))
    env.reset(seed=0)
    _, _, done, info = env.step([0.0])
    assert env.env_steps == 4 and not done
    env.step([0.0])
    _, _, done, info = env.step([0.0])
    assert env.env_steps == 10 and done and info["truncated"] and not info["terminal"]
    with pytest.raises(SteppedDoneEnv):
        env.step([0.0])


def test_same_seed_same_rollout():
    def rollout():
        env = make("pixel_catch", EnvSpec("pixel_catch", num_actions=3, size=(14, 14), grayscale=True))
        obs = [env.reset(seed=7)]
        for a in [0, 2, 1, 1, 0, 2, 2]:
            o, r, d, _ = env.step(a)
            obs.append(o)
            if d:
                break
        return np.stack(obs)

    assert np.array_equal(rollout(), rollout())


def test_state_roundtrip_reproduces_future():
    env = make("pixel_pendulum", EnvSpec("pixel_pendulum", action_dim=1, size=(16, 16), frame_stack=2))
    env.reset(seed=1)
    env.step([0.3])
    state = env.get_state()
    a = [env.step([0.5])[0] for _ in range(3)]
    env.set_state(state)
    b = [env.step([0.5])[0] for _ in range(3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_wrap_rejects_incomplete_env():
    with pytest.raises(InvalidSpec):
        wrap(object(), EnvSpec("x", action_dim=1))
    with pytest.raises(InvalidSpec):
        EnvSpec("x")


def test_two_state_mdp_oracles():
    mdp = TwoStateMDP()
    assert np.allclose(mdp.value_iteration(continuous=True), [[0.0], [5.0]])
    assert np.allclose(mdp.value_iteration(), [[3.6, 4.5], [5.0, 3.8]])
