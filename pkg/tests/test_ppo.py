import csv
import json

import numpy as np
import pytest
from bandit import ScriptedBandit
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_difference, gae_ref, relative_error

from gaplab.envmodel import build_catalog, default_distractor_pool
from gaplab.neuralnet import init_params
from gaplab.ppo import (
    Batch,
    NonFiniteLoss,
    PPOConfig,
    StateEncoder,
    Trajectory,
    clipped_surrogate,
    collect,
    compute_advantages,
    ppo_objective,
    ppo_update,
    run_episode,
    train,
    write_curve_csv,
    write_stats_jsonl,
)
from gaplab.simulator import LocalSimBackend, exhaustive_best_return

from conftest import DRUPAL

TUNED = {"lr": 3e-3, "adv_std_floor": 1.0, "target_kl": 0.05}


def _traj(rewards, values, dones=None):
    n = len(rewards)
    dones = dones if dones is not None else [0.0] * (n - 1) + [1.0]
    return Trajectory(np.zeros((n, 2)), np.zeros(n, dtype=np.int64), np.array(rewards, float),
                      np.zeros(n), np.array(values, float), np.array(dones, float))


def _random_batch(rng, p, n):
    states = rng.normal(size=(n, p.input_dim))
    actions = rng.integers(0, p.n_actions, size=n)
    return Batch(states, actions, rng.normal(-1.2, 0.3, size=n), rng.normal(size=n), rng.normal(size=n))


# -- rollouts ---------------------------------------------------------------

def test_collect_zero_and_lengths(small_env, rng):
    p = init_params(256, small_env.catalog.size, seed=0)
    assert collect(small_env, p, 0, rng) == []
    trajs = collect(small_env, p, 5, rng)
    assert all(1 <= len(t) <= 100 for t in trajs)


def test_greedy_rollouts_are_identical(small_env):
    p = init_params(256, small_env.catalog.size, seed=2)
    a = collect(small_env, p, 3, np.random.default_rng(0), greedy=True)
    b = collect(small_env, p, 3, np.random.default_rng(9), greedy=True)
    for x, y in zip(a, b):
        assert np.array_equal(x.actions, y.actions) and np.array_equal(x.rewards, y.rewards)


def test_head_size_must_match_catalog(small_env):
    with pytest.raises(ValueError):
        run_episode(small_env, init_params(256, 7), np.random.default_rng(0), StateEncoder())


# -- advantages -------------------------------------------------------------

def test_gae_single_terminal_step():
    adv, ret = compute_advantages(_traj([1.0], [0.0]), 0.99, 0.95, normalize=False)
    assert adv.tolist() == [1.0] and ret.tolist() == [1.0]


def test_gae_lambda_one_is_reward_to_go():
    r = [1.0, -2.0, 3.0, 0.5]
    adv, _ = compute_advantages(_traj(r, [0.0] * 4), 1.0, 1.0, normalize=False)
    np.testing.assert_allclose(adv, [2.5, 1.5, 3.5, 0.5], rtol=0, atol=1e-12)


def test_gae_two_step_hand_values():
    # delta_1 = 1 - 0.1 = 0.9; delta_0 = 1 + 0.5*0.1 - 0.2 = 0.85; A_0 = 0.85 + 0.25*0.9
    adv, ret = compute_advantages(_traj([1.0, 1.0], [0.2, 0.1]), 0.5, 0.5, normalize=False)
    np.testing.assert_allclose(adv, [1.075, 0.9], rtol=0, atol=1e-12)
    np.testing.assert_allclose(ret, [1.275, 1.0], rtol=0, atol=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 99))
def test_gae_matches_textbook_sum(rewards, gamma, lam, seed):
    values = np.random.default_rng(seed).normal(size=len(rewards)).tolist()
    adv, ret = compute_advantages(_traj(rewards, values), gamma, lam, normalize=False)
    a_ref, r_ref = gae_ref(rewards, values, gamma, lam)
    np.testing.assert_allclose(adv, a_ref, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(ret, r_ref, rtol=1e-9, atol=1e-9)


def test_normalization_and_floor():
    t = _traj([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    adv, _ = compute_advantages(t, 1.0, 1.0)
    assert abs(adv.mean()) < 1e-12 and abs(adv.std() - 1.0) < 1e-6
    raw, _ = compute_advantages(t, 1.0, 1.0, normalize=False)
    floored, _ = compute_advantages(t, 1.0, 1.0, std_floor=100.0)
    np.testing.assert_allclose(floored, (raw - raw.mean()) / 100.0)


def test_reward_scale_divides_rewards():
    a1, _ = compute_advantages(_traj([100.0, 200.0], [0.0, 0.0]), 0.9, 0.8, reward_scale=100.0, normalize=False)
    a2, _ = compute_advantages(_traj([1.0, 2.0], [0.0, 0.0]), 0.9, 0.8, normalize=False)
    np.testing.assert_allclose(a1, a2, rtol=0, atol=1e-12)


# -- objective --------------------------------------------------------------

def test_clip_arithmetic():
    assert clipped_surrogate(np.array([1.5]), np.array([1.0]), 0.2)[0] == pytest.approx(1.2)
    assert clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.2)[0] == pytest.approx(-0.8)


@given(st.floats(0.01, 5.0), st.floats(-10, 10), st.floats(0.05, 0.5))
def test_clip_never_exceeds_unclipped(ratio, adv, eps):
    assert clipped_surrogate(np.array([ratio]), np.array([adv]), eps)[0] <= ratio * adv + 1e-12


def test_first_minibatch_ratios_are_one(small_env):
    p = init_params(256, small_env.catalog.size, seed=0)
    trajs = collect(small_env, p, 4, np.random.default_rng(0))
    _, stats = ppo_update(p, trajs, PPOConfig(), np.random.default_rng(1))
    assert stats["first_ratio_dev"] < 1e-9


def _fd_check(p, batch, cfg):
    _, grads = ppo_objective(p, batch, cfg)

    def f(vec):
        return ppo_objective(p.from_vector(vec), batch, cfg, need_grad=False)[0]["objective"]

    return relative_error(grads.to_vector(), central_difference(f, p.to_vector()))


def test_objective_gradient_three_step_toy():
    rng = np.random.default_rng(0)
    p = init_params(4, 3, (5,), seed=0)
    batch = _random_batch(rng, p, 3)
    assert _fd_check(p, batch, PPOConfig(entropy_coef=0.05)) < 1e-4


@given(st.integers(0, 10_000))
def test_objective_gradient_random_nets(seed):
    rng = np.random.default_rng(seed)
    p = init_params(6, 5, (8, 4), seed=seed)
    p = p.from_vector(rng.normal(scale=0.5, size=p.to_vector().size))
    batch = _random_batch(rng, p, 7)
    # old log-probs are drawn independently, so ratios land on both sides of the clip
    assert _fd_check(p, batch, PPOConfig(entropy_coef=0.01)) < 1e-4


def test_objective_stats_keys():
    rng = np.random.default_rng(3)
    p = init_params(4, 3, (5,), seed=0)
    stats, _ = ppo_objective(p, _random_batch(rng, p, 6), PPOConfig())
    assert {"policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl"} <= set(stats)
    assert 0.0 <= stats["clip_frac"] <= 1.0


def test_non_finite_loss_raises(small_env):
    p = init_params(256, small_env.catalog.size, seed=0)
    trajs = collect(small_env, p, 2, np.random.default_rng(0))
    bad = p.with_arrays([a * np.nan if i == 0 else a for i, a in enumerate(p.arrays())])
    with pytest.raises(NonFiniteLoss):
        ppo_update(bad, trajs, PPOConfig(), np.random.default_rng(0))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        PPOConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        PPOConfig(gamma=1.5)
    cfg = PPOConfig(hidden=(32, 16), target_kl=0.02)
    assert PPOConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- training ---------------------------------------------------------------

def test_train_is_bit_reproducible(small_env):
    cfg = PPOConfig(episodes=24)
    a = train(small_env, cfg, seed=4)
    b = train(small_env, cfg, seed=4)
    assert a.learning_curve == b.learning_curve
    assert a.params.equals(b.params)
    c = train(small_env, cfg, seed=5)
    assert c.learning_curve != a.learning_curve


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bandit_greedy_picks_correct_exploit(seed):
    env = ScriptedBandit(correct=1)
    res = train(env, PPOConfig(episodes=200), seed)
    assert run_episode(env, res.params, None, StateEncoder(), greedy=True).actions.tolist() == [1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_learns_small_catalog(seed, drupal):
    env = LocalSimBackend(drupal, build_catalog([DRUPAL], default_distractor_pool(), 20, seed))
    best, _, _ = exhaustive_best_return(LocalSimBackend(drupal, build_catalog([DRUPAL], default_distractor_pool(), 8, seed)), 4)
    res = train(env, PPOConfig(**TUNED), seed)
    assert np.mean(res.learning_curve[-50:]) >= 0.8 * best


def test_warm_start_and_writers(small_env, tmp_path):
    p = init_params(256, small_env.catalog.size, seed=7)
    res = train(small_env, PPOConfig(episodes=8), seed=0, params=p)
    assert len(res.learning_curve) == 8 and len(res.episode_times) == 8
    write_curve_csv(res, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["episode", "return", "steps", "success"] and len(rows) == 9
    write_stats_jsonl(res, tmp_path / "s.jsonl")
    assert all(json.loads(line) for line in open(tmp_path / "s.jsonl"))
