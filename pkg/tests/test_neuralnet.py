import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_difference, log_softmax_ref, relative_error, straight_forward
from scipy import stats

from gaplab.neuralnet import (
    AdamState,
    ShapeMismatch,
    apply_update,
    backward,
    clip_by_global_norm,
    forward,
    init_params,
    load_checkpoint,
    log_softmax,
    policy_value,
    sample_action,
    save_checkpoint,
)


def test_default_architecture():
    p = init_params(256, 100)
    assert p.shapes() == [(256, 128), (128,), (128, 64), (64,), (64, 100), (100,), (64, 1), (1,)]
    assert p.input_dim == 256 and p.n_actions == 100 and p.hidden == (128, 64)


def test_init_is_seeded():
    assert init_params(16, 5, (8,), seed=3).equals(init_params(16, 5, (8,), seed=3))
    assert not init_params(16, 5, (8,), seed=3).equals(init_params(16, 5, (8,), seed=4))


def test_zero_params_give_zero_outputs():
    p = init_params(6, 4, (5, 3)).zeros_like()
    logits, v = policy_value(p, np.ones(6))
    assert not logits.any() and v == 0.0


def test_forward_matches_straight_line_reimplementation(rng):
    for seed in range(5):
        p = init_params(7, 4, (6, 5), seed=seed)
        p = p.from_vector(rng.normal(size=p.to_vector().size))
        x = rng.normal(size=7)
        logits, v = straight_forward(p.layers, p.actor, p.critic, x)
        cache = forward(p, x)
        np.testing.assert_allclose(cache.logits[0], logits, rtol=0, atol=1e-12)
        assert abs(cache.values[0] - v) < 1e-12
        l2, v2 = policy_value(p, x)
        np.testing.assert_allclose(l2, logits, rtol=0, atol=1e-12)
        assert abs(v2 - v) < 1e-12


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(init_params(4, 3, (2,)), np.ones(5))


def test_sampling_uniform_frequencies():
    rng = np.random.default_rng(0)
    counts = np.bincount([sample_action(np.zeros(4), rng)[0] for _ in range(100_000)], minlength=4)
    assert np.all(np.abs(counts / 100_000 - 0.25) < 0.02)


def test_sampling_chi_square():
    rng = np.random.default_rng(1)
    logits = np.array([1.0, -0.5, 0.3, 2.0, 0.0])
    probs = np.exp(log_softmax_ref(logits))
    n = 100_000
    counts = np.bincount([sample_action(logits, rng)[0] for _ in range(n)], minlength=5)
    assert stats.chisquare(counts, probs * n).pvalue > 0.01


def test_greedy_and_log_prob():
    rng = np.random.default_rng(2)
    assert sample_action(np.array([10.0, 0.0, 0.0]), rng, greedy=True)[0] == 0
    logits = rng.normal(size=7)
    a, lp = sample_action(logits, rng)
    assert abs(lp - log_softmax_ref(logits)[a]) < 1e-12


def test_gradient_of_square():
    # no hidden layers, one input of 1.0: V = w, objective V^2 has gradient 2w
    p = init_params(1, 2, hidden=(), seed=0)
    p = p.with_arrays([p.actor[0], p.actor[1], np.array([[3.0]]), np.array([0.0])])
    cache = forward(p, np.array([1.0]))
    g = backward(p, cache, np.zeros((1, 2)), 2.0 * cache.values)
    assert g.critic[0][0, 0] == 6.0


def test_zero_upstream_gives_zero_gradient(rng):
    p = init_params(5, 3, (4,), seed=1)
    cache = forward(p, rng.normal(size=(3, 5)))
    g = backward(p, cache, np.zeros((3, 3)), np.zeros(3))
    assert g.norm() == 0.0


@given(st.integers(0, 10_000))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_params(5, 4, (6, 3), seed=seed)
    p = p.from_vector(rng.normal(scale=0.5, size=p.to_vector().size))
    x = rng.normal(size=(4, 5))
    wl, wv = rng.normal(size=(4, 4)), rng.normal(size=4)

    def objective(vec):
        c = forward(p.from_vector(vec), x)
        return float(np.sum(wl * log_softmax(c.logits)) + np.sum(wv * c.values ** 2))

    cache = forward(p, x)
    lsm = log_softmax(cache.logits)
    probs = np.exp(lsm)
    dlogits = wl - probs * wl.sum(axis=1, keepdims=True)
    analytic = backward(p, cache, dlogits, 2.0 * wv * cache.values).to_vector()
    numeric = central_difference(objective, p.to_vector())
    assert relative_error(analytic, numeric) < 1e-4


def test_sgd_update_arithmetic_and_lr_zero():
    p = init_params(1, 2, hidden=(), seed=0)
    ones = p.from_vector(np.ones(p.to_vector().size))
    twos = ones.scale(2.0)
    out = apply_update(ones, twos, 0.1)
    np.testing.assert_allclose(out.to_vector(), 1.2, rtol=0, atol=1e-15)
    assert apply_update(ones, twos, 0.0).equals(ones)


@given(st.integers(0, 1000), st.floats(1e-4, 1.0))
def test_sgd_update_linearity(seed, lr):
    rng = np.random.default_rng(seed)
    p = init_params(3, 2, (2,), seed=seed)
    g1 = p.from_vector(rng.normal(size=p.to_vector().size))
    g2 = p.from_vector(rng.normal(size=p.to_vector().size))
    a = apply_update(p, g1 + g2, lr)
    b = apply_update(apply_update(p, g1, lr), g2, lr)
    np.testing.assert_allclose(a.to_vector(), b.to_vector(), rtol=0, atol=1e-12)


def test_adam_first_step_by_hand():
    p = init_params(1, 2, hidden=(), seed=0)
    ones = p.from_vector(np.ones(p.to_vector().size))
    g = ones.scale(2.0)
    st_ = AdamState()
    out = apply_update(ones, g, 0.1, "adam", st_)
    # m = 0.1*2 = 0.2, v = 0.001*4 = 0.004; corrected: m^ = 2, v^ = 4
    expected = 1.0 + 0.1 * 2.0 / (2.0 + 1e-8)
    np.testing.assert_allclose(out.to_vector(), expected, rtol=0, atol=1e-15)
    assert st_.t == 1
    with pytest.raises(ValueError):
        apply_update(ones, g, 0.1, "adam")
    with pytest.raises(ValueError):
        apply_update(ones, g, 0.1, "rmsprop")


def test_update_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        apply_update(init_params(3, 2, (2,)), init_params(3, 3, (2,)), 0.1)


def test_clip_by_global_norm():
    p = init_params(2, 2, (2,), seed=0)
    g = p.from_vector(np.full(p.to_vector().size, 3.0))
    c = clip_by_global_norm(g, 1.0)
    assert abs(c.norm() - 1.0) < 1e-12
    assert clip_by_global_norm(g, None) is g
    assert clip_by_global_norm(g, 1e9).equals(g)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(8, 5, (4, 3), seed=9)
    save_checkpoint(p, tmp_path / "a.ckpt", {"note": "x", "catalog": {"exploits": ["CVE-2018-7600"]}})
    q, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert q.equals(p)
    assert meta == {"note": "x", "catalog": {"exploits": ["CVE-2018-7600"]}}
    save_checkpoint(p, tmp_path / "b.ckpt", {"note": "x", "catalog": {"exploits": ["CVE-2018-7600"]}})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(b"junk")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.ckpt")
