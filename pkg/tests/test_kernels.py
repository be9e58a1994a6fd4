import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaplab import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not importable")


def _pack(tokens):
    data = [t.encode() for t in tokens]
    buf = np.frombuffer(b"".join(data) or b"\0", dtype=np.uint8)
    offsets = np.concatenate([[0], np.cumsum([len(x) for x in data])]).astype(np.int64)
    return buf, offsets


def test_fnv1a_known_values():
    # published FNV-1a 64-bit test vectors
    assert K.fnv1a_64(b"") == 0xCBF29CE484222325
    assert K.fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert K.fnv1a_64(b"foobar") == 0x85944171F73967E8


@needs_numba
@given(st.lists(st.text(alphabet="abcdefghij0123456789", min_size=1, max_size=12), max_size=40), st.sampled_from([8, 256]))
def test_hash_tokens_paths_agree(tokens, d):
    buf, offsets = _pack(tokens)
    assert np.array_equal(K._hash_tokens_py(buf, offsets, d), K._hash_tokens_nb(buf, offsets, np.int64(d)))


@needs_numba
@given(st.integers(0, 10_000), st.integers(1, 60))
def test_float_kernels_paths_agree(seed, n):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n) * 10, rng.normal(size=n)
    nv = np.append(v[1:], 0.0)
    dones = (rng.random(n) < 0.2).astype(np.float64)
    np.testing.assert_allclose(K._gae_py(r, v, nv, dones, 0.99, 0.95), K._gae_nb(r, v, nv, dones, 0.99, 0.95), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(K._discounted_py(r, 0.9), K._discounted_nb(r, 0.9), rtol=1e-12, atol=1e-12)
    logits = rng.normal(size=n) * 3
    for u in rng.random(5):
        assert K._sample_py(logits, u) == K._sample_nb(logits, u)


def test_sample_edge_cases():
    logits = np.array([0.0, 0.0, 0.0, 0.0])
    assert K.sample_categorical(logits, 0.0) == 0
    assert K.sample_categorical(logits, 0.9999999) == 3
    assert K.sample_categorical(np.array([-1e3, 0.0, -1e3]), 0.5) == 1


def _run(code, disable):
    env = dict(os.environ)
    env.pop("GAPLAB_DISABLE_NUMBA", None)
    if disable:
        env["GAPLAB_DISABLE_NUMBA"] = "1"
    return subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True, env=env).stdout.strip()


def test_disable_flag_selects_numpy_path():
    assert _run("from gaplab import _kernels as K; print(K.backend())", True) == "numpy"
    if K.HAS_NUMBA:
        assert _run("from gaplab import _kernels as K; print(K.backend())", False) == "numba"


@needs_numba
def test_training_is_identical_on_both_paths():
    code = (
        "from gaplab.envmodel import *; from gaplab.simulator import LocalSimBackend; from gaplab.ppo import PPOConfig, train\n"
        "env = LocalSimBackend(load_bundled_environment('CVE-2018-7600'), build_catalog(['CVE-2018-7600'], default_distractor_pool(), 10, 0))\n"
        "print(train(env, PPOConfig(episodes=20), 3).learning_curve)"
    )
    assert _run(code, True) == _run(code, False)
