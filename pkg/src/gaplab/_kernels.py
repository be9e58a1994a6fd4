"""Hot numeric kernels with an optional numba path.

Every kernel exists twice: a plain numpy/python implementation and the same
loop compiled with ``numba.njit``.  Set ``GAPLAB_DISABLE_NUMBA=1`` before
import to force the pure-numpy path (useful for debugging and for the
benchmark in ``benchmarks/bench_kernels.py``).  Both paths perform the same
floating point operations in the same order, so results agree bit-for-bit
on the integer kernels and to rounding on the float ones.
"""

from __future__ import annotations

import os

import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)

_DISABLED = os.environ.get("GAPLAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("numba disabled by GAPLAB_DISABLE_NUMBA")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# pure python / numpy reference implementations

def _fnv1a_py(data: np.ndarray) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= int(byte)
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _hash_tokens_py(buf: np.ndarray, offsets: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros(d, dtype=np.float64)
    for i in range(offsets.shape[0] - 1):
        h = _fnv1a_py(buf[offsets[i]:offsets[i + 1]])
        sign = -1.0 if (h >> 63) & 1 else 1.0
        out[h % d] += sign
    return out


def _gae_py(rewards, values, next_values, dones, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n, dtype=np.float64)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


def _discounted_py(rewards, gamma):
    n = rewards.shape[0]
    out = np.zeros(n, dtype=np.float64)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _sample_py(logits, u):
    m = logits.max()
    z = np.exp(logits - m)
    total = z.sum()
    target = u * total
    acc = 0.0
    idx = logits.shape[0] - 1
    for i in range(logits.shape[0]):
        acc += z[i]
        if acc > target:
            idx = i
            break
    return idx


# ---------------------------------------------------------------------------
# numba versions (same loops)

if HAS_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _fnv1a_nb(data):
        h = np.uint64(0xCBF29CE484222325)
        prime = np.uint64(0x100000001B3)
        for i in range(data.shape[0]):
            h = h ^ np.uint64(data[i])
            h = h * prime
        return h

    @numba.njit(cache=True, nogil=True)
    def _hash_tokens_nb(buf, offsets, d):
        out = np.zeros(d, dtype=np.float64)
        prime = np.uint64(0x100000001B3)
        for i in range(offsets.shape[0] - 1):
            h = np.uint64(0xCBF29CE484222325)
            for j in range(offsets[i], offsets[i + 1]):
                h = h ^ np.uint64(buf[j])
                h = h * prime
            if (h >> np.uint64(63)) & np.uint64(1):
                sign = -1.0
            else:
                sign = 1.0
            out[np.int64(h % np.uint64(d))] += sign
        return out

    @numba.njit(cache=True, nogil=True)
    def _gae_nb(rewards, values, next_values, dones, gamma, lam):
        n = rewards.shape[0]
        adv = np.zeros(n, dtype=np.float64)
        last = 0.0
        for t in range(n - 1, -1, -1):
            nonterminal = 1.0 - dones[t]
            delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
            last = delta + gamma * lam * nonterminal * last
            adv[t] = last
        return adv

    @numba.njit(cache=True, nogil=True)
    def _discounted_nb(rewards, gamma):
        n = rewards.shape[0]
        out = np.zeros(n, dtype=np.float64)
        acc = 0.0
        for t in range(n - 1, -1, -1):
            acc = rewards[t] + gamma * acc
            out[t] = acc
        return out

    @numba.njit(cache=True, nogil=True)
    def _sample_nb(logits, u):
        m = logits.max()
        z = np.exp(logits - m)
        total = z.sum()
        target = u * total
        acc = 0.0
        idx = logits.shape[0] - 1
        for i in range(logits.shape[0]):
            acc += z[i]
            if acc > target:
                idx = i
                break
        return idx


# ---------------------------------------------------------------------------
# public entry points

def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a of a byte string."""
    arr = np.frombuffer(data, dtype=np.uint8)
    if HAS_NUMBA:
        return int(_fnv1a_nb(arr))
    return _fnv1a_py(arr)


def hash_tokens(buf: np.ndarray, offsets: np.ndarray, d: int) -> np.ndarray:
    """Signed bucket counts for tokens packed as ``buf[offsets[i]:offsets[i+1]]``."""
    if HAS_NUMBA:
        return _hash_tokens_nb(buf, offsets, np.int64(d))
    return _hash_tokens_py(buf, offsets, d)


def gae(rewards, values, next_values, dones, gamma: float, lam: float) -> np.ndarray:
    args = (
        np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(next_values, dtype=np.float64),
        np.ascontiguousarray(dones, dtype=np.float64),
        float(gamma),
        float(lam),
    )
    if HAS_NUMBA:
        return _gae_nb(*args)
    return _gae_py(*args)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    r = np.ascontiguousarray(rewards, dtype=np.float64)
    if HAS_NUMBA:
        return _discounted_nb(r, float(gamma))
    return _discounted_py(r, float(gamma))


def sample_categorical(logits: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from softmax(logits) given a uniform ``u`` in [0, 1)."""
    lg = np.ascontiguousarray(logits, dtype=np.float64)
    if HAS_NUMBA:
        return int(_sample_nb(lg, float(u)))
    return int(_sample_py(lg, float(u)))


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
