"""Observation text -> fixed-size state vector.

The default embedder is signed feature hashing: lowercase, split on
non-alphanumerics, hash each token with 64-bit FNV-1a (offset basis
0xcbf29ce484222325, prime 0x100000001b3), add +1 or -1 (top hash bit set
means -1) into bucket ``hash % d``, then L2-normalize.  Empty text maps to
the zero vector.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .simulator import Observation

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "hashing"  # hashing | external
    d: int = 256
    normalization: str = "l2"
    endpoint: str | None = None
    timeout: float = 30.0

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("embedding dimension must be positive")
        if self.kind not in ("hashing", "external"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.normalization != "l2":
            raise ValueError("only l2 normalization is supported")
        if self.kind == "external" and not self.endpoint:
            raise ValueError("external embedder needs an endpoint")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def fnv1a_64(token: str) -> int:
    return _kernels.fnv1a_64(token.encode("utf-8"))


def _l2(v: np.ndarray) -> np.ndarray:
    norm = float(np.sqrt(np.dot(v, v)))
    if norm > 0.0:
        v = v / norm
    return v


@lru_cache(maxsize=65536)
def _hashed(text: str, d: int) -> np.ndarray:
    tokens = [t.encode("utf-8") for t in tokenize(text)]
    if not tokens:
        out = np.zeros(d, dtype=np.float64)
    else:
        offsets = np.zeros(len(tokens) + 1, dtype=np.int64)
        np.cumsum([len(t) for t in tokens], out=offsets[1:])
        buf = np.frombuffer(b"".join(tokens), dtype=np.uint8)
        out = _l2(_kernels.hash_tokens(buf, offsets, d))
    out.flags.writeable = False
    return out


def embed(text: str, spec: EmbedderSpec | None = None) -> np.ndarray:
    spec = spec or EmbedderSpec()
    if spec.kind == "hashing":
        return _hashed(text, spec.d)
    return ExternalEmbedder(spec).embed_many([text])[0]


def embed_observation(obs: Observation, spec: EmbedderSpec | None = None) -> np.ndarray:
    return embed(obs.text, spec)


class ExternalEmbedder:
    """Vectors from an HTTP service: POST {"texts": [...]} -> {"vectors": [[...]]}."""

    def __init__(self, spec: EmbedderSpec, transport=None):
        self.spec = spec
        self.transport = transport

    def embed_many(self, texts: list[str]) -> list[np.ndarray]:
        import httpx

        with httpx.Client(timeout=self.spec.timeout, transport=self.transport) as client:
            try:
                resp = client.post(self.spec.endpoint, json={"texts": list(texts)})
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise EmbeddingError(f"embedding service failed: {exc}") from exc
        if len(vectors) != len(texts):
            raise EmbeddingError("embedding service returned wrong number of vectors")
        out = []
        for v in vectors:
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != (self.spec.d,):
                raise EmbeddingError(f"expected dimension {self.spec.d}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise EmbeddingError("non-finite embedding")
            out.append(_l2(arr))
        return out
