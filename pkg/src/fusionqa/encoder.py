"""Text embedding providers, QA context vectors and node relevance scores."""
from __future__ import annotations

import hashlib
import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class EncoderTransportError(RuntimeError):
    """The embedding service could not be reached or answered badly."""


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True)
class HashEncoderConfig:
    dim: int = 128
    seed: int = 0
    orders: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError("hash encoder dimension must be >= 8")
        if not self.orders or min(self.orders) < 1:
            raise ValueError("n-gram orders must be positive")


def _gram_hash(gram: str, key: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest(), "little")


def hash_embed(text: str, cfg: HashEncoderConfig = HashEncoderConfig()) -> np.ndarray:
    """Signed feature hashing of lowercased character n-grams, L2-normalized.

    Each n-gram's keyed 64-bit BLAKE2b hash picks the coordinate (hash mod dim)
    and the sign (top bit). Texts without n-grams map to the first basis vector.
    """
    key = cfg.seed.to_bytes(8, "little", signed=True)
    s = text.lower()
    vec = np.zeros(cfg.dim)
    for n in cfg.orders:
        for i in range(len(s) - n + 1):
            h = _gram_hash(s[i:i + n], key)
            vec[h % cfg.dim] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        return vec
    return vec / norm


class HashEncoder:
    """Deterministic in-process provider. Memoizes by text."""

    def __init__(self, cfg: HashEncoderConfig = HashEncoderConfig()):
        self.cfg = cfg
        self.dim = cfg.dim
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, t in enumerate(texts):
            v = self._cache.get(t)
            if v is None:
                v = self._cache[t] = hash_embed(t, self.cfg)
            out[i] = v
        return out


class RemoteEncoder:
    """Client for ``POST {url}/embed`` returning ``{"vectors": [...], "dim": d}``."""

    def __init__(self, url: str, dim: int | None = None, timeout: float = 30.0, max_batch: int = 64):
        self.url = url.rstrip("/") + "/embed"
        self.timeout = timeout
        self.max_batch = max_batch
        self.dim = dim if dim is not None else self._probe_dim()

    def _probe_dim(self) -> int:
        return int(self._post(["probe"])[1])

    def _post(self, texts: list[str]) -> tuple[list, int]:
        body = json.dumps({"texts": texts}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise EncoderTransportError(
                f"{self.url} answered HTTP {exc.code}; check the service and retry"
            ) from None
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise EncoderTransportError(f"{self.url} unreachable ({exc}); retry later") from None
        except json.JSONDecodeError:
            raise EncoderTransportError(f"{self.url} returned invalid JSON; retry later") from None
        vectors, dim = payload.get("vectors"), payload.get("dim")
        if not isinstance(vectors, list) or len(vectors) != len(texts) or not isinstance(dim, int):
            raise EncoderTransportError(f"{self.url} returned a malformed payload")
        return vectors, dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for start in range(0, len(texts), self.max_batch):
            vectors, dim = self._post(list(texts[start:start + self.max_batch]))
            if dim != self.dim:
                raise EncoderTransportError(f"dimension changed from {self.dim} to {dim}")
            rows.extend(vectors)
        return np.asarray(rows, dtype=np.float64).reshape(len(texts), self.dim)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > 1e-6:
        logger.warning("provider returned a vector of norm %.6g; renormalizing", norm)
        if norm == 0.0:
            out = np.zeros_like(v)
            out[0] = 1.0
            return out
        return v / norm
    return v


def context_text(stem: str, choice: str, fused: str | None = None, separator: str = " / ") -> str:
    return fused if fused else stem + separator + choice


def embed_context(stem: str, choice: str, fused: str | None, provider: EmbeddingProvider) -> np.ndarray:
    """QA context vector of the fused text, or of ``stem / choice`` without facts."""
    return _unit(np.asarray(provider.embed([context_text(stem, choice, fused)])[0], dtype=np.float64))


def node_text(name: str) -> str:
    return name.replace("_", " ")


def relevance_scores(context: str, names: Sequence[str], provider: EmbeddingProvider) -> np.ndarray:
    """Rescaled cosine ``(cos + 1) / 2`` between the context and each node name."""
    if not names:
        return np.zeros(0)
    vecs = np.asarray(provider.embed([context] + [node_text(n) for n in names]), dtype=np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    norms[norms == 0.0] = 1.0
    vecs = vecs / norms[:, None]
    cos = vecs[1:] @ vecs[0]
    return np.clip((cos + 1.0) / 2.0, 0.0, 1.0)


def relevance_score(context: str, name: str, provider: EmbeddingProvider) -> float:
    return float(relevance_scores(context, [name], provider)[0])
