"""Shared pieces for the two encoders: embeddings, init, weight store."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateEmbeddingError, StaleCacheError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class Embedding:
    """A point in the shared latent space."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values",
                           np.asarray(self.values, dtype=np.float64))

    @property
    def dim(self) -> int:
        return len(self.values)


def normalize(e: Embedding) -> Embedding:
    """Unit-L2 version of the embedding; direction preserved."""
    n = float(np.linalg.norm(e.values))
    if n <= NORM_EPS:
        raise DegenerateEmbeddingError(f"embedding norm {n:.3e} too small")
    return Embedding(values=e.values / n, normalized=True)


def normalize_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateEmbeddingError("zero-norm row cannot be normalized")
    return z / norms


def normalize_rows_backward(z: np.ndarray, p: np.ndarray,
                            dp: np.ndarray) -> np.ndarray:
    """Gradient through row normalization p = z / ||z||."""
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    return (dp - p * np.sum(p * dp, axis=-1, keepdims=True)) / norms


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_last_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Jacobian-vector product for softmax over the last axis."""
    inner = np.sum(ds * s, axis=-1, keepdims=True)
    return s * (ds - inner)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Weights:
    """Named float64 tensors plus a version counter.

    The counter is bumped by every in-place update (optimizer steps), which
    lets backward passes detect forward caches computed under older weights.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=np.float64)
                        for k, v in tensors.items()}
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def bump(self) -> None:
        self.version += 1

    def check_fresh(self, cache_version: int) -> None:
        if cache_version != self.version:
            raise StaleCacheError(
                f"forward cache from weights version {cache_version}, "
                f"current is {self.version}")

    def copy(self) -> "Weights":
        w = Weights({k: v.copy() for k, v in self.tensors.items()})
        w.version = self.version
        return w
