"""Dense vector arithmetic and counter-keyed random streams.

Every reduction here is deterministic so that server aggregation and the
metrics derived from it replay bit-for-bit.
"""
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from app.constants import Purpose
from app.core.errors import DimensionError, DomainError, NumericError

_SEED_MASK = (1 << 64) - 1


def as_vector(values: Iterable[float]) -> np.ndarray:
    """Copy `values` into a finite float64 vector."""
    x = np.array(values, dtype=np.float64).reshape(-1)
    check_finite(x, "vector")
    return x


def check_finite(x: np.ndarray, what: str = "vector") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN or Inf")


def check_same_dim(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    check_same_dim(x, y)
    return a * x + y


def norm2_sq(x: np.ndarray) -> float:
    # cumsum accumulates strictly left to right
    if x.size == 0:
        return 0.0
    return float(np.cumsum(x * x)[-1])


def ordered_sum(vectors: Iterable[np.ndarray]) -> np.ndarray:
    """Sum vectors one after another in iteration order."""
    total = None
    for v in vectors:
        total = v.copy() if total is None else total + v
    if total is None:
        raise DimensionError("cannot sum an empty sequence of vectors")
    return total


@dataclass(frozen=True)
class RandomStream:
    """Stateless random stream keyed by (root_seed, context).

    The context fields default to -1 ("not applicable"); `replica` separates
    Monte-Carlo repetitions drawn from one frozen state.
    """
    root_seed: int
    round: int = -1
    client: int = -1
    step: int = -1
    purpose: Purpose = Purpose.MINIBATCH
    replica: int = 0

    def at(self, **context) -> "RandomStream":
        return replace(self, **context)

    def key(self) -> tuple:
        return (int(self.purpose), self.round + 1, self.client + 1, self.step + 1, self.replica)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.root_seed & _SEED_MASK, spawn_key=self.key())
        return np.random.Generator(np.random.Philox(seq))


def draw_gaussian(stream: RandomStream, n: int) -> np.ndarray:
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return stream.generator().standard_normal(n)
