"""Dense latent vectors, deterministic random streams, and order statistics.

Everything downstream (the guidance calculus, the analytic diffusion testbed,
the experiment harness, the service) moves data through the value types in
this module.  A :class:`Latent` is a flat float64 vector plus shape metadata;
operations never mutate their inputs.  Randomness comes from :class:`Rng`, a
counter-based generator with published constants, so any stream can be
reproduced from its seed alone and replayed mid-stream from (seed, counter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Latent",
    "Rng",
    "ShapeMismatchError",
    "percentile_threshold",
    "gaussian_sample",
]


class ShapeMismatchError(ValueError):
    """Two operands disagree on shape; carries both for callers to inspect."""

    def __init__(self, left: tuple[int, ...], right: tuple[int, ...]):
        self.left = left
        self.right = right
        super().__init__(f"shape mismatch: {left} vs {right}")


@dataclass(frozen=True, eq=False)
class Latent:
    """Flat float64 vector with shape metadata.

    ``data`` is stored 1-D and read-only; ``shape`` records the logical layout
    (its element count must match).  All arithmetic returns new instances, and
    construction rejects non-finite entries so NaN/Inf cannot propagate
    silently through the engine.
    """

    data: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"shape entries must be positive, got {shape}")
        if math.prod(shape) != arr.size:
            raise ValueError(
                f"shape {shape} implies {math.prod(shape)} entries, data has {arr.size}"
            )
        if not np.isfinite(arr).all():
            raise ValueError("latent contains non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", shape)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def of(cls, values: Iterable[float], shape: Sequence[int] | None = None) -> "Latent":
        arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                         dtype=np.float64).ravel()
        return cls(arr, tuple(shape) if shape is not None else (arr.size,))

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Latent":
        return cls(np.zeros(math.prod(shape)), tuple(shape))

    @property
    def size(self) -> int:
        return self.data.size

    def tolist(self) -> list[float]:
        return self.data.tolist()

    # -- elementwise arithmetic ----------------------------------------------

    def _check(self, other: "Latent") -> None:
        if self.shape != other.shape:
            raise ShapeMismatchError(self.shape, other.shape)

    def add(self, other: "Latent") -> "Latent":
        self._check(other)
        return Latent(self.data + other.data, self.shape)

    def sub(self, other: "Latent") -> "Latent":
        self._check(other)
        return Latent(self.data - other.data, self.shape)

    def mul(self, other: "Latent") -> "Latent":
        self._check(other)
        return Latent(self.data * other.data, self.shape)

    def scale(self, factor: float) -> "Latent":
        return Latent(self.data * float(factor), self.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Latent):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


# -- deterministic random streams ---------------------------------------------

_MASK64 = (1 << 64) - 1
# splitmix64 constants (Steele, Lea & Flood; also used by xoshiro seeding).
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53


def _mix(words: np.ndarray) -> np.ndarray:
    z = words
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based splitmix64 stream.

    Word ``i`` of the stream is ``mix(seed + (i + 1) * GOLDEN)`` where ``mix``
    is the splitmix64 finalizer and GOLDEN is the 64-bit golden-ratio
    increment.  The counter records how many words have been consumed, so the
    integer stream is bit-identical for a given seed on every platform.
    Normal variates use Box-Muller on consecutive word pairs; their bits are
    reproducible per platform (they go through libm log/cos/sin).
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix((np.uint64(self.seed) + idx * np.uint64(_GOLDEN)) & np.uint64(_MASK64))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), one stream word each (53 mantissa bits)."""
        return (self._words(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normals(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller; consumes 2*ceil(n/2) words."""
        pairs = (n + 1) // 2
        words = self._words(2 * pairs)
        # u1 in (0, 1] so log stays finite; u2 in [0, 1).
        u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]


def gaussian_sample(rng: Rng, shape: Sequence[int]) -> Latent:
    """Draw a latent of iid standard normal entries from ``rng``."""
    shape = tuple(shape)
    return Latent(rng.normals(math.prod(shape)), shape)


def percentile_threshold(values: Latent | np.ndarray, fraction: float) -> float:
    """Nearest-rank percentile over the flattened values.

    Returns the ceil(fraction * n)-th smallest entry (1-based), with no
    interpolation, so the result is always an element of the input.
    ``fraction`` must lie strictly inside (0, 1).
    """
    flat = values.data if isinstance(values, Latent) else np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("percentile of empty input is undefined")
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"percentile fraction must be in (0, 1), got {fraction}")
    rank = math.ceil(fraction * flat.size)
    return float(np.sort(flat)[rank - 1])
