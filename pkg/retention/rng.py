"""
Seeded random streams.

Each run owns one `RandomStreams`: a root `SeedSequence` built from the 64-bit
run seed is spawned into one child per purpose, and every child drives a
counter-based Philox-4x64 generator. Draws for one purpose never shift the
sequence of another, and the complete state is a small integer dict that
checkpoints store verbatim.
"""

from typing import Any

import numpy as np

STREAM_NAMES: tuple[str, ...] = ('pairs', 'negatives', 'constraints', 'init')


def _encode(value: Any) -> Any:
    """Convert numpy arrays/ints inside a bit-generator state to JSON types."""
    if isinstance(value, np.ndarray):
        return [int(x) for x in value.tolist()]
    if isinstance(value, dict):
        return {key: _encode(item) for key, item in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, list):
        return np.array(value, dtype=np.uint64)
    if isinstance(value, dict):
        return {key: _decode(item) for key, item in value.items()}
    return value


class RandomStreams:
    """Named Philox generators split from one seed."""

    def __init__(self, seed: int, names: tuple[str, ...] = STREAM_NAMES):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(len(names))
        self._generators = {
            name: np.random.Generator(np.random.Philox(child))
            for name, child in zip(names, children)
        }

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._generators[name]

    def names(self) -> tuple[str, ...]:
        return tuple(self._generators)

    def get_state(self) -> dict[str, Any]:
        """Return every stream position as plain JSON-serializable data."""
        return {name: _encode(gen.bit_generator.state)
                for name, gen in self._generators.items()}

    def set_state(self, state: dict[str, Any]) -> None:
        """Restore stream positions produced by `get_state`."""
        missing = set(self._generators) - set(state)
        if missing:
            raise KeyError(f"Missing random stream state(s): {sorted(missing)}")
        for name, gen in self._generators.items():
            gen.bit_generator.state = _decode(state[name])


def sample_without_replacement(rng: np.random.Generator, population: np.ndarray, size: int) -> np.ndarray:
    """Uniform draw of `size` distinct entries of `population`, sorted ascending."""
    if size >= len(population):
        return np.asarray(population).copy()
    picked = rng.choice(len(population), size=size, replace=False)
    return np.sort(np.asarray(population)[picked])
