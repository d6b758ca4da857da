"""
Counter-based random streams keyed by (master seed, path index).

Every path owns an independent Philox stream, so the draws for path i never
depend on how paths are split across blocks or workers.
"""

import numpy as np


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Generator for a single path; the spawn key pins the stream to the index."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(sequence))


def path_normals(seed: int, start: int, stop: int, shape: tuple) -> np.ndarray:
    """Standard normals for paths [start, stop), each drawn from its own stream.

    Returns an array of shape (stop - start, *shape).
    """
    out = np.empty((stop - start,) + tuple(shape))
    for offset, path_index in enumerate(range(start, stop)):
        out[offset] = path_generator(seed, path_index).standard_normal(shape)
    return out


def sampling_generator(seed: int, purpose: str) -> np.random.Generator:
    """Generator for auxiliary sampling (hypothesis checks, split samples)."""
    tag = sum(ord(ch) * (i + 1) for i, ch in enumerate(purpose))
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(2 ** 31 + tag,))
    return np.random.Generator(np.random.Philox(sequence))
