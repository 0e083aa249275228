"""Counter-based random stream derivation.

Every random draw in the package comes from a ``numpy.random.Generator``
backed by PCG64. A stream is identified by the root seed plus a path of
labels, e.g. ``stream(seed, "batches", "client0", 3)``. The labels are
hashed with BLAKE2b into the SeedSequence entropy, so a stream never depends
on how many draws other streams made. Serial and parallel execution therefore
see the same numbers.
"""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "PCG64"


def stream_key(*labels) -> list[int]:
    path = "/".join(str(label) for label in labels).encode("utf-8")
    digest = hashlib.blake2b(path, digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(root_seed: int, *labels) -> np.random.Generator:
    if root_seed < 0:
        raise ValueError("root seed must be non-negative")
    seq = np.random.SeedSequence([int(root_seed), *stream_key(*labels)])
    return np.random.Generator(np.random.PCG64(seq))
