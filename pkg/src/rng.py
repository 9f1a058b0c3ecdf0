# src/rng.py
"""
Named random streams derived from a single run seed.

Each subsystem draws from its own stream so that a change in one (say, extra
test requests after an intervention) never shifts the draws seen by another.
`keyed` returns a fresh generator for a tuple such as (agent, day).
"""
import hashlib

import numpy as np


def stream_key(name):
    """Stable 64-bit key for a stream name (Python's hash() is salted per process)."""
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")


class RandomStreams:
    def __init__(self, seed):
        if int(seed) < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._streams = {}

    def stream(self, name):
        """Persistent generator for `name`; repeated calls return the same object."""
        if name not in self._streams:
            seq = np.random.SeedSequence([self.seed, stream_key(name)])
            self._streams[name] = np.random.default_rng(seq)
        return self._streams[name]

    def keyed(self, name, *keys):
        """Fresh generator determined by (seed, name, *keys)."""
        seq = np.random.SeedSequence([self.seed, stream_key(name), *(int(k) for k in keys)])
        return np.random.default_rng(seq)
