"""Named random substreams derived from one master seed."""

import zlib

import numpy as np


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream_seed(master_seed, name, *index):
    """Integer seed for substream `name` at `index`, stable across runs and platforms."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(stream_key(name), *map(int, index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))
