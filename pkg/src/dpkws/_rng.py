"""Named random substreams derived from one master seed."""

import zlib

import numpy as np

STREAMS = ("init", "shuffle", "augmentation", "corpus", "split")


def substream(seed, name):
    """Return a Generator for the named substream of ``seed``.

    The substream key is the CRC32 of the name, so adding new stream names
    never perturbs existing ones.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
