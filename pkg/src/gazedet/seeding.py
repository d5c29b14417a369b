import zlib

import numpy as np


def child_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator derived from a root seed and a fixed label."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


def child_seed(seed: int, label: str) -> int:
    return int(child_rng(seed, label).integers(0, 2**31 - 1))
