from typing import Dict, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

STREAMS = ("pose", "body", "camera", "lights", "skin", "background")


def splitmix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix_seed(master: int, index: int) -> int:
    """Per-item 64-bit seed: splitmix64 finalizer of master + (index + 1) * golden gamma."""
    return splitmix64((int(master) + (int(index) + 1) * GOLDEN_GAMMA) & MASK64)


def spawn_streams(seed: int, names: Sequence[str] = STREAMS) -> Dict[str, np.random.Generator]:
    """Independent named generators derived from one item seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}
