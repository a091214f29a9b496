"""Deterministic seed derivation.

Every random draw in training and evaluation comes from a generator seeded by
``derive_seed(master, *keys)``, which folds the keys into the master seed with
the splitmix64 finalizer.  A run is therefore reproducible from its master
seed and iteration counter alone, which is what checkpoints store.
"""
import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(master, *keys):
    s = splitmix64(int(master) & _MASK)
    for k in keys:
        s = splitmix64(s ^ (int(k) & _MASK))
    return s


def generator(master, *keys):
    return np.random.default_rng(derive_seed(master, *keys))
