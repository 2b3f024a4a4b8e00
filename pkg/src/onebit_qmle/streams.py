"""Counter-based random streams, one per simulated user.

Every uniform is a pure function of ``(key, user_index, slot)``, so a user's
draws do not depend on how many other users exist, on the order in which
users are processed, or on how work is split across processes.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SLOT_STRIDE = np.uint64(0xD1B54A32D192ED03)

# Slot families; the coordinate index is added to the family base.
SLOT_DESIGN = 0
SLOT_Y_NOISE = 1 << 20
SLOT_Y_FLIP = 2 << 20
SLOT_X_FLIP = 3 << 20


def _splitmix64(h):
    h = h + _GOLDEN
    h = (h ^ (h >> np.uint64(30))) * _MIX1
    h = (h ^ (h >> np.uint64(27))) * _MIX2
    return h ^ (h >> np.uint64(31))


def derive_seed(*parts: int) -> int:
    """Collapse a tuple of non-negative integers into one 63-bit seed."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class UserStreams:
    """Family of independent per-user uniform streams keyed by a master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        state = np.random.SeedSequence(self.seed).generate_state(2, dtype=np.uint64)
        self._k0, self._k1 = state[0], state[1]

    def uniforms(self, users, slot: int) -> np.ndarray:
        """Uniforms on the open interval (0, 1), one per entry of ``users``."""
        u = np.asarray(users, dtype=np.uint64)
        with np.errstate(over="ignore"):
            h = _splitmix64(self._k0 ^ (u * _GOLDEN))
            h = _splitmix64(h ^ (self._k1 + np.uint64(slot) * _SLOT_STRIDE))
        return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def generator(self, user: int) -> np.random.Generator:
        """A conventional numpy generator bound to one user's stream."""
        return np.random.default_rng([self.seed, int(user)])
