"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream_key)``. Distinct stream keys give statistically independent
sequences with no shared state, so per-item work can run in any order.
"""

import numpy as np

MASK64 = (1 << 64) - 1


def make_rng(seed: int, stream_key: int = 0) -> np.random.Generator:
    """Return a fresh generator positioned at counter zero of ``(seed, stream_key)``."""
    key = np.array([int(seed) & MASK64, int(stream_key) & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _mix(h: int, v: int) -> int:
    h = (h ^ (v & MASK64)) & MASK64
    h = (h + 0x9E3779B97F4A7C15) & MASK64
    z = h
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_key(*parts) -> int:
    """Fold integers/strings into a 64-bit stream key (SplitMix64 mixing)."""
    h = 0x9E3779B97F4A7C15
    for part in parts:
        if isinstance(part, str):
            raw = part.encode()
            # length first so "ab" + "c" and "a" + "bc" differ
            h = _mix(h, len(raw))
            for i in range(0, len(raw), 8):
                h = _mix(h, int.from_bytes(raw[i : i + 8], "little"))
        else:
            h = _mix(h, int(part))
    return h
