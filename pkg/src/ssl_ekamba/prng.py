"""SplitMix64 generator used for every augmentation draw.

The stream is fully determined by a 64-bit state::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

all arithmetic mod 2**64. ``uniform()`` takes the top 53 bits of the next
output and scales by 2**-53, so values lie in [0, 1).

Substreams are derived without touching the parent stream:
``derive(seed, *keys)`` folds each key in turn: the new state is the first
output of a fresh generator seeded with ``state ^ key``. Training uses
``derive(seed, epoch, batch, sample)`` so a batch's augmentation never
depends on how many draws earlier batches consumed.
"""

from __future__ import annotations

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK
        return _mix(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def choice_weighted(self, weights: list[float]) -> int:
        """Index drawn with probability proportional to ``weights``."""
        total = 0.0
        for w in weights:
            total += w
        r = self.uniform() * total
        acc = 0.0
        last = 0
        for i, w in enumerate(weights):
            if w <= 0:
                continue
            acc += w
            last = i
            if r < acc:
                return i
        return last

    def sample_without_replacement(self, weights: list[float], m: int) -> list[int]:
        """``m`` distinct indices by successive weighted draws, renormalizing."""
        if m > len(weights):
            raise ValueError(f"cannot draw {m} distinct items from {len(weights)}")
        w = list(weights)
        picked = []
        for _ in range(m):
            if sum(w) <= 0:
                # only zero-weight items left; fall back to index order
                i = next(j for j in range(len(w)) if j not in picked)
            else:
                i = self.choice_weighted(w)
            picked.append(i)
            w[i] = 0.0
        return picked


def derive(seed: int, *keys: int) -> int:
    state = seed & MASK
    for k in keys:
        state = SplitMix64(state ^ (k & MASK)).next_u64()
    return state
