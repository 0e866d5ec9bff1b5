"""Counter-based pseudo-random streams.

Every consumer of randomness owns a ``CounterRng`` identified by (seed,
stream id).  Draws are pure functions of (key, counter), so state is two
integers and any stream can be checkpointed and resumed exactly.  Streams
with distinct ids are independent for any fixed seed.
"""

import math
from typing import List

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53
_TWO_PI = 2.0 * math.pi

# stream id conventions used across the package
STREAM_INIT = 0
STREAM_PRETRAIN_EPS = 1
STREAM_GIBBS = 2
STREAM_MOE_RESP = 3
STREAM_EVAL = 4
STREAM_COMPONENT_BASE = 10_000
STREAM_LABEL_BASE = 50_000
STREAM_SHUFFLE_BASE = 1_000_000
STREAM_MOE_SHUFFLE_BASE = 1_500_000
STREAM_PROBE_SHUFFLE_BASE = 2_500_000


def _mix64(x: int) -> int:
    """splitmix64 finalizer; bijective on 64-bit ints."""
    x = (x + 0) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


class CounterRng:
    """Stateless-draw RNG: value i of a stream never depends on value j."""

    __slots__ = ("seed", "stream", "key", "counter")

    def __init__(self, seed: int, stream: int, counter: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        self.seed = seed
        self.stream = stream
        self.key = _mix64((seed ^ _mix64((stream * _GOLDEN) & _MASK)) & _MASK)
        self.counter = counter

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "CounterRng":
        return cls(int(state["seed"]), int(state["stream"]), int(state["counter"]))

    def _next_u64(self) -> int:
        u = _mix64((self.key + self.counter * _GOLDEN) & _MASK)
        self.counter += 1
        return u

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self._next_u64() >> 11) * _INV_2_53

    def normal(self) -> float:
        """One standard normal via Box-Muller; consumes two draws, caches none."""
        # u1 shifted into (0, 1] so the log is always finite
        u1 = ((self._next_u64() >> 11) + 1) * _INV_2_53
        u2 = (self._next_u64() >> 11) * _INV_2_53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def fill_uniform(self, buf, n: int) -> None:
        for i in range(n):
            buf[i] = self.uniform()

    def fill_normal(self, buf, n: int) -> None:
        for i in range(n):
            buf[i] = self.normal()

    def randint(self, bound: int) -> int:
        """Uniform int in [0, bound) by rejection; unbiased for any bound."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (_MASK + 1) - ((_MASK + 1) % bound)
        while True:
            u = self._next_u64()
            if u < limit:
                return u % bound

    def choice(self, probs) -> int:
        """Index sampled from a normalized probability vector."""
        u = self.uniform()
        acc = 0.0
        last = len(probs) - 1
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                return i
        return last

    def permutation(self, n: int) -> List[int]:
        """Fisher-Yates shuffle of range(n)."""
        arr = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            arr[i], arr[j] = arr[j], arr[i]
        return arr
