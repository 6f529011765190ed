from typing import Dict

import numpy as np

# Named substreams. Every random draw in the library goes through one of these.
STREAM_IDS: Dict[str, int] = {
    "indices-I": 0,
    "indices-J": 1,
    "termination": 2,
    "data": 3,
    "init": 4,
}


class StreamFactory:
    """Counter-based random streams keyed by (seed, replica, stream name).

    Two factories built with the same seed and replica hand out generators
    that produce identical sequences, whatever else has been drawn elsewhere.
    """

    def __init__(self, seed: int, replica: int = 0):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        if replica < 0:
            raise ValueError(f"replica must be non-negative, got {replica}")
        self.seed = int(seed)
        self.replica = int(replica)

    def stream(self, name: str) -> np.random.Generator:
        """Return a fresh generator positioned at the start of stream `name`."""
        if name not in STREAM_IDS:
            raise KeyError(f"Unknown stream '{name}'. Known: {sorted(STREAM_IDS)}")
        seq = np.random.SeedSequence(
            self.seed, spawn_key=(self.replica, STREAM_IDS[name])
        )
        return np.random.Generator(np.random.Philox(seq))

    def child(self, replica: int) -> "StreamFactory":
        return StreamFactory(self.seed, replica)

    def __repr__(self) -> str:
        return f"StreamFactory(seed={self.seed}, replica={self.replica})"


def sample_batch(
    rng: np.random.Generator, n: int, size: int, replace: bool
) -> np.ndarray:
    """Draw `size` indices uniformly from range(n).

    Single draws always go through `integers` so that with- and
    without-replacement samplers consume the stream identically.
    """
    if size < 1:
        raise ValueError(f"batch size must be positive, got {size}")
    if size == 1 or replace:
        return rng.integers(0, n, size=size)
    if size > n:
        raise ValueError(f"cannot draw {size} distinct indices out of {n}")
    return rng.choice(n, size=size, replace=False)
