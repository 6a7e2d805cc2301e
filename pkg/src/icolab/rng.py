"""Named, splittable random streams.

Every stochastic operation in the library takes an explicit stream handle.
Streams are backed by the counter-based Philox generator; a child stream's
key is derived by hashing the parent key together with the child's name, so
any stream is reproducible from the master seed and the path of names alone,
independent of draw order elsewhere in the program.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


def _derive_key(master_seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for name in path:
        h.update(b"/")
        h.update(name.encode())
    return int.from_bytes(h.digest()[:16], "little")


class RngStream:
    """One independent random stream, addressable by its name path."""

    def __init__(self, master_seed: int, path: tuple[str, ...] = ()):
        self.master_seed = int(master_seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(master_seed, self.path)))

    def split(self, name: str) -> "RngStream":
        """Derive an independent child stream. Splitting never consumes draws."""
        return RngStream(self.master_seed, self.path + (str(name),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.master_seed}, path={'/'.join(self.path) or '<root>'})"
