"""Named SplitMix64 streams derived from a single root seed."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from memhist import _kernels

CANONICAL_STREAMS = ("init", "order", "augment", "model", "eval", "boot")

_MASK = (1 << 64) - 1


def derive_seed(root_seed: int, name: str) -> int:
    """First 8 bytes (big-endian) of SHA-256(root u64 BE || 0x00 || name)."""
    if not name:
        raise ValueError("stream name must be nonempty")
    payload = (root_seed & _MASK).to_bytes(8, "big") + b"\x00" + name.encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


class RngStream:
    """Counter-based SplitMix64 generator.

    The k-th draw is ``mix(seed + k * golden)``, so the whole sequence is fixed
    by ``seed`` and position is just the number of draws consumed.
    """

    __slots__ = ("name", "seed", "consumed")

    def __init__(self, name: str, seed: int, consumed: int = 0):
        self.name = name
        self.seed = seed & _MASK
        self.consumed = consumed

    def __repr__(self) -> str:
        return f"RngStream({self.name!r}, seed={self.seed:#018x}, consumed={self.consumed})"

    def copy(self) -> "RngStream":
        return RngStream(self.name, self.seed, self.consumed)

    def u64(self, count: int) -> np.ndarray:
        out = _kernels.block(self.seed, self.consumed, count)
        self.consumed += count
        return out

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.u64(count) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, count: int) -> np.ndarray:
        # Box-Muller, cosine branch only: two draws per variate
        u = self.uniform(2 * count)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

    def integers(self, bound: int, count: int) -> np.ndarray:
        if bound < 1:
            raise ValueError("bound must be positive")
        out, used = _kernels.bounded(self.seed, self.consumed, bound, count)
        self.consumed += used
        return out

    def permutation(self, values) -> np.ndarray:
        """Fisher-Yates shuffle of a copy of ``values``."""
        out, used = _kernels.shuffle(np.asarray(values, dtype=np.int64), self.seed, self.consumed)
        self.consumed += used
        return out

    def weighted_without_replacement(self, weights: np.ndarray, k: int) -> np.ndarray:
        out, used = _kernels.weighted(np.asarray(weights, dtype=np.float64), k, self.seed, self.consumed)
        self.consumed += used
        return out


@dataclass
class RngManifest:
    """Registry of the streams derived from one root seed."""

    root_seed: int
    streams: dict[str, RngStream] = field(default_factory=dict)

    def derive(self, name: str) -> RngStream:
        if name in self.streams:
            raise ValueError(f"stream {name!r} already derived from this root")
        stream = RngStream(name, derive_seed(self.root_seed, name))
        self.streams[name] = stream
        return stream

    def copy(self) -> "RngManifest":
        return RngManifest(self.root_seed, {k: s.copy() for k, s in self.streams.items()})

    def records(self) -> list[tuple[str, int, int]]:
        return [(s.name, s.seed, s.consumed) for s in self.streams.values()]

    def to_text(self) -> str:
        lines = [f"root_seed={self.root_seed}"]
        lines += [f"{name}={seed},{draws}" for name, seed, draws in self.records()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RngManifest":
        rows = text.splitlines()
        if not rows or not rows[0].startswith("root_seed="):
            raise ValueError("manifest text must start with root_seed=")
        manifest = cls(int(rows[0].split("=", 1)[1]))
        for row in rows[1:]:
            name, rest = row.split("=", 1)
            seed, draws = rest.split(",")
            if derive_seed(manifest.root_seed, name) != int(seed):
                raise ValueError(f"stream {name!r}: seed does not match its derivation")
            manifest.streams[name] = RngStream(name, int(seed), int(draws))
        return manifest


def derive_stream(manifest: RngManifest, name: str) -> RngStream:
    return manifest.derive(name)


def canonical_manifest(root_seed: int) -> RngManifest:
    manifest = RngManifest(root_seed)
    for name in CANONICAL_STREAMS:
        manifest.derive(name)
    return manifest
