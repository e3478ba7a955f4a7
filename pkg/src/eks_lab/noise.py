"""Counter-indexed Gaussian noise.

The particle dynamics and the mean-field reference need the SAME Brownian
increment for the same (step, particle, component) triple, drawn in any
order, on any thread count, possibly by two different processes.  A
sequential generator cannot give that, so noise is addressed rather than
streamed: each draw is a pure function of (seed, step, particle,
component).

Layout on top of Philox4x64-10: the key is (seed, 0) and the 256-bit
counter is (block, 0, 0, step), where each particle owns ceil(L/4)
consecutive 4-word blocks starting at block j*ceil(L/4).  Distinct
(step, particle, component) triples therefore touch distinct counter
values and are independent; identical triples reproduce the identical
word.  Raw 64-bit words become uniforms via the top 53 bits offset by
half an ulp, u = ((word >> 11) + 0.5) * 2^-53, which lies strictly inside
(0, 1), and normals via scipy's ndtri (the Cephes rational approximation
of the inverse normal CDF; bit-stable wherever the same scipy binaries
are used).
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

from .errors import NonPositive

__all__ = ["NoiseSource", "derive_seed"]

_MASK64 = (1 << 64) - 1


def _mix64(x):
    # splitmix64 finalizer
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base, *parts):
    """Deterministically derive a sub-seed from a base seed and tags.

    Tags may be integers or short strings (study names, repeat indices).
    Different tag sequences give unrelated 64-bit seeds; the derivation is
    stable across runs and platforms, so every cell of a study can record
    the exact seed it ran with.
    """
    x = _mix64(int(base) + 0x9E3779B97F4A7C15)
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8)
            part = int.from_bytes(digest.digest(), "little")
        x = _mix64((x + 0x9E3779B97F4A7C15 + (int(part) & _MASK64)) & _MASK64)
    return x


def _normals(raw, n_components):
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True)
class NoiseSource:
    """Addressable standard-normal noise keyed by a 64-bit seed."""

    seed: int

    def _blocks_per_particle(self, n_components):
        if n_components < 1:
            raise NonPositive("n_components must be >= 1")
        return (n_components + 3) // 4

    def _key(self):
        return np.array([int(self.seed) & _MASK64, 0], dtype=np.uint64)

    def normal_block(self, step, n_particles, n_components):
        """Draws for particles 0..n_particles-1 at one step, shape (J, L).

        Row j is bit-identical to normal_rows(step, [j], L) regardless of
        n_particles, so growing the ensemble never reshuffles the noise
        of existing particles.
        """
        if step < 0:
            raise NonPositive("step must be >= 0")
        if n_particles < 1:
            raise NonPositive("n_particles must be >= 1")
        bpp = self._blocks_per_particle(n_components)
        counter = np.array([0, 0, 0, int(step)], dtype=np.uint64)
        gen = Philox(key=self._key(), counter=counter)
        raw = gen.random_raw(n_particles * bpp * 4)
        raw = raw.reshape(n_particles, bpp * 4)[:, :n_components]
        return _normals(raw, n_components)

    def normal_rows(self, step, particle_indices, n_components):
        """Draws for an arbitrary list of particle indices at one step."""
        if step < 0:
            raise NonPositive("step must be >= 0")
        bpp = self._blocks_per_particle(n_components)
        out = np.empty((len(particle_indices), n_components), dtype=float)
        for row, j in enumerate(particle_indices):
            j = int(j)
            if j < 0:
                raise NonPositive("particle indices must be >= 0")
            counter = np.array([j * bpp, 0, 0, int(step)], dtype=np.uint64)
            gen = Philox(key=self._key(), counter=counter)
            raw = gen.random_raw(bpp * 4)[:n_components]
            out[row] = _normals(raw, n_components)
        return out
