"""Seed derivation: every random stream in the package descends from a single
64-bit master seed through named, order-independent derivations."""

import hashlib

import numpy as np

__all__ = ["derive_seed_sequence", "derive_rng", "spawn_chain_rngs"]


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed_sequence(master_seed: int, *tags) -> np.random.SeedSequence:
    """SeedSequence for a named purpose, stable regardless of call order."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_tag_to_int(t) for t in tags)
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(master_seed, *tags)))


def spawn_chain_rngs(master_seed: int, purpose: str, chains: int) -> list[np.random.Generator]:
    """One independent generator per chain, derived from (seed, purpose, chain index)."""
    return [derive_rng(master_seed, purpose, c) for c in range(chains)]
