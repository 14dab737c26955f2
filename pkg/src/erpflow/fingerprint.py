"""Count-based Morgan (circular) fingerprints for expert gating.

Atom environments are hashed with the SplitMix64 mixer (constants in
``molgraph.splitmix64``) so fingerprints are bit-reproducible without a
cheminformatics toolkit. Each atom contributes one count per radius
0..R, folded into ``length`` buckets by modulo.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .molgraph import ATOMIC_NUMBER, MolGraph, hash_sequence

DEFAULT_RADIUS = 2
DEFAULT_LENGTH = 2048


def atom_environment_hashes(g: MolGraph, radius: int = DEFAULT_RADIUS) -> list[list[int]]:
    """Hash of every atom's r-neighbourhood, indexed ``[r][atom]``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    current = []
    for a in g.atoms:
        current.append(hash_sequence(
            (ATOMIC_NUMBER[a.element], a.formal_charge, g.degree(a.index), a.explicit_h), seed=0
        ))
    layers = [current]
    nbrs = [[(int(g.bonds[i, j]), j) for j in g.neighbors(i)] for i in range(g.n_atoms)]
    for r in range(1, radius + 1):
        nxt = []
        for i in range(g.n_atoms):
            flat = [r, current[i]]
            for bond, h in sorted((b, current[j]) for b, j in nbrs[i]):
                flat.extend((bond, h))
            nxt.append(hash_sequence(flat, seed=r))
        current = nxt
        layers.append(current)
    return layers


def morgan_fingerprint(g: MolGraph, radius: int = DEFAULT_RADIUS, length: int = DEFAULT_LENGTH) -> np.ndarray:
    if length <= 0:
        raise ValueError("length must be positive")
    counts = np.zeros(length, dtype=np.int64)
    for layer in atom_environment_hashes(g, radius):
        for h in layer:
            counts[h % length] += 1
    return counts


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"fingerprint length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    # clip rounding excursions above 1 for parallel vectors
    return float(min(1.0, max(0.0, np.dot(a, b) / (na * nb))))


def centroid(fps: Sequence[np.ndarray]) -> np.ndarray:
    if len(fps) == 0:
        raise ValueError("centroid of an empty fingerprint list")
    stacked = np.stack([np.asarray(f, dtype=np.float64) for f in fps])
    return stacked.mean(axis=0)
