"""Molecular graphs, electron deltas and graph signatures.

Bond matrices hold the number of shared electron pairs between two atoms
(0 none, 1 single, 2 double, 3 triple). Hydrogens are carried as per-atom
counts, never as graph nodes unless written explicitly as ``[H]``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

ELEMENTS: tuple[str, ...] = ("H", "B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Br", "I")
MAX_VALENCE: dict[str, int] = {
    "H": 1, "B": 3, "C": 4, "N": 3, "O": 2, "F": 1,
    "Si": 4, "P": 5, "S": 6, "Cl": 1, "Br": 1, "I": 1,
}
ATOMIC_NUMBER: dict[str, int] = {
    "H": 1, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9,
    "Si": 14, "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53,
}
MAX_BOND_ORDER = 3
MAX_ABS_CHARGE = 2
EMPTY_PATTERN = "<no-change>"

_MASK64 = (1 << 64) - 1


class ChemistryError(ValueError):
    """Raised when a graph or reaction violates a chemical invariant."""


class ReactionError(ChemistryError):
    """Reaction does not conform to the atom-mapped, non-autoregressive setting."""


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer (Steele, Lea & Flood 2014 constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_sequence(values: Iterable[int], seed: int = 0) -> int:
    """Order-sensitive 64-bit hash of a sequence of integers."""
    h = splitmix64(seed & _MASK64)
    for v in values:
        h = splitmix64(h ^ splitmix64(v & _MASK64))
    return h


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    explicit_h: int = 0
    map_index: int | None = None
    index: int = 0

    def __post_init__(self) -> None:
        if self.element not in MAX_VALENCE:
            raise ChemistryError(f"unsupported element {self.element!r}")
        if self.explicit_h < 0:
            raise ChemistryError(f"negative hydrogen count on atom {self.index}")
        if abs(self.formal_charge) > MAX_ABS_CHARGE:
            raise ChemistryError(f"charge {self.formal_charge} outside +/-{MAX_ABS_CHARGE}")
        if self.map_index is not None and self.map_index < 1:
            raise ChemistryError(f"atom map numbers must be positive, got {self.map_index}")


@dataclass(frozen=True, eq=False)
class MolGraph:
    """Atoms plus a symmetric integer bond matrix; immutable once built."""

    atoms: tuple[Atom, ...]
    bonds: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        atoms = tuple(a if a.index == i else replace(a, index=i) for i, a in enumerate(self.atoms))
        object.__setattr__(self, "atoms", atoms)
        n = len(atoms)
        bonds = np.array(self.bonds, dtype=np.int64).reshape(n, n)
        bonds.setflags(write=False)
        object.__setattr__(self, "bonds", bonds)
        validate_graph(self)

    @classmethod
    def empty(cls) -> MolGraph:
        return cls((), np.zeros((0, 0), dtype=np.int64))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.bonds[i])]

    def bond_sum(self, i: int) -> int:
        return int(self.bonds[i].sum())

    def degree(self, i: int) -> int:
        return int(np.count_nonzero(self.bonds[i]))

    def map_to_index(self) -> dict[int, int]:
        return {a.map_index: a.index for a in self.atoms if a.map_index is not None}

    def without_maps(self) -> MolGraph:
        return MolGraph(tuple(replace(a, map_index=None) for a in self.atoms), self.bonds)

    def permute(self, order: Sequence[int]) -> MolGraph:
        """Return the graph whose atom k is this graph's atom ``order[k]``."""
        order = list(order)
        if sorted(order) != list(range(self.n_atoms)):
            raise ValueError("order must be a permutation of atom indices")
        idx = np.asarray(order, dtype=np.int64)
        return MolGraph(tuple(self.atoms[i] for i in order), self.bonds[np.ix_(idx, idx)])

    def components(self) -> list[list[int]]:
        seen = [False] * self.n_atoms
        comps = []
        for start in range(self.n_atoms):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                i = stack.pop()
                comp.append(i)
                for j in self.neighbors(i):
                    if not seen[j]:
                        seen[j] = True
                        stack.append(j)
            comps.append(sorted(comp))
        return comps

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MolGraph):
            return NotImplemented
        return self.atoms == other.atoms and np.array_equal(self.bonds, other.bonds)

    def __hash__(self) -> int:
        return hash((self.atoms, self.bonds.tobytes()))


def validate_graph(g: MolGraph) -> None:
    n = g.n_atoms
    b = g.bonds
    if b.shape != (n, n):
        raise ChemistryError(f"bond matrix shape {b.shape} does not match {n} atoms")
    if n == 0:
        return
    if not np.array_equal(b, b.T):
        raise ChemistryError("bond matrix is not symmetric")
    if np.any(np.diag(b) != 0):
        raise ChemistryError("self bonds are not allowed")
    if b.min() < 0 or b.max() > MAX_BOND_ORDER:
        raise ChemistryError(f"bond orders must lie in [0, {MAX_BOND_ORDER}]")
    maps = [a.map_index for a in g.atoms if a.map_index is not None]
    if len(maps) != len(set(maps)):
        raise ChemistryError("duplicate atom map numbers")
    sums = b.sum(axis=1)
    for a in g.atoms:
        used = int(sums[a.index]) + a.explicit_h - a.formal_charge
        if used > MAX_VALENCE[a.element]:
            raise ChemistryError(
                f"valence violation on atom {a.index} ({a.element}): {used} > {MAX_VALENCE[a.element]}"
            )


def disjoint_union(graphs: Sequence[MolGraph]) -> MolGraph:
    atoms: list[Atom] = []
    n = sum(g.n_atoms for g in graphs)
    bonds = np.zeros((n, n), dtype=np.int64)
    offset = 0
    for g in graphs:
        atoms.extend(g.atoms)
        bonds[offset:offset + g.n_atoms, offset:offset + g.n_atoms] = g.bonds
        offset += g.n_atoms
    return MolGraph(tuple(atoms), bonds)


@dataclass(frozen=True)
class ElectronDelta:
    """Sparse bond-order change over unordered reactant atom pairs.

    ``entries`` is a sorted tuple of ``(i, j, delta)`` with ``i < j`` and
    non-zero ``delta`` in [-3, 3]. Build it with :meth:`from_pairs`.
    """

    entries: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self) -> None:
        for i, j, d in self.entries:
            if not i < j:
                raise ValueError(f"pair ({i}, {j}) is not normalized to i < j")
            if d == 0 or abs(d) > MAX_BOND_ORDER:
                raise ValueError(f"delta {d} on ({i}, {j}) outside [-3, 3] \\ {{0}}")

    @classmethod
    def from_pairs(cls, pairs: Mapping[tuple[int, int], int] | Iterable[tuple[int, int, int]]) -> ElectronDelta:
        items = pairs.items() if isinstance(pairs, Mapping) else (((i, j), d) for i, j, d in pairs)
        acc: dict[tuple[int, int], int] = {}
        for (i, j), d in items:
            if i == j:
                raise ValueError("self pair in electron delta")
            key = (min(i, j), max(i, j))
            acc[key] = acc.get(key, 0) + int(d)
        return cls(tuple(sorted((i, j, d) for (i, j), d in acc.items() if d != 0)))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> ElectronDelta:
        iu, ju = np.triu_indices(m.shape[0], k=1)
        vals = m[iu, ju]
        nz = np.flatnonzero(vals)
        return cls(tuple((int(iu[k]), int(ju[k]), int(vals[k])) for k in nz))

    def as_dict(self) -> dict[tuple[int, int], int]:
        return {(i, j): d for i, j, d in self.entries}

    def to_matrix(self, n: int) -> np.ndarray:
        m = np.zeros((n, n), dtype=np.int64)
        for i, j, d in self.entries:
            m[i, j] = m[j, i] = d
        return m

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)


@dataclass(frozen=True)
class Reaction:
    reactants: MolGraph
    product: MolGraph
    id: str = ""
    atom_alignment: dict[int, int] = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.atom_alignment is None:
            object.__setattr__(self, "atom_alignment", align_atoms(self.reactants, self.product))


def align_atoms(reactants: MolGraph, product: MolGraph) -> dict[int, int]:
    """Reactant index -> product index through atom map numbers."""
    rmap = reactants.map_to_index()
    align: dict[int, int] = {}
    for a in product.atoms:
        if a.map_index is None:
            raise ReactionError(f"product atom {a.index} ({a.element}) carries no atom map")
        if a.map_index not in rmap:
            raise ReactionError(f"product map number {a.map_index} absent from reactants")
        ri = rmap[a.map_index]
        if reactants.atoms[ri].element != a.element:
            raise ReactionError(
                f"map {a.map_index}: element changes {reactants.atoms[ri].element} -> {a.element}"
            )
        align[ri] = a.index
    return align


def compute_delta(r: Reaction) -> ElectronDelta:
    n = r.reactants.n_atoms
    er = r.reactants.bonds
    ep = r.product.bonds
    idx = np.full(n, -1, dtype=np.int64)
    for ri, pi in r.atom_alignment.items():
        idx[ri] = pi
    mapped = idx >= 0
    expected = np.zeros((n, n), dtype=np.int64)
    both = np.outer(mapped, mapped)
    if mapped.any():
        safe = np.where(mapped, idx, 0)
        expected[both] = ep[np.ix_(safe, safe)][both]
    return ElectronDelta.from_matrix(expected - er)


def apply_delta(g: MolGraph, d: ElectronDelta, drop_unmapped_isolated: bool = False) -> MolGraph | None:
    """Add a delta to the reactant bonds; ``None`` when the result is not a valid graph.

    Hydrogen counts follow the bond changes so each atom keeps its valence
    total: forming a bond consumes a hydrogen, breaking one returns it.
    """
    n = g.n_atoms
    if d.entries and max(j for _, j, _ in d.entries) >= n:
        raise IndexError("delta refers to atoms outside the graph")
    dm = d.to_matrix(n)
    bonds = g.bonds + dm
    if n and (bonds.min() < 0 or bonds.max() > MAX_BOND_ORDER):
        return None
    change = dm.sum(axis=1)
    atoms = []
    for a in g.atoms:
        h = a.explicit_h - int(change[a.index])
        if h < 0:
            return None
        atoms.append(replace(a, explicit_h=h))
    try:
        out = MolGraph(tuple(atoms), bonds)
    except ChemistryError:
        return None
    if drop_unmapped_isolated:
        keep = [a.index for a in out.atoms if a.map_index is not None or out.degree(a.index) > 0]
        idx = np.asarray(keep, dtype=np.int64)
        out = MolGraph(tuple(out.atoms[i] for i in keep), out.bonds[np.ix_(idx, idx)])
    return out


def _distance_keys(g: MolGraph) -> np.ndarray:
    """Row i is the sorted multiset of (distance, atomic number) codes seen from atom i.

    The codes separate regular graphs that neighbourhood hashing alone cannot,
    e.g. one six-ring vs two three-rings, or decalin vs bicyclopentyl.
    """
    n = g.n_atoms
    far = n + 1  # unreachable
    dist = np.where(g.bonds > 0, 1, far)
    np.fill_diagonal(dist, 0)
    for k in range(n):
        np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :], out=dist)
    z = np.array([ATOMIC_NUMBER[a.element] for a in g.atoms], dtype=np.int64)
    return np.sort(dist * 256 + z[None, :], axis=1)


def _digest(values: Sequence[int], person: bytes) -> int:
    payload = np.asarray(values, dtype=np.uint64).tobytes()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8, person=person).digest(), "little")


def _initial_labels(g: MolGraph) -> list[int]:
    keys = _distance_keys(g)
    out = []
    for a in g.atoms:
        i = a.index
        local = np.array([ATOMIC_NUMBER[a.element], a.formal_charge, a.explicit_h, g.degree(i), g.bond_sum(i)],
                         dtype=np.int64)
        payload = np.concatenate([local, keys[i]]).tobytes()
        out.append(int.from_bytes(hashlib.blake2b(payload, digest_size=8, person=b"erp-atom").digest(), "little"))
    return out


def refine_labels(g: MolGraph) -> list[int]:
    """Neighbourhood-hash refinement until the atom partition stops splitting."""
    adj = [g.neighbors(i) for i in range(g.n_atoms)]
    labels = _initial_labels(g)
    nbrs = [[(int(g.bonds[i, j]), j) for j in adj[i]] for i in range(g.n_atoms)]
    n_classes = len(set(labels))
    for _ in range(g.n_atoms):
        new = []
        for i in range(g.n_atoms):
            flat = [labels[i]]
            for b, lab in sorted((b, labels[j]) for b, j in nbrs[i]):
                flat.extend((b, lab))
            new.append(_digest(flat, b"erp-refine"))
        labels = new
        k = len(set(labels))
        if k == n_classes:
            break
        n_classes = k
    return labels


def canonical_signature(g: MolGraph) -> str:
    """Permutation-invariant digest of a graph (atom maps ignored)."""
    labels = refine_labels(g)
    edges = sorted(
        (min(labels[i], labels[j]), max(labels[i], labels[j]), int(g.bonds[i, j]))
        for i in range(g.n_atoms) for j in range(i + 1, g.n_atoms) if g.bonds[i, j]
    )
    payload = f"{g.n_atoms}|{sorted(labels)}|{edges}"
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


def pattern_signature(d: ElectronDelta, r: Reaction) -> str:
    """Scaffold-free description of a redistribution: sorted (elem, elem, delta) multiset."""
    if not d:
        return EMPTY_PATTERN
    atoms = r.reactants.atoms
    terms = []
    for i, j, delta in d.entries:
        a, b = sorted((atoms[i].element, atoms[j].element), key=lambda e: (ATOMIC_NUMBER[e], e))
        terms.append((a, b, delta))
    terms.sort(key=lambda t: (ATOMIC_NUMBER[t[0]], ATOMIC_NUMBER[t[1]], t[2]))
    return ";".join(f"{a}-{b}:{delta:+d}" for a, b, delta in terms)


def product_graph(r: Reaction) -> MolGraph:
    """The full post-reaction graph used as the comparison target for predictions."""
    out = apply_delta(r.reactants, compute_delta(r))
    if out is None:
        raise ReactionError(f"reaction {r.id!r}: delta does not yield a valid graph")
    return out


def truth_signature(r: Reaction) -> str:
    return canonical_signature(product_graph(r))
