"""Synthetic reaction corpora with planted majority/minority bond-change patterns.

Built-in templates:

* ``substitution``: alkyl chloride + primary amine, C-Cl breaks and C-N forms.
* ``silylation``: alkyl chloride + alkylsilane, C-Cl breaks and C-Si forms.
* ``addition``: terminal alkene + HBr, C=C drops to C-C and Br adds to the inner carbon.
* ``elimination``: primary alkyl bromide, C-Br breaks and a C=C forms.

Substitution and silylation share a conflict group: a *conflict* reaction
carries the reagents of both (chloride, amine and silane), so identical-
looking reactant sets can end in either product.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .molgraph import (
    MAX_VALENCE,
    Atom,
    ChemistryError,
    ElectronDelta,
    MolGraph,
    Reaction,
    apply_delta,
    canonical_signature,
    compute_delta,
    truth_signature,
)
from .smiles import format_reaction, implicit_hydrogens, parse_reaction, read_reactions, write_reactions


class CorpusSpecError(ValueError):
    pass


class _Builder:
    def __init__(self) -> None:
        self.elements: list[str] = []
        self.edges: dict[tuple[int, int], int] = {}

    def atom(self, element: str) -> int:
        self.elements.append(element)
        return len(self.elements) - 1

    def bond(self, a: int, b: int, order: int = 1) -> None:
        self.edges[(min(a, b), max(a, b))] = order

    def bond_sum(self, i: int) -> int:
        return sum(o for (a, b), o in self.edges.items() if i in (a, b))

    def graph(self) -> MolGraph:
        n = len(self.elements)
        bonds = np.zeros((n, n), dtype=np.int64)
        for (a, b), o in self.edges.items():
            bonds[a, b] = bonds[b, a] = o
        sums = bonds.sum(axis=1)
        atoms = tuple(
            Atom(el, 0, implicit_hydrogens(el, int(sums[i])) if el != "Si" else 4 - int(sums[i]), i + 1, i)
            for i, el in enumerate(self.elements)
        )
        return MolGraph(atoms, bonds)


def _alkyl(b: _Builder, rng: np.random.Generator, max_carbons: int = 5) -> int:
    """Random saturated scaffold (chain, ring or ether chain); returns the attachment carbon."""
    kind = rng.choice(["chain", "ring", "ether"], p=[0.6, 0.2, 0.2])
    if kind == "ring":
        size = int(rng.integers(5, 7))
        ring = [b.atom("C") for _ in range(size)]
        for k in range(size):
            b.bond(ring[k], ring[(k + 1) % size])
        if rng.random() < 0.4:
            b.bond(ring[int(rng.integers(1, size))], b.atom("C"))
        return ring[0]
    n = int(rng.integers(1, max_carbons + 1))
    chain = [b.atom("C")]
    for k in range(1, n):
        nxt = b.atom("O" if kind == "ether" and k == n // 2 + 1 and k >= 2 else "C")
        b.bond(chain[-1], nxt)
        chain.append(nxt)
    if n >= 3 and rng.random() < 0.3:
        host = chain[int(rng.integers(1, n - 1))]
        if b.elements[host] == "C" and b.bond_sum(host) <= 2:
            b.bond(host, b.atom("C"))
    if b.elements[chain[-1]] == "O":
        b.bond(chain[-1], b.atom("C"))
    return chain[0]


def _alkyl_chloride(b: _Builder, rng: np.random.Generator) -> dict[str, int]:
    c = b.atom("C")
    b.bond(_alkyl(b, rng), c)
    cl = b.atom("Cl")
    b.bond(c, cl)
    return {"C": c, "Cl": cl}


def _amine(b: _Builder, rng: np.random.Generator) -> dict[str, int]:
    n = b.atom("N")
    b.bond(_alkyl(b, rng, 4), n)
    return {"N": n}


def _silane(b: _Builder, rng: np.random.Generator) -> dict[str, int]:
    si = b.atom("Si")
    b.bond(_alkyl(b, rng, 3), si)
    return {"Si": si}


def _alkene_hbr(b: _Builder, rng: np.random.Generator) -> dict[str, int]:
    c1, c2 = b.atom("C"), b.atom("C")
    b.bond(_alkyl(b, rng), c1)
    b.bond(c1, c2, 2)
    return {"C1": c1, "C2": c2, "Br": b.atom("Br")}


def _alkyl_bromide(b: _Builder, rng: np.random.Generator) -> dict[str, int]:
    ca, cb = b.atom("C"), b.atom("C")
    b.bond(_alkyl(b, rng), ca)
    b.bond(ca, cb)
    br = b.atom("Br")
    b.bond(cb, br)
    return {"Ca": ca, "Cb": cb, "Br": br}


MOLECULE_BUILDERS: dict[str, Callable[[_Builder, np.random.Generator], dict[str, int]]] = {
    "alkyl_chloride": _alkyl_chloride,
    "amine": _amine,
    "silane": _silane,
    "alkene_hbr": _alkene_hbr,
    "alkyl_bromide": _alkyl_bromide,
}


@dataclass(frozen=True)
class PatternTemplate:
    name: str
    molecules: tuple[str, ...]
    recipe: tuple[tuple[str, str, int], ...]
    conflict_group: str | None = None


BUILTIN_TEMPLATES: dict[str, PatternTemplate] = {
    t.name: t for t in (
        PatternTemplate("substitution", ("alkyl_chloride", "amine"), (("C", "Cl", -1), ("C", "N", 1)), "alkyl_halide"),
        PatternTemplate("silylation", ("alkyl_chloride", "silane"), (("C", "Cl", -1), ("C", "Si", 1)), "alkyl_halide"),
        PatternTemplate("addition", ("alkene_hbr",), (("C1", "C2", -1), ("C1", "Br", 1))),
        PatternTemplate("elimination", ("alkyl_bromide",), (("Ca", "Cb", 1), ("Cb", "Br", -1))),
    )
}


@dataclass(frozen=True)
class CorpusSpec:
    shares: dict[str, float] = field(default_factory=lambda: {"substitution": 0.9, "silylation": 0.1})
    total: int = 1000
    test_fraction: float = 0.2
    conflict_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.shares:
            raise CorpusSpecError("at least one template share is required")
        for name, share in self.shares.items():
            if name not in BUILTIN_TEMPLATES:
                raise CorpusSpecError(f"unknown template {name!r}")
            if not 0.0 < share <= 1.0:
                raise CorpusSpecError(f"share of {name!r} must lie in (0, 1]")
        if abs(sum(self.shares.values()) - 1.0) > 1e-9:
            raise CorpusSpecError("template shares must sum to 1")
        if not 0.0 <= self.conflict_fraction <= 1.0:
            raise CorpusSpecError("conflict_fraction must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0 or self.total < 1:
            raise CorpusSpecError("need total >= 1 and test_fraction in [0, 1)")


@dataclass(frozen=True)
class ConflictCase:
    """One reactant set with several ground-truth outcomes."""

    reactants: MolGraph
    reactions: tuple[Reaction, ...]

    @property
    def truth_set(self) -> frozenset[str]:
        return frozenset(truth_signature(r) for r in self.reactions)


@dataclass
class Corpus:
    train: list[Reaction]
    test: list[Reaction]
    conflict_test: list[ConflictCase]
    templates: dict[str, str]  # reaction id -> template name


def _quota(shares: dict[str, float], n: int) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` items to shares (deterministic)."""
    names = sorted(shares)
    raw = {k: shares[k] * n for k in names}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(names, key=lambda k: (-(raw[k] - counts[k]), k))[:left]:
        counts[k] += 1
    return counts


def _reactant_set(molecules: tuple[str, ...], rng: np.random.Generator) -> tuple[MolGraph, dict[str, int]]:
    b = _Builder()
    roles: dict[str, int] = {}
    for mol in molecules:
        roles.update(MOLECULE_BUILDERS[mol](b, rng))
    return b.graph(), roles


def _react(reactants: MolGraph, roles: dict[str, int], template: PatternTemplate, rid: str) -> Reaction:
    delta = ElectronDelta.from_pairs({(roles[a], roles[b]): d for a, b, d in template.recipe})
    product = apply_delta(reactants, delta)
    if product is None:
        raise ChemistryError(f"template {template.name} produced an invalid product")
    r = Reaction(reactants, product, rid)
    if compute_delta(r) != delta:
        raise ChemistryError(f"template {template.name}: delta round trip failed")
    back = parse_reaction(format_reaction(r).split()[0], rid)
    if canonical_signature(back.product) != canonical_signature(product):
        raise ChemistryError(f"template {template.name}: SMILES round trip failed")
    return r


def _conflict_molecules(group: str, spec: CorpusSpec) -> tuple[str, ...]:
    mols: list[str] = []
    for name in sorted(spec.shares):
        t = BUILTIN_TEMPLATES[name]
        if t.conflict_group == group:
            mols.extend(m for m in t.molecules if m not in mols)
    return tuple(mols)


def _conflict_groups(spec: CorpusSpec) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in sorted(spec.shares):
        g = BUILTIN_TEMPLATES[name].conflict_group
        if g is not None:
            groups.setdefault(g, []).append(name)
    return {g: names for g, names in groups.items() if len(names) >= 2}


def _split(spec: CorpusSpec, n: int, prefix: str, rng: np.random.Generator,
           templates: dict[str, str]) -> list[Reaction]:
    groups = _conflict_groups(spec)
    plan: list[tuple[str, bool]] = []
    for name, count in _quota(spec.shares, n).items():
        group = BUILTIN_TEMPLATES[name].conflict_group
        n_conf = int(round(spec.conflict_fraction * count)) if group in groups else 0
        plan.extend([(name, True)] * n_conf + [(name, False)] * (count - n_conf))
    order = rng.permutation(len(plan))
    out = []
    for k, idx in enumerate(order):
        name, conflict = plan[idx]
        t = BUILTIN_TEMPLATES[name]
        mols = _conflict_molecules(t.conflict_group, spec) if conflict else t.molecules
        reactants, roles = _reactant_set(mols, rng)
        rid = f"{prefix}{k:05d}"
        out.append(_react(reactants, roles, t, rid))
        templates[rid] = name
    return out


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    n_test = int(round(spec.total * spec.test_fraction))
    templates: dict[str, str] = {}
    train = _split(spec, spec.total - n_test, "train", rng, templates)
    test = _split(spec, n_test, "test", rng, templates)
    cases: list[ConflictCase] = []
    groups = _conflict_groups(spec)
    n_conf = int(round(spec.conflict_fraction * n_test)) if groups else 0
    group_names = sorted(groups)
    for k in range(n_conf):
        group = group_names[k % len(group_names)]
        reactants, roles = _reactant_set(_conflict_molecules(group, spec), rng)
        reactions = tuple(
            _react(reactants, roles, BUILTIN_TEMPLATES[name], f"conflict{k:05d}.{name}")
            for name in groups[group]
        )
        case = ConflictCase(reactants, reactions)
        if len(case.truth_set) < 2:
            raise ChemistryError("conflict case collapsed to a single product")
        cases.append(case)
    return Corpus(train, test, cases, templates)


def conflict_reactions(cases: list[ConflictCase]) -> list[Reaction]:
    return [r for c in cases for r in c.reactions]


def write_corpus(path: str | Path, reactions: list[Reaction], comments: tuple[str, ...] = ()) -> None:
    write_reactions(path, reactions, comments)


def read_corpus(path: str | Path) -> list[Reaction]:
    return read_reactions(path)[0]


# -- spec files ------------------------------------------------------------------------------

_CORPUS_KEYS = {"total": int, "test_fraction": float, "conflict_fraction": float, "seed": int}


def load_corpus_spec(path: str | Path) -> CorpusSpec:
    """INI file with a ``[corpus]`` section and a ``[shares]`` section (template = share)."""
    cp = configparser.ConfigParser()
    try:
        read = cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise CorpusSpecError(f"cannot parse corpus spec: {exc}") from exc
    if not read:
        raise CorpusSpecError(f"cannot read corpus spec {path}")
    unknown = set(cp.sections()) - {"corpus", "shares"}
    if unknown:
        raise CorpusSpecError(f"unknown sections {sorted(unknown)}")
    kwargs: dict = {}
    if cp.has_section("corpus"):
        for key, value in cp.items("corpus"):
            if key not in _CORPUS_KEYS:
                raise CorpusSpecError(f"unknown key corpus.{key}")
            try:
                kwargs[key] = _CORPUS_KEYS[key](value)
            except ValueError as exc:
                raise CorpusSpecError(f"bad value for corpus.{key}: {value!r}") from exc
    if cp.has_section("shares"):
        try:
            kwargs["shares"] = {k: float(v) for k, v in cp.items("shares")}
        except ValueError as exc:
            raise CorpusSpecError(f"bad share value: {exc}") from exc
    return CorpusSpec(**kwargs)


def dump_corpus_spec(spec: CorpusSpec) -> str:
    lines = ["[corpus]"]
    lines += [f"{k} = {getattr(spec, k)}" for k in _CORPUS_KEYS]
    lines += ["", "[shares]"]
    lines += [f"{k} = {v!r}" for k, v in sorted(spec.shares.items())]
    return "\n".join(lines) + "\n"


# -- random molecules for round-trip testing ------------------------------------------------

_RANDOM_ELEMENTS = ("C", "C", "C", "C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "B", "Si")


def random_molecule(rng: np.random.Generator, max_atoms: int = 14) -> MolGraph:
    """Random valid graph: a spanning forest plus extra ring bonds, random charges and H counts."""
    while True:
        n = int(rng.integers(1, max_atoms + 1))
        elements = [str(rng.choice(_RANDOM_ELEMENTS)) for _ in range(n)]
        charges = [0] * n
        for i, el in enumerate(elements):
            if el == "N" and rng.random() < 0.15:
                charges[i] = 1
            elif el == "O" and rng.random() < 0.15:
                charges[i] = -1
        cap = [MAX_VALENCE[el] + q for el, q in zip(elements, charges)]
        bonds = np.zeros((n, n), dtype=np.int64)

        def room(i: int) -> int:
            return cap[i] - int(bonds[i].sum())

        for i in range(1, n):
            if rng.random() < 0.1:
                continue  # start a new fragment
            cands = [j for j in range(i) if room(j) > 0]
            if not cands or room(i) <= 0:
                continue
            j = int(rng.choice(cands))
            order = int(rng.integers(1, min(3, room(i), room(j)) + 1))
            bonds[i, j] = bonds[j, i] = order
        for _ in range(int(rng.integers(0, 3))):
            i, j = (int(x) for x in rng.choice(n, size=2, replace=True))
            if i != j and bonds[i, j] == 0 and room(i) > 0 and room(j) > 0:
                bonds[i, j] = bonds[j, i] = 1
        atoms = []
        for i, el in enumerate(elements):
            h = int(rng.integers(0, room(i) + 1)) if room(i) > 0 else 0
            atoms.append(Atom(el, charges[i], h, None, i))
        try:
            return MolGraph(tuple(atoms), bonds)
        except ChemistryError:
            continue
