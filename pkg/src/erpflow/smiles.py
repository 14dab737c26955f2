"""Kekulé SMILES subset: parsing, writing and the reaction-per-line file format.

Supported: organic-subset atoms (B C N O P S F Cl Br I), bracket atoms with
H count, charge up to +/-2 and atom map, bonds ``- = #``, branches, ring
closures (``1``..``9``, ``%nn``) and ``.`` fragments. Directional bonds
``/ \\`` are read as single bonds and chirality marks are skipped; aromatic
(lowercase) atoms, ``:`` bonds and isotopes are rejected.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .molgraph import (
    MAX_ABS_CHARGE,
    MAX_VALENCE,
    Atom,
    ChemistryError,
    MolGraph,
    Reaction,
    ReactionError,
    disjoint_union,
)

ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
_DEFAULT_VALENCES = {
    "B": (3,), "C": (4,), "N": (3,), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}
_BOND_SYMBOL = {1: "", 2: "=", 3: "#"}
_BOND_ORDER = {"-": 1, "/": 1, "\\": 1, "=": 2, "#": 3}


class SmilesError(ChemistryError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


def implicit_hydrogens(element: str, bond_sum: int) -> int:
    for v in _DEFAULT_VALENCES[element]:
        if v >= bond_sum:
            return v - bond_sum
    return 0


def parse_smiles(text: str) -> MolGraph:
    text = text.strip()
    elements: list[str] = []
    charges: list[int] = []
    hcounts: list[int | None] = []  # None -> implicit
    maps: list[int | None] = []
    edges: dict[tuple[int, int], int] = {}
    ring_open: dict[int, tuple[int, int | None, int]] = {}

    prev: int | None = None
    stack: list[int | None] = []
    pending_bond: int | None = None
    pending_pos = 0
    pos = 0
    n = len(text)

    def add_edge(a: int, b: int, order: int, at: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            raise SmilesError("atom bonded to itself", at)
        if key in edges:
            raise SmilesError("duplicate bond between the same atoms", at)
        edges[key] = order

    def add_atom(el: str, charge: int, h: int | None, amap: int | None, at: int) -> None:
        nonlocal prev, pending_bond
        idx = len(elements)
        elements.append(el)
        charges.append(charge)
        hcounts.append(h)
        maps.append(amap)
        if prev is not None:
            add_edge(prev, idx, pending_bond or 1, at)
        elif pending_bond is not None:
            raise SmilesError("bond symbol without a preceding atom", pending_pos)
        pending_bond = None
        prev = idx

    while pos < n:
        c = text[pos]
        if c == "[":
            end = text.find("]", pos)
            if end < 0:
                raise SmilesError("unterminated bracket atom", pos)
            el, charge, h, amap = _parse_bracket(text[pos + 1:end], pos + 1)
            add_atom(el, charge, h, amap, pos)
            pos = end + 1
        elif c.isalpha():
            two = text[pos:pos + 2]
            if two in ("Cl", "Br"):
                sym, width = two, 2
            elif c in ORGANIC_SUBSET:
                sym, width = c, 1
            elif c in "bcnops":
                raise SmilesError(f"aromatic atom {c!r} not supported; provide a kekulized SMILES", pos)
            else:
                raise SmilesError(f"unsupported element or token {c!r}", pos)
            add_atom(sym, 0, None, None, pos)
            pos += width
        elif c in _BOND_ORDER:
            if pending_bond is not None:
                raise SmilesError("two consecutive bond symbols", pos)
            pending_bond, pending_pos = _BOND_ORDER[c], pos
            pos += 1
        elif c in ":$":
            raise SmilesError(f"bond type {c!r} not supported", pos)
        elif c == "(":
            if prev is None:
                raise SmilesError("branch opened without a preceding atom", pos)
            stack.append(prev)
            pos += 1
        elif c == ")":
            if not stack:
                raise SmilesError("unbalanced ')'", pos)
            if pending_bond is not None:
                raise SmilesError("dangling bond symbol before ')'", pos)
            prev = stack.pop()
            pos += 1
        elif c == "." :
            if pending_bond is not None:
                raise SmilesError("dangling bond symbol before '.'", pos)
            if stack:
                raise SmilesError("'.' inside an open branch", pos)
            prev = None
            pos += 1
        elif c.isdigit() or c == "%":
            start = pos
            if c == "%":
                digits = text[pos + 1:pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError("'%' must be followed by two digits", pos)
                num = int(digits)
                pos += 3
            else:
                num = int(c)
                pos += 1
            if prev is None:
                raise SmilesError("ring closure without a preceding atom", start)
            if num in ring_open:
                other, order, _ = ring_open.pop(num)
                if order is not None and pending_bond is not None and order != pending_bond:
                    raise SmilesError(f"conflicting bond orders on ring closure {num}", start)
                add_edge(other, prev, pending_bond or order or 1, start)
            else:
                ring_open[num] = (prev, pending_bond, start)
            pending_bond = None
        elif c.isspace():
            raise SmilesError("whitespace inside SMILES", pos)
        else:
            raise SmilesError(f"unexpected character {c!r}", pos)

    if pending_bond is not None:
        raise SmilesError("dangling bond symbol at end of input", pending_pos)
    if stack:
        raise SmilesError("unbalanced '('", n)
    if ring_open:
        num, (_, _, at) = next(iter(ring_open.items()))
        raise SmilesError(f"unclosed ring closure {num}", at)

    count = len(elements)
    bonds = np.zeros((count, count), dtype=np.int64)
    for (a, b), order in edges.items():
        bonds[a, b] = bonds[b, a] = order
    sums = bonds.sum(axis=1)
    atoms = []
    for i in range(count):
        h = hcounts[i]
        if h is None:
            if sums[i] > MAX_VALENCE[elements[i]]:
                raise SmilesError(f"valence violation on atom {i} ({elements[i]})")
            h = implicit_hydrogens(elements[i], int(sums[i]))
        atoms.append(Atom(elements[i], charges[i], h, maps[i], i))
    try:
        return MolGraph(tuple(atoms), bonds)
    except ChemistryError as exc:
        if isinstance(exc, SmilesError):
            raise
        raise SmilesError(str(exc)) from exc


def _parse_bracket(body: str, offset: int) -> tuple[str, int, int, int | None]:
    i = 0
    if body[:1].isdigit():
        raise SmilesError("isotopes are not supported", offset)
    if not body or not body[0].isalpha():
        raise SmilesError("bracket atom without element", offset)
    if body[0].islower():
        raise SmilesError(f"aromatic atom {body[0]!r} not supported; provide a kekulized SMILES", offset)
    if len(body) > 1 and body[1].islower() and body[:2] in MAX_VALENCE:
        el, i = body[:2], 2
    else:
        el, i = body[0], 1
    if el not in MAX_VALENCE:
        raise SmilesError(f"unsupported element {el!r}", offset)
    while i < len(body) and body[i] == "@":
        i += 1
    h = 0
    if i < len(body) and body[i] == "H":
        i += 1
        j = i
        while j < len(body) and body[j].isdigit():
            j += 1
        h = int(body[i:j]) if j > i else 1
        i = j
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        j = i + 1
        while j < len(body) and body[j] == body[i]:
            j += 1
        if j - i > 1:
            charge = sign * (j - i)
        else:
            k = j
            while k < len(body) and body[k].isdigit():
                k += 1
            charge = sign * (int(body[j:k]) if k > j else 1)
            j = k
        i = j
        if abs(charge) > MAX_ABS_CHARGE:
            raise SmilesError(f"charge {charge:+d} outside +/-{MAX_ABS_CHARGE}", offset)
    amap = None
    if i < len(body) and body[i] == ":":
        j = i + 1
        while j < len(body) and body[j].isdigit():
            j += 1
        if j == i + 1:
            raise SmilesError("atom map ':' without a number", offset + i)
        amap = int(body[i + 1:j])
        if amap < 1:
            raise SmilesError("atom map numbers must be positive", offset + i)
        i = j
    if i != len(body):
        raise SmilesError(f"unexpected text {body[i:]!r} in bracket atom", offset + i)
    return el, charge, h, amap


def _atom_token(g: MolGraph, i: int, with_maps: bool) -> str:
    a = g.atoms[i]
    amap = a.map_index if with_maps else None
    if (
        a.element in ORGANIC_SUBSET
        and a.formal_charge == 0
        and amap is None
        and a.explicit_h == implicit_hydrogens(a.element, g.bond_sum(i))
        and g.bond_sum(i) <= max(_DEFAULT_VALENCES[a.element])
    ):
        return a.element
    parts = ["[", a.element]
    if a.explicit_h:
        parts.append("H" if a.explicit_h == 1 else f"H{a.explicit_h}")
    if a.formal_charge:
        q = a.formal_charge
        parts.append(("+" if q > 0 else "-") + (str(abs(q)) if abs(q) > 1 else ""))
    if amap is not None:
        parts.append(f":{amap}")
    parts.append("]")
    return "".join(parts)


def _ring_label(num: int) -> str:
    return str(num) if num < 10 else f"%{num:02d}"


def write_smiles(g: MolGraph, with_maps: bool = True) -> str:
    """Deterministic SMILES: components in index order, DFS by ascending neighbour index."""
    n = g.n_atoms
    visited = [False] * n
    fragments = []
    nbrs = [g.neighbors(i) for i in range(n)]
    for root in range(n):
        if visited[root]:
            continue
        # pass 1: DFS tree and ring-closure edges
        order: list[int] = []
        parent = {root: -1}
        children: dict[int, list[int]] = {}
        closures: list[tuple[int, int]] = []
        rank: dict[int, int] = {}

        def dfs(u: int) -> None:
            visited[u] = True
            rank[u] = len(order)
            order.append(u)
            children[u] = []
            for v in nbrs[u]:
                if not visited[v]:
                    parent[v] = u
                    children[u].append(v)
                    dfs(v)
                elif v != parent[u] and rank[v] < rank[u] and (v, u) not in closures:
                    closures.append((v, u))

        _with_recursion(dfs, root, n)
        opens: dict[int, list[int]] = {}
        closes: dict[int, list[int]] = {}
        for a, b in closures:
            opens.setdefault(a, []).append(b)
            closes.setdefault(b, []).append(a)

        # pass 2: emit
        out: list[str] = []
        free: list[int] = []
        next_num = [1]
        label_of: dict[tuple[int, int], int] = {}

        def take() -> int:
            if free:
                free.sort()
                return free.pop(0)
            num = next_num[0]
            next_num[0] += 1
            return num

        def emit(u: int) -> None:
            out.append(_atom_token(g, u, with_maps))
            for a in sorted(closes.get(u, []), key=rank.__getitem__):
                num = label_of.pop((a, u))
                out.append(_ring_label(num))
                free.append(num)
            for b in sorted(opens.get(u, []), key=rank.__getitem__):
                num = take()
                label_of[(u, b)] = num
                out.append(_BOND_SYMBOL[int(g.bonds[u, b])] + _ring_label(num))
            kids = children[u]
            for k, v in enumerate(kids):
                sym = _BOND_SYMBOL[int(g.bonds[u, v])]
                if k < len(kids) - 1:
                    out.append("(" + sym)
                    emit(v)
                    out.append(")")
                else:
                    out.append(sym)
                    emit(v)

        _with_recursion(emit, root, n)
        fragments.append("".join(out))
    return ".".join(fragments)


def _with_recursion(fn, arg, n: int) -> None:
    import sys

    limit = sys.getrecursionlimit()
    if 4 * n + 100 > limit:
        sys.setrecursionlimit(4 * n + 100)
    fn(arg)


def parse_reaction(text: str, reaction_id: str = "") -> Reaction:
    """Parse ``reactants>>product`` (an agents field ``r>a>p`` is merged into the reactants)."""
    parts = text.strip().split(">")
    if len(parts) != 3:
        raise ReactionError("reaction must have the form 'reactants>>product'")
    reactant_text, agent_text, product_text = parts
    reactants = parse_smiles(reactant_text)
    if agent_text:
        reactants = disjoint_union([reactants, parse_smiles(agent_text)])
        if len({a.map_index for a in reactants.atoms if a.map_index}) != sum(
            1 for a in reactants.atoms if a.map_index
        ):
            raise ReactionError("duplicate atom maps between reactants and agents")
    return Reaction(reactants, parse_smiles(product_text), reaction_id)


def format_reaction(r: Reaction) -> str:
    line = f"{write_smiles(r.reactants)}>>{write_smiles(r.product)}"
    return f"{line} {r.id}" if r.id else line


class ReactionFileError(ChemistryError):
    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


def iter_reaction_lines(lines: Iterable[str]) -> Iterator[tuple[int, str, str]]:
    """Yield ``(line_number, reaction_text, id)`` for non-comment, non-blank lines."""
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        rid = fields[1] if len(fields) > 1 else f"L{lineno}"
        yield lineno, fields[0], rid


def read_reactions(path: str | os.PathLike, skip_errors: bool = False) -> tuple[list[Reaction], list[ReactionFileError]]:
    reactions, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, text, rid in iter_reaction_lines(fh):
            try:
                reactions.append(parse_reaction(text, rid))
            except ChemistryError as exc:
                err = ReactionFileError(str(exc), lineno)
                if not skip_errors:
                    raise err from exc
                errors.append(err)
    return reactions, errors


def write_reactions(path: str | os.PathLike, reactions: Iterable[Reaction], comments: Iterable[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.extend(format_reaction(r) for r in reactions)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
