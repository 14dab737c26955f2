"""Fingerprint-gated expert selection, MC-dropout sampling and rank merging."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import expert as ex
from .autodiff import ParamStore
from .expert import ExpertConfig
from .fingerprint import cosine_similarity, morgan_fingerprint
from .molgraph import ElectronDelta, MolGraph, apply_delta, canonical_signature
from .seqmoe import ExpertRecord, ExpertRegistry
from .smiles import write_smiles

CHIEF = "chief"
SELECTED = "selected"
CHIEF_DROP = "chief_drop"
SELECTED_DROP = "selected_drop"
TIERS = (CHIEF, SELECTED, CHIEF_DROP, SELECTED_DROP)
DEFAULT_ORDER = (CHIEF, SELECTED, CHIEF_DROP, SELECTED_DROP)
# every ranking strategy keeps the chief first and permutes the other three tiers
ALL_ORDERS = tuple((CHIEF,) + rest for rest in itertools.permutations(TIERS[1:]))


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class InferenceOptions:
    top_n: int = 2
    n_seeds: int = 5
    dropout_rate: float = 0.1
    base_seed: int = 0
    order: tuple[str, ...] = DEFAULT_ORDER
    tiers: frozenset[str] = frozenset(TIERS)

    def __post_init__(self) -> None:
        if sorted(self.order) != sorted(TIERS):
            raise ValueError(f"order must be a permutation of {TIERS}")
        if not self.tiers <= set(TIERS):
            raise ValueError(f"unknown tiers {sorted(self.tiers - set(TIERS))}")
        if self.top_n < 0 or self.n_seeds < 0:
            raise ValueError("top_n and n_seeds must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + k for k in range(self.n_seeds)]

    def expected_passes(self, n_selected: int) -> int:
        t = self.tiers
        return ((CHIEF in t) + (SELECTED in t) * n_selected
                + (CHIEF_DROP in t) * self.n_seeds + (SELECTED_DROP in t) * n_selected * self.n_seeds)


@dataclass(frozen=True)
class RankedPrediction:
    product: MolGraph
    signature: str
    tier: str
    expert_id: int | None = None
    similarity: float | None = None
    seed: int | None = None

    def metadata(self) -> str:
        sim = "" if self.similarity is None else f"{self.similarity:.6f}"
        eid = "" if self.expert_id is None else str(self.expert_id)
        seed = "" if self.seed is None else str(self.seed)
        return f"{self.tier}:{eid}:{seed}:{sim}"


@dataclass
class PredictionList:
    items: list[RankedPrediction] = field(default_factory=list)
    passes: int = 0
    selected: list[tuple[int, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, k):
        return self.items[k]

    @property
    def signatures(self) -> list[str]:
        return [p.signature for p in self.items]


@dataclass(frozen=True)
class Candidate:
    """Raw output of one forward pass before merging; ``product`` is None when invalid."""

    product: MolGraph | None
    tier: str
    expert_id: int | None = None
    similarity: float | None = None
    seed: int | None = None
    signature: str | None = None


def sort_key(c: Candidate | RankedPrediction, order: Sequence[str] = DEFAULT_ORDER) -> tuple:
    sim = -(c.similarity or 0.0)
    eid = -1 if c.expert_id is None else c.expert_id
    seed = -1 if c.seed is None else c.seed
    return (order.index(c.tier), sim, eid, seed)


def select_experts(reactants: MolGraph, registry: ExpertRegistry, n: int,
                   fingerprint: np.ndarray | None = None) -> list[tuple[ExpertRecord, float]]:
    """Top-``n`` experts by cosine similarity of centroid to reactant fingerprint."""
    if n < 1 or not registry.experts:
        return []
    fp = fingerprint if fingerprint is not None else morgan_fingerprint(reactants, registry.fp_radius, registry.fp_length)
    scored = [(rec, cosine_similarity(fp, rec.centroid)) for rec in registry.experts]
    scored.sort(key=lambda t: (-t[1], t[0].expert_id))
    return scored[:n]


def mc_dropout_predict(params: ParamStore, config: ExpertConfig, reactants: MolGraph,
                       seeds: Sequence[int], rate: float = 0.1) -> list[tuple[MolGraph | None, int]]:
    if not seeds:
        raise ValueError("at least one seed is required")
    return [(ex.predict_products(params, config, reactants, seed, rate), seed) for seed in seeds]


def rank_and_merge(chief_pred: Iterable[Candidate], selected_preds: Iterable[Candidate],
                   chief_drop_preds: Iterable[Candidate], selected_drop_preds: Iterable[Candidate],
                   order: Sequence[str] = DEFAULT_ORDER) -> PredictionList:
    """Concatenate tiers in ``order``, sort within tiers, drop invalid entries and duplicates."""
    tiers = {CHIEF: list(chief_pred), SELECTED: list(selected_preds),
             CHIEF_DROP: list(chief_drop_preds), SELECTED_DROP: list(selected_drop_preds)}
    out = PredictionList()
    seen: set[str] = set()
    for tier in order:
        for c in sorted(tiers[tier], key=lambda c: sort_key(c, order)):
            if c.product is None:
                continue
            sig = c.signature or canonical_signature(c.product)
            if sig in seen:
                continue
            seen.add(sig)
            out.items.append(RankedPrediction(c.product, sig, tier, c.expert_id, c.similarity, c.seed))
    return out


class _DeltaCache:
    """Products and signatures keyed by discretised delta; passes on one input mostly agree."""

    def __init__(self, reactants: MolGraph):
        self.reactants = reactants
        self.cache: dict[ElectronDelta, tuple[MolGraph | None, str | None]] = {}

    def resolve(self, delta: ElectronDelta) -> tuple[MolGraph | None, str | None]:
        if delta not in self.cache:
            product = apply_delta(self.reactants, delta)
            self.cache[delta] = (product, None if product is None else canonical_signature(product))
        return self.cache[delta]


@dataclass
class CandidatePool:
    """All tier-tagged forward-pass outputs for one input."""

    tiers: dict[str, list[Candidate]]
    selected: list[tuple[int, float]]
    passes: int

    def merge(self, order: Sequence[str] = DEFAULT_ORDER, tiers: Iterable[str] = TIERS) -> PredictionList:
        keep = set(tiers)
        pick = {t: (self.tiers[t] if t in keep else []) for t in TIERS}
        out = rank_and_merge(pick[CHIEF], pick[SELECTED], pick[CHIEF_DROP], pick[SELECTED_DROP], order)
        out.passes = sum(len(pick[t]) for t in TIERS)
        out.selected = list(self.selected)
        return out


def collect_candidates(reactants: MolGraph, registry: ExpertRegistry,
                       options: InferenceOptions = InferenceOptions()) -> CandidatePool:
    """Run every forward pass the enabled tiers need; selected experts' plain pass is mask-free."""
    if registry.chief is None:
        raise InferenceError("registry has no chief expert")
    cfg = registry.expert_config
    cache = _DeltaCache(reactants)
    passes = 0

    def run(params: ParamStore, tier: str, seed: int | None, rec: ExpertRecord | None = None,
            sim: float | None = None) -> Candidate:
        nonlocal passes
        passes += 1
        rate = options.dropout_rate if seed is not None else None
        delta = ex.discretize(ex.predict_soft_delta(params, cfg, reactants, seed, rate))
        product, sig = cache.resolve(delta)
        return Candidate(product, tier, None if rec is None else rec.expert_id, sim, seed, sig)

    needs_selection = SELECTED in options.tiers or SELECTED_DROP in options.tiers
    selected = select_experts(reactants, registry, options.top_n) if needs_selection else []
    tiers: dict[str, list[Candidate]] = {t: [] for t in TIERS}
    if CHIEF in options.tiers:
        tiers[CHIEF].append(run(registry.chief, CHIEF, None))
    if SELECTED in options.tiers:
        tiers[SELECTED] = [run(rec.params, SELECTED, None, rec, sim) for rec, sim in selected]
    if CHIEF_DROP in options.tiers:
        tiers[CHIEF_DROP] = [run(registry.chief, CHIEF_DROP, s) for s in options.seeds]
    if SELECTED_DROP in options.tiers:
        tiers[SELECTED_DROP] = [run(rec.params, SELECTED_DROP, s, rec, sim)
                                for rec, sim in selected for s in options.seeds]
    return CandidatePool(tiers, [(rec.expert_id, sim) for rec, sim in selected], passes)


def predict(reactants: MolGraph, registry: ExpertRegistry, options: InferenceOptions = InferenceOptions()) -> PredictionList:
    return collect_candidates(reactants, registry, options).merge(options.order, options.tiers)


def format_prediction_line(reaction_id: str, preds: PredictionList, verbose: bool = False) -> str:
    """``id<TAB>smiles|smiles|...``; verbose appends ``tier:expert:seed:similarity`` per candidate."""
    parts = []
    for p in preds:
        smi = write_smiles(p.product, with_maps=False)
        parts.append(f"{smi} {p.metadata()}" if verbose else smi)
    return f"{reaction_id}\t" + "|".join(parts)


def parse_prediction_line(line: str) -> tuple[str, list[str]]:
    rid, _, rest = line.rstrip("\n").partition("\t")
    return rid, [p.split(" ")[0] for p in rest.split("|")] if rest else []
