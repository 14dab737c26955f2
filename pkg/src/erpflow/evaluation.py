"""Metrics and experiment harness: Top-K, HitRate@K, Avg.L, rare subsets, latency, ablations.

Products are compared by canonical graph signature throughout.
"""
from __future__ import annotations

import os
import statistics
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence, TypeVar

from . import expert as ex
from .inference import (
    ALL_ORDERS,
    CHIEF,
    CHIEF_DROP,
    DEFAULT_ORDER,
    SELECTED,
    TIERS,
    CandidatePool,
    InferenceOptions,
    PredictionList,
    collect_candidates,
    predict,
)
from .molgraph import MolGraph, Reaction, canonical_signature, compute_delta, pattern_signature, truth_signature
from .seqmoe import ExpertRegistry

TOP_KS = (1, 2, 3, 5, 10)
HIT_KS = (2, 3, 5, 10)
USPTO_ADJUSTMENT = 0.003

VARIANTS: dict[str, frozenset[str]] = {
    "chief_only": frozenset({CHIEF}),
    "seq_moe_only": frozenset({CHIEF, SELECTED}),
    "dropout_only": frozenset({CHIEF, CHIEF_DROP}),
    "full": frozenset(TIERS),
}

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("ERPFLOW_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int | None = None) -> list[R]:
    """Order-preserving map; results merge in input order whatever the thread count."""
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _sigs(p: PredictionList | Sequence[str]) -> list[str]:
    return p.signatures if isinstance(p, PredictionList) else list(p)


# -- metrics ------------------------------------------------------------------------

def topk_accuracy(predictions: Sequence[PredictionList | Sequence[str]], truths: Sequence[str], k: int,
                  adjust_uspto: bool = False) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not truths:
        return 0.0
    hits = sum(1 for p, t in zip(predictions, truths) if t in _sigs(p)[:k])
    acc = hits / len(truths)
    return acc - USPTO_ADJUSTMENT if adjust_uspto else acc


def hitrate_at_k(predictions: Sequence[PredictionList | Sequence[str]], truth_sets: Sequence[Iterable[str]],
                 k: int, min_products: int = 2) -> float:
    """Mean fraction of each qualifying reactant's true products found in its top-K list."""
    if k < 1:
        raise ValueError("K must be >= 1")
    rates = []
    for p, truth in zip(predictions, truth_sets):
        truth = set(truth)
        if len(truth) < max(min_products, 1):
            continue
        rates.append(len(set(_sigs(p)[:k]) & truth) / len(truth))
    return sum(rates) / len(rates) if rates else 0.0


def avg_list_length(predictions: Sequence[PredictionList | Sequence[str]]) -> float:
    if not predictions:
        raise ValueError("empty prediction set")
    return sum(len(_sigs(p)) for p in predictions) / len(predictions)


def pattern_frequencies(train: Sequence[Reaction]) -> dict[str, float]:
    if not train:
        raise ValueError("empty training set")
    counts = Counter(pattern_signature(compute_delta(r), r) for r in train)
    return {sig: c / len(train) for sig, c in counts.items()}


def rare_subset(train: Sequence[Reaction], test: Sequence[Reaction], threshold: float = 0.01) -> list[Reaction]:
    """Test reactions whose redistribution pattern makes up less than ``threshold`` of training data.

    Patterns never seen in training are always rare, including at ``threshold=0``.
    """
    freq = pattern_frequencies(train)

    def rare(r: Reaction) -> bool:
        f = freq.get(pattern_signature(compute_delta(r), r), 0.0)
        return f == 0.0 or f < threshold

    return [r for r in test if rare(r)]


@dataclass(frozen=True)
class GroupStats:
    fraction: float
    hitrate: float
    count: int


def groupwise_report(predictions: Sequence[PredictionList | Sequence[str]],
                     truth_sets: Sequence[Iterable[str]]) -> dict[int, GroupStats]:
    """Group by predicted-list length L; per group the share of reactions and HitRate@L."""
    groups: dict[int, list[float]] = {}
    for p, truth in zip(predictions, truth_sets):
        sigs, truth = _sigs(p), set(truth)
        rate = len(set(sigs) & truth) / len(truth) if truth else 0.0
        groups.setdefault(len(sigs), []).append(rate)
    total = sum(len(v) for v in groups.values())
    return {n: GroupStats(len(v) / total, sum(v) / len(v), len(v)) for n, v in sorted(groups.items())}


def multi_product_groups(reactions: Sequence[Reaction], min_products: int = 2) -> list[tuple[MolGraph, frozenset[str]]]:
    """Group reactions sharing a reactant graph; keep groups with at least ``min_products`` distinct products."""
    groups: dict[str, tuple[MolGraph, set[str]]] = {}
    for r in reactions:
        key = canonical_signature(r.reactants)
        graph, sigs = groups.setdefault(key, (r.reactants, set()))
        sigs.add(truth_signature(r))
    return [(g, frozenset(s)) for g, s in groups.values() if len(s) >= min_products]


# -- report -------------------------------------------------------------------------

@dataclass
class EvalReport:
    subset: str
    n_reactions: int
    topk: dict[int, float] = field(default_factory=dict)
    hitrate: dict[int, float] = field(default_factory=dict)
    avg_l: float = 0.0
    n_hitrate_groups: int = 0
    latency_ms: dict[str, float] = field(default_factory=dict)
    groupwise: dict[int, GroupStats] = field(default_factory=dict)
    adjustment_applied: bool = False

    def to_text(self) -> str:
        lines = [f"subset: {self.subset}", f"n_reactions: {self.n_reactions}",
                 f"adjustment_applied: {str(self.adjustment_applied).lower()}"]
        lines += [f"top{k}: {v:.6f}" for k, v in sorted(self.topk.items())]
        if self.n_hitrate_groups:
            lines.append(f"hitrate_groups: {self.n_hitrate_groups}")
            lines += [f"hitrate@{k}: {v:.6f}" for k, v in sorted(self.hitrate.items())]
        lines.append(f"avg_l: {self.avg_l:.6f}")
        lines += [f"latency_{k}_ms: {v:.4f}" for k, v in self.latency_ms.items()]
        for n, g in self.groupwise.items():
            lines.append(f"group_len{n}: fraction={g.fraction:.6f} hitrate={g.hitrate:.6f} count={g.count}")
        return "\n".join(lines) + "\n"

    def to_csv_lines(self) -> list[str]:
        rows = [f"topk,{k},{self.subset},{v:.6f}" for k, v in sorted(self.topk.items())]
        rows += [f"hitrate,{k},{self.subset},{v:.6f}" for k, v in sorted(self.hitrate.items())]
        rows.append(f"avg_l,,{self.subset},{self.avg_l:.6f}")
        rows += [f"latency_{k}_ms,,{self.subset},{v:.4f}" for k, v in self.latency_ms.items()]
        return rows


def report_for(subset: str, predictions: Sequence[PredictionList], truths: Sequence[str],
               adjust_uspto: bool = False) -> EvalReport:
    rep = EvalReport(subset, len(truths), adjustment_applied=adjust_uspto)
    if truths:
        rep.topk = {k: topk_accuracy(predictions, truths, k, adjust_uspto) for k in TOP_KS}
        rep.avg_l = avg_list_length(predictions)
        rep.groupwise = groupwise_report(predictions, [{t} for t in truths])
    return rep


def add_hitrate(rep: EvalReport, predictions: Sequence[PredictionList],
                truth_sets: Sequence[frozenset[str]], min_products: int = 2) -> EvalReport:
    rep.hitrate = {k: hitrate_at_k(predictions, truth_sets, k, min_products) for k in HIT_KS}
    rep.n_hitrate_groups = sum(1 for t in truth_sets if len(t) >= min_products)
    return rep


# -- latency --------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyStats:
    single_pass_ms: float
    single_pass_std_ms: float
    pipeline_ms: float
    pipeline_std_ms: float
    passes_per_sample: float

    @property
    def ratio(self) -> float:
        """Pipeline time over (pass count x single-pass time); 1.0 means no merge overhead."""
        return self.pipeline_ms / (self.passes_per_sample * self.single_pass_ms)

    def as_dict(self) -> dict[str, float]:
        return {"single_pass": self.single_pass_ms, "single_pass_std": self.single_pass_std_ms,
                "pipeline": self.pipeline_ms, "pipeline_std": self.pipeline_std_ms,
                "passes_per_sample": self.passes_per_sample}


def latency_benchmark(registry: ExpertRegistry, reactants: Sequence[MolGraph], repetitions: int = 1,
                      options: InferenceOptions = InferenceOptions()) -> LatencyStats:
    """Serial wall-clock per sample for one mask-free chief pass and for the full pipeline."""
    if not reactants:
        raise ValueError("latency benchmark needs at least one sample")
    if registry.chief is None:
        raise ValueError("registry has no chief expert")
    cfg = registry.expert_config
    ex.predict_products(registry.chief, cfg, reactants[0])
    predict(reactants[0], registry, options)
    single, pipeline, passes = [], [], []
    for _ in range(repetitions):
        for g in reactants:
            t0 = time.perf_counter()
            ex.predict_products(registry.chief, cfg, g)
            single.append((time.perf_counter() - t0) * 1e3)
        for g in reactants:
            t0 = time.perf_counter()
            out = predict(g, registry, options)
            pipeline.append((time.perf_counter() - t0) * 1e3)
            passes.append(out.passes)

    def std(xs: list[float]) -> float:
        return statistics.pstdev(xs) if len(xs) > 1 else 0.0

    return LatencyStats(statistics.fmean(single), std(single), statistics.fmean(pipeline), std(pipeline),
                        statistics.fmean(passes))


# -- experiment runs -------------------------------------------------------------------

def _pools(registry: ExpertRegistry, graphs: Sequence[MolGraph], options: InferenceOptions,
           threads: int | None) -> list[CandidatePool]:
    return parallel_map(lambda g: collect_candidates(g, registry, options), graphs, threads)


def ablation_run(registry: ExpertRegistry, test: Sequence[Reaction],
                 conflict_groups: Sequence[tuple[MolGraph, frozenset[str]]] = (),
                 variants: Iterable[str] = tuple(VARIANTS), orders: Iterable[tuple[str, ...]] = (DEFAULT_ORDER,),
                 options: InferenceOptions = InferenceOptions(), threads: int | None = None,
                 min_products: int = 2) -> dict[str, EvalReport]:
    """One report per (variant, tier order); all share a single set of forward passes."""
    options = replace(options, tiers=frozenset(TIERS))
    truths = [truth_signature(r) for r in test]
    pools = _pools(registry, [r.reactants for r in test], options, threads)
    cpools = _pools(registry, [g for g, _ in conflict_groups], options, threads)
    truth_sets = [t for _, t in conflict_groups]
    out: dict[str, EvalReport] = {}
    variants, orders = list(variants), [tuple(o) for o in orders]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
        for order in orders:
            name = v if len(orders) == 1 else f"{v}[{'>'.join(order)}]"
            preds = [p.merge(order, VARIANTS[v]) for p in pools]
            rep = report_for(name, preds, truths)
            if cpools:
                add_hitrate(rep, [p.merge(order, VARIANTS[v]) for p in cpools], truth_sets, min_products)
            out[name] = rep
    return out


def strategy_table(registry: ExpertRegistry, test: Sequence[Reaction],
                   options: InferenceOptions = InferenceOptions(), threads: int | None = None) -> dict[str, EvalReport]:
    """The six chief-first tier orders of the full pipeline."""
    return ablation_run(registry, test, (), ("full",), ALL_ORDERS, options, threads)


def evaluate(registry: ExpertRegistry, test: Sequence[Reaction], train: Sequence[Reaction] | None = None,
             options: InferenceOptions = InferenceOptions(), rare_threshold: float | None = None,
             conflict: Sequence[Reaction] = (), adjust_uspto: bool = False, latency_samples: int = 0,
             min_products: int = 2, threads: int | None = None) -> list[EvalReport]:
    """Main report on ``test`` plus optional rare-pattern and multi-product reports."""
    preds = parallel_map(lambda r: predict(r.reactants, registry, options), list(test), threads)
    truths = [truth_signature(r) for r in test]
    main = report_for("all", preds, truths, adjust_uspto)
    groups = multi_product_groups(list(test) + list(conflict), min_products)
    if groups:
        gpreds = parallel_map(lambda g: predict(g[0], registry, options), groups, threads)
        add_hitrate(main, gpreds, [t for _, t in groups], min_products)
    if latency_samples and test:
        main.latency_ms = latency_benchmark(
            registry, [r.reactants for r in test[:latency_samples]], 1, options).as_dict()
    reports = [main]
    if rare_threshold is not None and train is not None:
        rare = rare_subset(train, test, rare_threshold)
        index = {r.id: k for k, r in enumerate(test)}
        reports.append(report_for(f"rare<{rare_threshold:g}", [preds[index[r.id]] for r in rare],
                                  [truths[index[r.id]] for r in rare], adjust_uspto))
    return reports
