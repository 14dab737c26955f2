"""Sequential mixture-of-experts training.

A warmed-up expert is tuned on a shrinking dataset: after each expert's
``t`` epochs, the reactions it predicted exactly after every one of those
epochs become its correctness set and leave the pool; the next expert keeps
tuning from the same parameters on what remains. A chief expert is trained
separately on all data.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import expert as ex
from .autodiff import AdamWConfig, ParamStore
from .expert import ExpertConfig, TrainingExample
from .fingerprint import DEFAULT_LENGTH, DEFAULT_RADIUS, centroid, morgan_fingerprint

log = logging.getLogger(__name__)

REGISTRY_MAGIC = b"ERPREG\x00\x00"
REGISTRY_VERSION = 1

# stream tags for shuffling / init / dropout seeds
_PHASE_WARMUP = 0
_PHASE_EXPERT = 1
_PHASE_CHIEF = 2


class TrainingDivergence(ArithmeticError):
    pass


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class SeqTrainConfig:
    warmup_iters: int = 20
    n_experts: int = 40
    t_per_expert: int = 2
    max_total_iters: int = 80
    chief_iters: int = 100
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    lr_warmup_steps: int = 20
    stall_limit: int = 3
    training_dropout: bool = True

    def __post_init__(self) -> None:
        if self.n_experts * self.t_per_expert > self.max_total_iters:
            raise ValueError("n_experts * t_per_expert must not exceed max_total_iters")
        if min(self.warmup_iters, self.chief_iters) < 0 or self.t_per_expert < 1 or self.n_experts < 0:
            raise ValueError("iteration counts must be non-negative and t_per_expert >= 1")
        if self.batch_size < 1 or self.stall_limit < 1:
            raise ValueError("batch_size and stall_limit must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExpertRecord:
    expert_id: int
    params: ParamStore
    correct_ids: tuple[str, ...]
    centroid: np.ndarray


@dataclass
class ExpertRegistry:
    expert_config: ExpertConfig
    chief: ParamStore | None
    experts: list[ExpertRecord] = field(default_factory=list)
    fp_radius: int = DEFAULT_RADIUS
    fp_length: int = DEFAULT_LENGTH
    manifest: dict = field(default_factory=dict)

    def check_partition(self, dataset_ids: Sequence[str] | None = None) -> None:
        seen: set[str] = set()
        for rec in self.experts:
            ids = set(rec.correct_ids)
            if not ids:
                raise RegistryError(f"expert {rec.expert_id} has an empty correctness set")
            if ids & seen:
                raise RegistryError(f"expert {rec.expert_id} shares reactions with an earlier expert")
            seen |= ids
        if dataset_ids is not None and not seen <= set(dataset_ids):
            raise RegistryError("correctness sets reference reactions outside the training data")


@dataclass
class ExpertStep:
    """Log entry for one expert of the sequential chain."""

    expert_id: int
    pool_size: int
    correct: int
    remaining: int
    losses: list[float]
    stored: bool


# -- helpers ------------------------------------------------------------------------

def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size) if n else 0


def dataset_digest(examples: Sequence[TrainingExample]) -> str:
    h = hashlib.sha256()
    for e in sorted(examples, key=lambda e: e.id):
        h.update(e.id.encode())
        h.update(repr(e.delta.entries).encode())
        h.update(e.graph.bonds.tobytes())
        h.update("".join(f"{a.element}{a.formal_charge}{a.explicit_h}" for a in e.graph.atoms).encode())
    return h.hexdigest()


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def run_epoch(params: ParamStore, config: ExpertConfig, examples: Sequence[TrainingExample],
              optim: AdamWConfig, tcfg: SeqTrainConfig, phase: int, index: int, epoch: int) -> float:
    """One pass in a shuffled order seeded by ``(seed, phase, index, epoch)``; returns mean loss."""
    rng = np.random.default_rng([tcfg.seed, phase, index, epoch])
    order = rng.permutation(len(examples))
    dropout_seed = _seed(tcfg.seed, phase, 7) if tcfg.training_dropout else None
    losses = []
    for start in range(0, len(order), tcfg.batch_size):
        batch = [examples[i] for i in order[start:start + tcfg.batch_size]]
        try:
            _, value = ex.train_step(params, config, batch, optim, dropout_seed)
        except ad.NonFiniteError as exc:
            raise TrainingDivergence(str(exc)) from exc
        if not math.isfinite(value):
            raise TrainingDivergence("non-finite training loss")
        losses.append(value * len(batch))
    return float(np.sum(losses) / max(len(order), 1))


def correct_ids(params: ParamStore, config: ExpertConfig, examples: Sequence[TrainingExample],
                batch_size: int = 128) -> set[str]:
    """Ids whose mask-free discretised prediction equals the ground-truth delta."""
    preds = ex.predict_deltas(params, config, [e.graph for e in examples], batch_size)
    return {e.id for e, p in zip(examples, preds) if p == e.delta}


def _chain_optim(n: int, tcfg: SeqTrainConfig) -> AdamWConfig:
    total = steps_per_epoch(n, tcfg.batch_size) * (tcfg.warmup_iters + tcfg.max_total_iters)
    return AdamWConfig(lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                       warmup_steps=tcfg.lr_warmup_steps, total_steps=total)


# -- training phases -------------------------------------------------------------------

def warmup(dataset: Sequence[TrainingExample], config: ExpertConfig, tcfg: SeqTrainConfig) -> ParamStore:
    if not dataset:
        raise ValueError("warm-up needs a non-empty dataset")
    params = ex.init_params(config, _seed(tcfg.seed, _PHASE_WARMUP))
    optim = _chain_optim(len(dataset), tcfg)
    for epoch in range(tcfg.warmup_iters):
        value = run_epoch(params, config, dataset, optim, tcfg, _PHASE_WARMUP, 0, epoch)
        log.info("warmup epoch %d loss=%.6f", epoch, value)
    return params


def train_sequential(dataset: Sequence[TrainingExample], config: ExpertConfig, tcfg: SeqTrainConfig,
                     params: ParamStore | None = None, fp_radius: int = DEFAULT_RADIUS,
                     fp_length: int = DEFAULT_LENGTH,
                     on_expert: Callable[[ExpertStep], None] | None = None) -> ExpertRegistry:
    """Run the expert chain; returns a registry without a chief.

    ``manifest['chain']`` records one entry per expert tried and
    ``manifest['remainder']`` the ids never claimed by any expert.
    """
    if not dataset:
        raise ValueError("sequential training needs a non-empty dataset")
    if params is None:
        params = warmup(dataset, config, tcfg)
    optim = _chain_optim(len(dataset), tcfg)
    pool = list(dataset)
    records: list[ExpertRecord] = []
    chain: list[dict] = []
    stalls = 0
    iters = 0
    for i in range(1, tcfg.n_experts + 1):
        if not pool or iters + tcfg.t_per_expert > tcfg.max_total_iters:
            break
        survivors = {e.id for e in pool}
        losses = []
        for epoch in range(tcfg.t_per_expert):
            losses.append(run_epoch(params, config, pool, optim, tcfg, _PHASE_EXPERT, i, epoch))
            survivors &= correct_ids(params, config, pool)
        iters += tcfg.t_per_expert
        claimed = [e for e in pool if e.id in survivors]
        pool = [e for e in pool if e.id not in survivors]
        stored = bool(claimed)
        if stored:
            fps = [morgan_fingerprint(e.graph, fp_radius, fp_length) for e in claimed]
            records.append(ExpertRecord(i, params.copy(), tuple(sorted(survivors)), centroid(fps)))
            stalls = 0
        else:
            stalls += 1
        step = ExpertStep(i, len(claimed) + len(pool), len(claimed), len(pool), losses, stored)
        chain.append(asdict(step))
        log.info("expert %d: |D_i|=%d |s_i|=%d remaining=%d loss=%.6f%s", i, step.pool_size,
                 step.correct, step.remaining, losses[-1], "" if stored else " (not stored)")
        if on_expert is not None:
            on_expert(step)
        if stalls >= tcfg.stall_limit:
            log.info("stopping: %d consecutive experts without new correct reactions", stalls)
            break
    return ExpertRegistry(
        expert_config=config, chief=None, experts=records, fp_radius=fp_radius, fp_length=fp_length,
        manifest={"chain": chain, "remainder": sorted(e.id for e in pool)},
    )


def train_chief(dataset: Sequence[TrainingExample], config: ExpertConfig, tcfg: SeqTrainConfig) -> ParamStore:
    if not dataset:
        raise ValueError("chief training needs a non-empty dataset")
    params = ex.init_params(config, _seed(tcfg.seed, _PHASE_CHIEF))
    optim = AdamWConfig(lr=tcfg.lr, weight_decay=tcfg.weight_decay, warmup_steps=tcfg.lr_warmup_steps,
                        total_steps=steps_per_epoch(len(dataset), tcfg.batch_size) * tcfg.chief_iters)
    for epoch in range(tcfg.chief_iters):
        value = run_epoch(params, config, dataset, optim, tcfg, _PHASE_CHIEF, 0, epoch)
        log.info("chief epoch %d loss=%.6f", epoch, value)
    return params


def train_registry(dataset: Sequence[TrainingExample], config: ExpertConfig, tcfg: SeqTrainConfig,
                   fp_radius: int = DEFAULT_RADIUS, fp_length: int = DEFAULT_LENGTH,
                   on_expert: Callable[[ExpertStep], None] | None = None) -> ExpertRegistry:
    """Warm-up, sequential chain and chief: the complete training procedure."""
    params = warmup(dataset, config, tcfg)
    reg = train_sequential(dataset, config, tcfg, params, fp_radius, fp_length, on_expert)
    reg.chief = train_chief(dataset, config, tcfg)
    reg.manifest.update({
        "seed": tcfg.seed,
        "train_config": tcfg.to_dict(),
        "expert_config": config.to_dict(),
        "dataset_digest": dataset_digest(dataset),
        "dataset_size": len(dataset),
    })
    reg.check_partition([e.id for e in dataset])
    return reg


def verify_consistency(reg: ExpertRegistry, dataset: Sequence[TrainingExample]) -> None:
    """Every member of each correctness set must still be predicted exactly by its snapshot."""
    by_id = {e.id: e for e in dataset}
    for rec in reg.experts:
        members = [by_id[i] for i in rec.correct_ids]
        ok = correct_ids(rec.params, reg.expert_config, members)
        if len(ok) != len(members):
            raise RegistryError(f"expert {rec.expert_id}: {len(members) - len(ok)} members no longer correct")


# -- persistence -------------------------------------------------------------------------

def dumps_registry(reg: ExpertRegistry) -> bytes:
    tensors: dict[str, np.ndarray] = {}
    if reg.chief is not None:
        for name, arr in reg.chief.arrays().items():
            tensors[f"chief/{name}"] = arr
    for rec in reg.experts:
        for name, arr in rec.params.arrays().items():
            tensors[f"expert/{rec.expert_id}/{name}"] = arr
        tensors[f"centroid/{rec.expert_id}"] = rec.centroid
    meta = {
        "expert_config": reg.expert_config.to_dict(),
        "fingerprint": {"radius": reg.fp_radius, "length": reg.fp_length},
        "has_chief": reg.chief is not None,
        "experts": [{"expert_id": r.expert_id, "correct_ids": list(r.correct_ids)} for r in reg.experts],
        "manifest": reg.manifest,
    }
    return ad.dumps_tensors(tensors, meta, magic=REGISTRY_MAGIC, version=REGISTRY_VERSION)


def loads_registry(blob: bytes, fp_radius: int | None = None, fp_length: int | None = None) -> ExpertRegistry:
    tensors, meta = ad.loads_tensors(blob, magic=REGISTRY_MAGIC, version=REGISTRY_VERSION)
    fp = meta["fingerprint"]
    if (fp_radius is not None and fp_radius != fp["radius"]) or (fp_length is not None and fp_length != fp["length"]):
        raise RegistryError(
            f"fingerprint config mismatch: registry has radius={fp['radius']} length={fp['length']}"
        )

    def group(prefix: str) -> ParamStore:
        return ParamStore({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})

    experts = []
    for item in meta["experts"]:
        eid = item["expert_id"]
        cen = tensors[f"centroid/{eid}"]
        if cen.shape != (fp["length"],):
            raise RegistryError(f"centroid of expert {eid} has length {cen.shape}, expected {fp['length']}")
        experts.append(ExpertRecord(eid, group(f"expert/{eid}/"), tuple(item["correct_ids"]), cen))
    return ExpertRegistry(
        expert_config=ExpertConfig(**meta["expert_config"]),
        chief=group("chief/") if meta["has_chief"] else None,
        experts=experts, fp_radius=fp["radius"], fp_length=fp["length"], manifest=meta["manifest"],
    )


def save_registry(reg: ExpertRegistry, path: str | Path) -> str:
    """Write the registry; returns the SHA-256 of the file bytes."""
    blob = dumps_registry(reg)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_registry(path: str | Path, fp_radius: int | None = None, fp_length: int | None = None) -> ExpertRegistry:
    return loads_registry(Path(path).read_bytes(), fp_radius, fp_length)
