"""Single-expert reaction model.

Reactant atoms are embedded, refined by bond-order-weighted message passing,
then by multi-head self-attention over all atoms (no positional encodings,
so the model is permutation equivariant). Sixteen pointer heads, eight for
bond formation and eight for bond breaking, score every ordered atom pair
against a virtual "no flow" slot; the signed channel sum gives the soft
bond-order change, which is symmetrised over the two pair orientations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWConfig, ParamStore, Tape, Tensor
from .molgraph import ELEMENTS, MAX_ABS_CHARGE, MAX_BOND_ORDER, ElectronDelta, MolGraph, Reaction, apply_delta, compute_delta

N_CHANNELS = 8
N_HEADS = 2 * N_CHANNELS
MAX_DEGREE_BUCKET = 6
MAX_H_BUCKET = 4
_ELEMENT_INDEX = {e: i for i, e in enumerate(ELEMENTS)}
_CHANNEL_SIGN = np.concatenate([np.ones(N_CHANNELS), -np.ones(N_CHANNELS)]).reshape(N_HEADS, 1, 1)

# dropout layer ids: message passing rounds use r, attention layers 100 + l
_GNN_LAYER_ID = 0
_ATTN_LAYER_ID = 100
_ATTN_PROB_LAYER_ID = 200
_FFN_LAYER_ID = 300


class GraphTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    embed_dim: int = 32
    gnn_rounds: int = 3
    attn_layers: int = 2
    attn_heads: int = 4
    dropout_rate: float = 0.1
    max_atoms: int = 64
    channels: int = N_CHANNELS

    def __post_init__(self) -> None:
        if self.embed_dim <= 0 or self.embed_dim % self.attn_heads:
            raise ValueError("embed_dim must be a positive multiple of attn_heads")
        if self.channels != N_CHANNELS:
            raise ValueError(f"channels is fixed at {N_CHANNELS} per direction")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.gnn_rounds < 0 or self.attn_layers < 0 or self.max_atoms <= 0:
            raise ValueError("gnn_rounds/attn_layers must be >= 0 and max_atoms > 0")

    @classmethod
    def full_scale(cls) -> ExpertConfig:
        return cls(embed_dim=256, attn_layers=6, attn_heads=8)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainingExample:
    id: str
    graph: MolGraph
    delta: ElectronDelta


def make_example(r: Reaction) -> TrainingExample:
    return TrainingExample(r.id, r.reactants, compute_delta(r))


@dataclass
class GraphBatch:
    element: np.ndarray
    charge: np.ndarray
    degree: np.ndarray
    hcount: np.ndarray
    adjacency: np.ndarray
    atom_mask: np.ndarray
    sizes: list[int] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.element.shape


def make_batch(graphs: Sequence[MolGraph], max_atoms: int) -> GraphBatch:
    sizes = [g.n_atoms for g in graphs]
    if max(sizes, default=0) > max_atoms:
        raise GraphTooLargeError(f"graph with {max(sizes)} atoms exceeds max_atoms={max_atoms}")
    b, n = len(graphs), max(max(sizes, default=0), 1)
    el = np.zeros((b, n), dtype=np.int64)
    ch = np.zeros((b, n), dtype=np.int64)
    dg = np.zeros((b, n), dtype=np.int64)
    hc = np.zeros((b, n), dtype=np.int64)
    adj = np.zeros((b, n, n))
    mask = np.zeros((b, n), dtype=bool)
    for k, g in enumerate(graphs):
        m = g.n_atoms
        if not m:
            continue
        el[k, :m] = [_ELEMENT_INDEX[a.element] for a in g.atoms]
        ch[k, :m] = [a.formal_charge + MAX_ABS_CHARGE for a in g.atoms]
        dg[k, :m] = np.minimum(np.count_nonzero(g.bonds, axis=1), MAX_DEGREE_BUCKET)
        hc[k, :m] = [min(a.explicit_h, MAX_H_BUCKET) for a in g.atoms]
        adj[k, :m, :m] = g.bonds
        mask[k, :m] = True
    return GraphBatch(el, ch, dg, hc, adj, mask, sizes)


def init_params(config: ExpertConfig, seed: int = 0) -> ParamStore:
    """Xavier-uniform weight matrices, N(0, 0.02) embeddings, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def xavier(*shape: int) -> np.ndarray:
        fan_in, fan_out = shape[-2], shape[-1]
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape)

    store = ParamStore()
    store.add("emb.element", rng.normal(0.0, 0.02, (len(ELEMENTS), d)))
    store.add("emb.charge", rng.normal(0.0, 0.02, (2 * MAX_ABS_CHARGE + 1, d)))
    store.add("emb.degree", rng.normal(0.0, 0.02, (MAX_DEGREE_BUCKET + 1, d)))
    store.add("emb.hcount", rng.normal(0.0, 0.02, (MAX_H_BUCKET + 1, d)))
    for r in range(config.gnn_rounds):
        store.add(f"gnn.{r}.w_self", xavier(d, d))
        store.add(f"gnn.{r}.w_msg", xavier(d, d))
        store.add(f"gnn.{r}.bias", np.zeros(d))
        store.add(f"gnn.{r}.ln_gain", np.ones(d))
        store.add(f"gnn.{r}.ln_bias", np.zeros(d))
    for layer in range(config.attn_layers):
        p = f"attn.{layer}"
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}.{w}", xavier(d, d))
        store.add(f"{p}.ln1_gain", np.ones(d))
        store.add(f"{p}.ln1_bias", np.zeros(d))
        store.add(f"{p}.ff1_w", xavier(d, 2 * d))
        store.add(f"{p}.ff1_b", np.zeros(2 * d))
        store.add(f"{p}.ff2_w", xavier(2 * d, d))
        store.add(f"{p}.ff2_b", np.zeros(d))
        store.add(f"{p}.ln2_gain", np.ones(d))
        store.add(f"{p}.ln2_bias", np.zeros(d))
    store.add("ptr.wq", xavier(N_HEADS, d, d))
    store.add("ptr.wk", xavier(N_HEADS, d, d))
    store.add("ptr.virtual", np.zeros((N_HEADS, 1, 1)))
    return store


def _mask(shape, rate: float, seed: int | None, layer_id: int, step: int) -> np.ndarray | None:
    if seed is None or rate == 0.0:
        return None
    return ad.dropout_mask(shape, rate, seed, layer_id, step)


def _encode(params: ParamStore, config: ExpertConfig, batch: GraphBatch,
            dropout_seed: int | None = None, rate: float | None = None, step: int = 0) -> Tensor:
    rate = config.dropout_rate if rate is None else rate
    b, n = batch.shape
    d = config.embed_dim
    h = ad.add(ad.add(ad.embedding_lookup(params["emb.element"], batch.element),
                      ad.embedding_lookup(params["emb.charge"], batch.charge)),
               ad.add(ad.embedding_lookup(params["emb.degree"], batch.degree),
                      ad.embedding_lookup(params["emb.hcount"], batch.hcount)))
    adj = Tensor(batch.adjacency)
    for r in range(config.gnn_rounds):
        msg = ad.matmul(adj, h)
        u = ad.relu(ad.add(ad.add(ad.matmul(h, params[f"gnn.{r}.w_self"]),
                                  ad.matmul(msg, params[f"gnn.{r}.w_msg"])),
                           params[f"gnn.{r}.bias"]))
        u = ad.dropout(u, _mask((b, n, d), rate, dropout_seed, _GNN_LAYER_ID + r, step))
        h = ad.layer_norm(ad.add(h, u), params[f"gnn.{r}.ln_gain"], params[f"gnn.{r}.ln_bias"])

    heads = config.attn_heads
    dh = d // heads
    key_mask = batch.atom_mask[:, None, None, :]
    for layer in range(config.attn_layers):
        p = f"attn.{layer}"

        def split(x: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(x, (b, n, heads, dh)), (0, 2, 1, 3))

        q = split(ad.matmul(h, params[f"{p}.wq"]))
        k = split(ad.matmul(h, params[f"{p}.wk"]))
        v = split(ad.matmul(h, params[f"{p}.wv"]))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1, mask=key_mask)
        attn = ad.dropout(attn, _mask((b, heads, n, n), rate, dropout_seed, _ATTN_PROB_LAYER_ID + layer, step))
        o = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        o = ad.matmul(o, params[f"{p}.wo"])
        o = ad.dropout(o, _mask((b, n, d), rate, dropout_seed, _ATTN_LAYER_ID + layer, step))
        h = ad.layer_norm(ad.add(h, o), params[f"{p}.ln1_gain"], params[f"{p}.ln1_bias"])
        f = ad.relu(ad.add(ad.matmul(h, params[f"{p}.ff1_w"]), params[f"{p}.ff1_b"]))
        f = ad.add(ad.matmul(f, params[f"{p}.ff2_w"]), params[f"{p}.ff2_b"])
        f = ad.dropout(f, _mask((b, n, d), rate, dropout_seed, _FFN_LAYER_ID + layer, step))
        h = ad.layer_norm(ad.add(h, f), params[f"{p}.ln2_gain"], params[f"{p}.ln2_bias"])
    return h


def _pointer(params: ParamStore, h: Tensor, atom_mask: np.ndarray) -> Tensor:
    """Pointer weights ``(B, 16, n, n)``: channels 0-7 formation, 8-15 breaking."""
    b, n, d = h.shape
    h4 = ad.reshape(h, (b, 1, n, d))
    q = ad.matmul(h4, params["ptr.wq"])
    k = ad.matmul(h4, params["ptr.wk"])
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    virtual = ad.add(Tensor(np.zeros((b, N_HEADS, n, 1))), params["ptr.virtual"])
    logits = ad.concat([scores, virtual], axis=-1)
    target_ok = (~np.eye(n, dtype=bool))[None, :, :] & atom_mask[:, None, :]
    mask = np.concatenate([target_ok, np.ones((b, n, 1), dtype=bool)], axis=-1)[:, None, :, :]
    w = ad.softmax(logits, axis=-1, mask=mask)
    return ad.take(w, (Ellipsis, slice(0, n)))


def _soft_delta(w: Tensor) -> Tensor:
    signed = ad.sum(ad.mul(w, _CHANNEL_SIGN), axis=1)
    return ad.mul(ad.add(signed, ad.transpose(signed, (0, 2, 1))), 0.5)


def forward_batch(params: ParamStore, config: ExpertConfig, batch: GraphBatch,
                  dropout_seed: int | None = None, rate: float | None = None, step: int = 0) -> Tensor:
    """Symmetrised soft delta ``(B, n, n)`` for a padded batch."""
    h = _encode(params, config, batch, dropout_seed, rate, step)
    return _soft_delta(_pointer(params, h, batch.atom_mask))


def batch_targets(examples: Sequence[TrainingExample], n: int) -> np.ndarray:
    t = np.zeros((len(examples), n, n))
    for k, ex in enumerate(examples):
        for i, j, dlt in ex.delta.entries:
            t[k, i, j] = t[k, j, i] = dlt
    return t


def pair_mask(batch: GraphBatch) -> np.ndarray:
    n = batch.shape[1]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    return upper[None] & batch.atom_mask[:, :, None] & batch.atom_mask[:, None, :]


def batch_loss(params: ParamStore, config: ExpertConfig, examples: Sequence[TrainingExample],
               dropout_seed: int | None = None, step: int = 0) -> Tensor:
    """Mean over the batch of per-reaction squared bond-change error."""
    batch = make_batch([ex.graph for ex in examples], config.max_atoms)
    pred = forward_batch(params, config, batch, dropout_seed, step=step)
    diff = ad.sub(pred, batch_targets(examples, batch.shape[1]))
    sq = ad.mul(ad.mul(diff, diff), pair_mask(batch).astype(np.float64))
    return ad.mean(ad.sum(sq, axis=(1, 2)))


# -- single-graph operations ------------------------------------------------------

def encode(params: ParamStore, config: ExpertConfig, g: MolGraph,
           dropout_seed: int | None = None, rate: float | None = None) -> np.ndarray:
    h = _encode(params, config, make_batch([g], config.max_atoms), dropout_seed, rate)
    return h.data[0, :g.n_atoms].copy()


def pointer_scores(params: ParamStore, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Formation and breaking weights, each ``(8, n, n)``, for an atom representation matrix."""
    n = h.shape[0]
    w = _pointer(params, Tensor(h[None]), np.ones((1, n), dtype=bool)).data[0]
    return w[:N_CHANNELS].copy(), w[N_CHANNELS:].copy()


def predict_soft_delta(params: ParamStore, config: ExpertConfig, g: MolGraph,
                       dropout_seed: int | None = None, rate: float | None = None) -> np.ndarray:
    if g.n_atoms == 0:
        return np.zeros((0, 0))
    pred = forward_batch(params, config, make_batch([g], config.max_atoms), dropout_seed, rate)
    return pred.data[0, :g.n_atoms, :g.n_atoms].copy()


def loss(pred: np.ndarray, truth: ElectronDelta, g: MolGraph) -> float:
    n = g.n_atoms
    if pred.shape != (n, n):
        raise ValueError(f"prediction shape {pred.shape} does not match {n} atoms")
    diff = np.triu(truth.to_matrix(n) - pred, k=1)
    return float((diff * diff).sum())


def discretize(pred: np.ndarray) -> ElectronDelta:
    """Round half away from zero, clamp to [-3, 3], keep the upper triangle."""
    if not np.all(np.isfinite(pred)):
        raise ad.NonFiniteError("soft delta contains non-finite values")
    rounded = np.sign(pred) * np.floor(np.abs(pred) + 0.5)
    rounded = np.clip(rounded, -MAX_BOND_ORDER, MAX_BOND_ORDER).astype(np.int64)
    return ElectronDelta.from_matrix(np.triu(rounded, k=1))


def predict_products(params: ParamStore, config: ExpertConfig, g: MolGraph,
                     dropout_seed: int | None = None, rate: float | None = None) -> MolGraph | None:
    return apply_delta(g, discretize(predict_soft_delta(params, config, g, dropout_seed, rate)))


def predict_deltas(params: ParamStore, config: ExpertConfig, graphs: Sequence[MolGraph],
                   batch_size: int = 64) -> list[ElectronDelta]:
    """Mask-free batched prediction of discretised deltas."""
    out: list[ElectronDelta] = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        pred = forward_batch(params, config, make_batch(chunk, config.max_atoms)).data
        for k, g in enumerate(chunk):
            m = g.n_atoms
            out.append(discretize(pred[k, :m, :m]) if m else ElectronDelta())
    return out


def train_step(params: ParamStore, config: ExpertConfig, batch: Sequence[TrainingExample],
               optim: AdamWConfig, dropout_seed: int | None = None) -> tuple[ParamStore, float]:
    """One AdamW update on the batch loss; dropout masks are keyed by the store's step."""
    if not batch:
        raise ValueError("empty training batch")
    params.zero_grad()
    with Tape() as tape:
        value = batch_loss(params, config, batch, dropout_seed, step=params.step)
    tape.backward(value)
    lr = ad.scheduled_lr(params.step, optim.lr, optim.warmup_steps, optim.total_steps)
    ad.adamw_step(params, params.grads(), lr, optim.betas, optim.weight_decay, optim.eps)
    params.zero_grad()
    return params, float(value.data)


# -- persistence -------------------------------------------------------------------

EXPERT_MAGIC = b"ERPEXPT\x00"


def dumps_expert(params: ParamStore, config: ExpertConfig) -> bytes:
    return ad.dumps_tensors(params.arrays(), {"expert_config": config.to_dict()}, magic=EXPERT_MAGIC)


def loads_expert(blob: bytes) -> tuple[ParamStore, ExpertConfig]:
    tensors, meta = ad.loads_tensors(blob, magic=EXPERT_MAGIC)
    return ParamStore(tensors), ExpertConfig(**meta["expert_config"])


def examples_from(reactions: Iterable[Reaction]) -> list[TrainingExample]:
    return [make_example(r) for r in reactions]
