import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erpflow import autodiff as ad
from erpflow.autodiff import AdamWConfig, ParamStore, Tape
from erpflow.expert import (
    N_CHANNELS,
    ExpertConfig,
    GraphTooLargeError,
    TrainingExample,
    batch_loss,
    discretize,
    dumps_expert,
    encode,
    init_params,
    loads_expert,
    loss,
    make_example,
    pointer_scores,
    predict_products,
    predict_soft_delta,
    train_step,
)
from erpflow.molgraph import ElectronDelta, canonical_signature
from erpflow.smiles import parse_reaction, parse_smiles

from oracles import numeric_grad, rel_error
from strategies import mol_graphs

TINY = ExpertConfig(embed_dim=8, gnn_rounds=2, attn_layers=1, attn_heads=2, max_atoms=12)


@pytest.fixture(scope="module")
def params():
    return init_params(TINY, seed=3)


def random_params(config, seed, scale=0.5):
    """Initial weights plus noise, so no parameter sits at a symmetric starting value."""
    store = init_params(config, seed)
    rng = np.random.default_rng(seed + 1000)
    return ParamStore({k: v + scale * rng.normal(size=v.shape) for k, v in store.arrays().items()})


def substitution():
    return parse_reaction("[CH3:1][Cl:2].[NH3:3]>>[CH3:1][NH2:3].[ClH:2]")


# -- config ----------------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ValueError):
        ExpertConfig(embed_dim=30, attn_heads=4)
    with pytest.raises(ValueError):
        ExpertConfig(channels=4)
    with pytest.raises(ValueError):
        ExpertConfig(dropout_rate=1.0)
    big = ExpertConfig.full_scale()
    assert (big.embed_dim, big.attn_layers, big.attn_heads) == (256, 6, 8)


# -- encoder -------------------------------------------------------------------------------

def test_single_atom_encoding(params):
    h = encode(params, TINY, parse_smiles("C"))
    assert h.shape == (1, TINY.embed_dim) and np.all(np.isfinite(h))


def test_too_large_graph(params):
    with pytest.raises(GraphTooLargeError):
        encode(params, TINY, parse_smiles("C" * 13))


@settings(max_examples=60, deadline=None)
@given(mol_graphs(max_atoms=8), st.data())
def test_encoder_is_permutation_equivariant(g, data):
    p = random_params(TINY, 1)
    order = data.draw(st.permutations(list(range(g.n_atoms))))
    assert np.allclose(encode(p, TINY, g.permute(order)), encode(p, TINY, g)[order], atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(mol_graphs(min_atoms=2, max_atoms=8), st.data())
def test_soft_delta_is_permutation_equivariant(g, data):
    p = random_params(TINY, 2)
    order = data.draw(st.permutations(list(range(g.n_atoms))))
    ix = np.ix_(order, order)
    assert np.allclose(predict_soft_delta(p, TINY, g.permute(order)), predict_soft_delta(p, TINY, g)[ix],
                       atol=1e-10)


def test_dropout_seed_determinism(params):
    g = parse_smiles("CC(=O)NCCl")
    a = encode(params, TINY, g, dropout_seed=4)
    assert np.array_equal(a, encode(params, TINY, g, dropout_seed=4))
    assert not np.array_equal(a, encode(params, TINY, g, dropout_seed=5))


def test_no_seed_is_mask_free(params):
    g = parse_smiles("CC(=O)NCCl")
    assert np.array_equal(encode(params, TINY, g), encode(params, TINY, g))
    assert np.array_equal(encode(params, TINY, g), encode(params, TINY, g, dropout_seed=9, rate=0.0))


# -- pointer heads ---------------------------------------------------------------------------

def test_zero_representation_gives_uniform_rows(params):
    n = 5
    plus, minus = pointer_scores(params, np.zeros((n, TINY.embed_dim)))
    off = ~np.eye(n, dtype=bool)
    for w in (plus, minus):
        assert w.shape == (N_CHANNELS, n, n)
        assert np.allclose(w[:, off], 1.0 / n)
        assert np.all(w[:, ~off] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2 ** 16))
def test_pointer_weights_open_interval(n, seed):
    p = random_params(TINY, 5)
    h = np.random.default_rng(seed).normal(size=(n, TINY.embed_dim))
    for w in pointer_scores(p, h):
        off = w[:, ~np.eye(n, dtype=bool)]
        assert np.all((off > 0) & (off < 1))
        assert np.all(w.sum(axis=-1) < 1)


def test_soft_delta_matches_channel_sum():
    p = random_params(TINY, 7)
    g = parse_smiles("OCC(=O)N.Cl")
    h = encode(p, TINY, g)
    plus, minus = pointer_scores(p, h)
    n = g.n_atoms
    raw = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            raw[i, j] = sum(plus[d, i, j] for d in range(N_CHANNELS)) - sum(minus[d, i, j] for d in range(N_CHANNELS))
    sym = (raw + raw.T) / 2
    np.fill_diagonal(sym, 0.0)
    pred = predict_soft_delta(p, TINY, g)
    assert np.allclose(pred, sym, atol=1e-12)
    assert np.array_equal(pred, pred.T) and np.all(np.diag(pred) == 0)
    assert np.all(np.abs(pred) <= N_CHANNELS)


def test_equal_channels_cancel():
    # formation and breaking heads sharing weights give identical w+ and w-
    p = random_params(TINY, 8)
    arrays = p.arrays()
    for k in ("ptr.wq", "ptr.wk"):
        arrays[k][N_CHANNELS:] = arrays[k][:N_CHANNELS]
    arrays["ptr.virtual"][N_CHANNELS:] = arrays["ptr.virtual"][:N_CHANNELS]
    pred = predict_soft_delta(ParamStore(arrays), TINY, parse_smiles("CC(=O)O"))
    assert np.allclose(pred, 0.0, atol=1e-12)


def test_single_channel_symmetrisation():
    # w+_{01} = 0.8 on one channel, everything else zero
    w = ad.Tensor(np.zeros((1, 2 * N_CHANNELS, 3, 3)))
    w.data[0, 0, 0, 1] = 0.8
    from erpflow.expert import _soft_delta
    out = _soft_delta(w).data[0]
    assert out[0, 1] == pytest.approx(0.4) and out[1, 0] == pytest.approx(0.4)


# -- loss and discretisation --------------------------------------------------------------------

def test_loss_examples():
    g = parse_smiles("CC")
    d = ElectronDelta.from_pairs({(0, 1): 1})
    assert loss(d.to_matrix(2).astype(float), d, g) == 0.0
    assert loss(np.zeros((2, 2)), d, g) == 1.0
    with pytest.raises(ValueError):
        loss(np.zeros((3, 3)), d, g)


@settings(max_examples=100)
@given(st.integers(1, 7), st.integers(0, 2 ** 16))
def test_loss_matches_double_loop(n, seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(n, n))
    pred = (pred + pred.T) / 2
    pairs = {(i, j): int(rng.choice([-2, -1, 1, 2])) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4}
    truth = ElectronDelta.from_pairs(pairs)
    expected = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            expected += (pairs.get((i, j), 0) - pred[i, j]) ** 2
    g = parse_smiles(".".join(["C"] * n))
    assert loss(pred, truth, g) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("value, expected", [
    (0.49, {}), (0.5, {(0, 1): 1}), (-0.5, {(0, 1): -1}), (-1.2, {(0, 1): -1}), (2.6, {(0, 1): 3}),
    (7.9, {(0, 1): 3}), (-5.0, {(0, 1): -3}),
])
def test_discretize(value, expected):
    pred = np.array([[0.0, value], [value, 0.0]])
    assert discretize(pred).as_dict() == expected


def test_discretize_rejects_nan():
    with pytest.raises(ad.NonFiniteError):
        discretize(np.array([[0.0, np.nan], [np.nan, 0.0]]))


# -- gradients ---------------------------------------------------------------------------------

GRAD_CONFIG = ExpertConfig(embed_dim=4, gnn_rounds=2, attn_layers=1, attn_heads=2, max_atoms=6)


def _check_full_gradient(config, examples, seed, dropout_seed=None):
    store = random_params(config, seed)
    with Tape() as tape:
        value = batch_loss(store, config, examples, dropout_seed)
    tape.backward(value)
    analytic = store.grads()

    def f():
        return float(batch_loss(store, config, examples, dropout_seed).data)

    worst = 0.0
    for name in store.names():
        num = numeric_grad(f, store[name].data)
        worst = max(worst, rel_error(analytic[name], num))
    num_all = np.concatenate([numeric_grad(f, store[n].data).ravel() for n in store.names()])
    total = rel_error(np.concatenate([analytic[n].ravel() for n in store.names()]), num_all)
    return total, worst


def _random_example(rng):
    from erpflow.datagen import random_molecule
    while True:
        g = random_molecule(rng, max_atoms=6)
        if 2 <= g.n_atoms <= 6:
            break
    n = g.n_atoms
    pairs = {}
    for _ in range(2):
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        pairs[(i, j)] = int(rng.choice([-1, 1]))
    return TrainingExample("x", g, ElectronDelta.from_pairs(pairs))


def test_full_model_gradient_single_input():
    rng = np.random.default_rng(0)
    total, _ = _check_full_gradient(GRAD_CONFIG, [_random_example(rng)], seed=0)
    assert total <= 1e-4


def test_full_model_gradient_with_dropout():
    rng = np.random.default_rng(1)
    total, _ = _check_full_gradient(GRAD_CONFIG, [_random_example(rng)], seed=1, dropout_seed=3)
    assert total <= 1e-4


# -- training --------------------------------------------------------------------------------------

def test_overfit_single_reaction():
    r = substitution()
    ex = [make_example(r)]
    store = init_params(TINY, seed=0)
    optim = AdamWConfig(lr=1e-2, weight_decay=0.0)
    first = None
    for _ in range(150):
        store, value = train_step(store, TINY, ex, optim)
        first = value if first is None else first
    assert value < first
    out = predict_products(store, TINY, r.reactants)
    assert out is not None and canonical_signature(out) == canonical_signature(r.product)


def test_zero_lr_leaves_params():
    store = init_params(TINY, seed=0)
    before = store.arrays()
    train_step(store, TINY, [make_example(substitution())], AdamWConfig(lr=0.0), dropout_seed=1)
    assert all(np.array_equal(before[k], v) for k, v in store.arrays().items())


def test_training_is_deterministic():
    ex = [make_example(substitution())]
    outs = []
    for _ in range(2):
        store = init_params(TINY, seed=4)
        for _ in range(3):
            train_step(store, TINY, ex, AdamWConfig(lr=1e-2), dropout_seed=11)
        outs.append(store.arrays())
    assert all(np.array_equal(outs[0][k], outs[1][k]) for k in outs[0])


def test_empty_batch_rejected(params):
    with pytest.raises(ValueError):
        train_step(params.copy(), TINY, [], AdamWConfig())


def test_near_zero_model_predicts_no_change():
    arrays = init_params(TINY, seed=0).arrays()
    arrays["ptr.wq"] *= 1e-3
    arrays["ptr.wk"] *= 1e-3
    g = parse_smiles("CC(=O)OC")
    assert predict_products(ParamStore(arrays), TINY, g) == g


def test_negative_bond_prediction_is_empty():
    # formation heads park on the virtual slot, breaking heads put all mass on real targets
    arrays = init_params(TINY, seed=0).arrays()
    arrays["ptr.virtual"][:N_CHANNELS] = 50.0
    arrays["ptr.virtual"][N_CHANNELS:] = -50.0
    g = parse_smiles("C.C")
    assert predict_products(ParamStore(arrays), TINY, g) is None


# -- checkpoints -----------------------------------------------------------------------------------

def test_expert_checkpoint_round_trip(params):
    store, config = loads_expert(dumps_expert(params, TINY))
    assert config == TINY
    g = parse_smiles("CC(=O)N")
    assert np.array_equal(predict_soft_delta(store, config, g), predict_soft_delta(params, TINY, g))
