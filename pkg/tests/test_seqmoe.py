import dataclasses

import numpy as np
import pytest

from erpflow import expert, seqmoe
from erpflow.autodiff import ChecksumError
from erpflow.fingerprint import centroid, morgan_fingerprint
from erpflow.inference import predict
from erpflow.seqmoe import ExpertRegistry, RegistryError, SeqTrainConfig

from conftest import SMALL_EXPERT, SMALL_TRAIN


def test_config_budget_invariant():
    with pytest.raises(ValueError):
        SeqTrainConfig(n_experts=41, t_per_expert=2, max_total_iters=80)
    d = SeqTrainConfig()
    assert (d.warmup_iters, d.n_experts, d.t_per_expert, d.max_total_iters, d.chief_iters) == (20, 40, 2, 80, 100)


def test_partition_invariants(small_registry, small_examples):
    reg = small_registry
    ids = [e.id for e in small_examples]
    sets = [set(r.correct_ids) for r in reg.experts]
    for a in range(len(sets)):
        assert sets[a]
        for b in range(a + 1, len(sets)):
            assert not sets[a] & sets[b]
    remainder = set(reg.manifest["remainder"])
    assert set().union(*sets) | remainder == set(ids)
    assert not remainder & set().union(*sets)
    pool = len(ids)
    for step in reg.manifest["chain"]:
        assert step["pool_size"] == pool
        assert step["remaining"] == pool - step["correct"] <= pool
        pool = step["remaining"]
    seqmoe.verify_consistency(reg, small_examples)


def test_centroids_match_recomputation(small_registry, small_examples):
    by_id = {e.id: e for e in small_examples}
    for rec in small_registry.experts:
        fps = [morgan_fingerprint(by_id[i].graph, small_registry.fp_radius, small_registry.fp_length)
               for i in rec.correct_ids]
        assert np.allclose(rec.centroid, centroid(fps), rtol=0, atol=1e-9)


def test_check_partition_rejects_overlap(small_registry):
    reg = dataclasses.replace(small_registry, experts=list(small_registry.experts))
    if len(reg.experts) < 2:
        pytest.skip("needs two experts")
    dup = dataclasses.replace(reg.experts[1], correct_ids=reg.experts[0].correct_ids[:1])
    reg.experts[1] = dup
    with pytest.raises(RegistryError):
        reg.check_partition()


def test_training_is_deterministic(small_registry, small_examples):
    again = seqmoe.train_registry(small_examples, SMALL_EXPERT, SMALL_TRAIN)
    assert seqmoe.dumps_registry(again) == seqmoe.dumps_registry(small_registry)


def test_zero_iterations_give_fresh_params(small_examples):
    tcfg = dataclasses.replace(SMALL_TRAIN, warmup_iters=0, chief_iters=0)
    w = seqmoe.warmup(small_examples, SMALL_EXPERT, tcfg)
    c = seqmoe.train_chief(small_examples, SMALL_EXPERT, tcfg)
    for got, phase in ((w, seqmoe._PHASE_WARMUP), (c, seqmoe._PHASE_CHIEF)):
        fresh = expert.init_params(SMALL_EXPERT, seqmoe._seed(tcfg.seed, phase))
        assert all(np.array_equal(fresh[k].data, got[k].data) for k in fresh.names())


def test_warmup_reduces_loss(small_examples):
    tcfg = dataclasses.replace(SMALL_TRAIN, warmup_iters=0)
    fresh = seqmoe.warmup(small_examples, SMALL_EXPERT, tcfg)
    trained = seqmoe.warmup(small_examples, SMALL_EXPERT, dataclasses.replace(SMALL_TRAIN, warmup_iters=3))
    before = float(expert.batch_loss(fresh, SMALL_EXPERT, small_examples).data)
    after = float(expert.batch_loss(trained, SMALL_EXPERT, small_examples).data)
    assert after < before


def test_chief_beats_single_experts(small_registry, small_examples):
    def acc(params):
        return len(seqmoe.correct_ids(params, SMALL_EXPERT, small_examples))

    chief = acc(small_registry.chief)
    assert all(chief >= acc(rec.params) for rec in small_registry.experts)


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        seqmoe.warmup([], SMALL_EXPERT, SMALL_TRAIN)
    with pytest.raises(ValueError):
        seqmoe.train_sequential([], SMALL_EXPERT, SMALL_TRAIN)


def test_stall_limit_stops_chain(small_examples):
    # a zero learning rate never learns anything, so three empty experts end the chain
    tcfg = dataclasses.replace(SMALL_TRAIN, lr=0.0, n_experts=4, stall_limit=3)
    params = expert.init_params(SMALL_EXPERT, 0)
    reg = seqmoe.train_sequential(small_examples, SMALL_EXPERT, tcfg, params)
    assert not reg.experts and len(reg.manifest["chain"]) == 3


def test_registry_round_trip(small_registry, small_corpus, tmp_path):
    path = tmp_path / "reg.bin"
    digest = seqmoe.save_registry(small_registry, path)
    assert len(digest) == 64
    back = seqmoe.load_registry(path)
    assert back.manifest == small_registry.manifest
    for r in small_corpus.test[:50]:
        a, b = predict(r.reactants, small_registry), predict(r.reactants, back)
        assert a.signatures == b.signatures


def test_chief_only_registry_round_trip():
    reg = ExpertRegistry(SMALL_EXPERT, expert.init_params(SMALL_EXPERT, 0))
    back = seqmoe.loads_registry(seqmoe.dumps_registry(reg))
    assert back.experts == [] and back.chief.names() == reg.chief.names()


def test_truncated_registry_fails_checksum(small_registry):
    blob = seqmoe.dumps_registry(small_registry)
    with pytest.raises(ChecksumError):
        seqmoe.loads_registry(blob[:-7])


def test_fingerprint_mismatch(small_registry):
    blob = seqmoe.dumps_registry(small_registry)
    with pytest.raises(RegistryError):
        seqmoe.loads_registry(blob, fp_length=1024)
    assert seqmoe.loads_registry(blob, fp_radius=2, fp_length=2048).fp_length == 2048


def test_registry_version_mismatch(small_registry):
    from erpflow import autodiff as ad
    tensors, meta = ad.loads_tensors(seqmoe.dumps_registry(small_registry), magic=seqmoe.REGISTRY_MAGIC)
    blob = ad.dumps_tensors(tensors, meta, magic=seqmoe.REGISTRY_MAGIC, version=seqmoe.REGISTRY_VERSION + 1)
    with pytest.raises(ValueError):
        seqmoe.loads_registry(blob)
