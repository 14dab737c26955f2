"""Acceptance suite: one test per criterion, each recording PASS/FAIL in the terminal summary.

The shared fixture trains the default desk-scale model once on a 2,000-reaction
conflict corpus (90/10 templates, half the reactants carry both reagents); that
run takes a few minutes on one CPU core.
"""
import dataclasses
import hashlib
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from erpflow import datagen, evaluation as ev, expert as ex, seqmoe
from erpflow.autodiff import ParamStore, Tape
from erpflow.config import RunConfig
from erpflow.expert import ExpertConfig, TrainingExample, batch_loss
from erpflow.inference import (
    ALL_ORDERS,
    CHIEF,
    CHIEF_DROP,
    SELECTED_DROP,
    InferenceOptions,
    collect_candidates,
    predict,
    rank_and_merge,
)
from erpflow.molgraph import ElectronDelta, canonical_signature, product_graph
from erpflow.smiles import parse_smiles, write_smiles

from conftest import SMALL_EXPERT, SMALL_TRAIN, criterion
from oracles import hitrate_bruteforce, merge_oracle, numeric_grad, rel_error, topk_bruteforce
from strategies import random_tiers

CONFLICT_SPEC = datagen.CorpusSpec({"substitution": 0.9, "silylation": 0.1}, total=2500,
                                   conflict_fraction=0.5, seed=0)


@pytest.fixture(scope="session")
def trained():
    corpus = datagen.generate_corpus(CONFLICT_SPEC)
    data = ex.examples_from(corpus.train)
    cfg, tcfg = ExpertConfig(), seqmoe.SeqTrainConfig()
    t0 = time.perf_counter()
    params = seqmoe.warmup(data, cfg, tcfg)
    reg = seqmoe.train_sequential(data, cfg, tcfg, params)
    seq_seconds = time.perf_counter() - t0
    reg.chief = seqmoe.train_chief(data, cfg, tcfg)
    total_seconds = time.perf_counter() - t0
    groups = [(c.reactants, c.truth_set) for c in corpus.conflict_test]
    reports = ev.ablation_run(reg, corpus.test, groups)
    return {"corpus": corpus, "data": data, "registry": reg, "reports": reports,
            "seq_seconds": seq_seconds, "total_seconds": total_seconds}


# -- 1 ---------------------------------------------------------------------------------

GRAD_CONFIG = ExpertConfig(embed_dim=4, gnn_rounds=2, attn_layers=1, attn_heads=2, max_atoms=6)


def _grad_input(rng):
    while True:
        g = datagen.random_molecule(rng, max_atoms=6)
        if g.n_atoms >= 2:
            break
    pairs = {}
    for _ in range(2):
        i, j = sorted(rng.choice(g.n_atoms, size=2, replace=False).tolist())
        pairs[(i, j)] = int(rng.choice([-1, 1]))
    return TrainingExample("g", g, ElectronDelta.from_pairs(pairs))


def test_criterion_01_gradient_correctness():
    with criterion(1, "full-model gradients vs central differences") as c:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = 0.0
        for k in range(20):
            examples = [_grad_input(rng)]
            base = ex.init_params(GRAD_CONFIG, k)
            store = ParamStore({n: v + 0.5 * rng.normal(size=v.shape) for n, v in base.arrays().items()})
            with Tape() as tape:
                value = batch_loss(store, GRAD_CONFIG, examples)
            tape.backward(value)
            analytic = np.concatenate([store.grads()[n].ravel() for n in store.names()])

            def f():
                return float(batch_loss(store, GRAD_CONFIG, examples).data)

            numeric = np.concatenate([numeric_grad(f, store[n].data, h=1e-5).ravel() for n in store.names()])
            worst = max(worst, rel_error(analytic, numeric))
        seconds = time.perf_counter() - t0
        c.note(f"inputs=20 max_rel_error={worst:.2e} runtime={seconds:.1f}s")
        assert worst <= 1e-4
        assert seconds < 60


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_02_partition_invariants(trained):
    with criterion(2, "sequential partition invariants on 2,000 reactions") as c:
        reg, data = trained["registry"], trained["data"]
        ids = {e.id for e in data}
        assert len(ids) == 2000
        sets = [set(r.correct_ids) for r in reg.experts]
        for a in range(len(sets)):
            for b in range(a + 1, len(sets)):
                assert not sets[a] & sets[b]
        reg.check_partition(sorted(ids))
        pool = set(ids)
        for step in reg.manifest["chain"]:
            claimed = next((s for r, s in zip(reg.experts, sets) if r.expert_id == step["expert_id"]), set())
            assert claimed <= pool and step["pool_size"] == len(pool)
            pool = pool - claimed
            assert step["remaining"] == len(pool)
        assert pool == set(reg.manifest["remainder"])
        seqmoe.verify_consistency(reg, data)
        c.note(f"experts={[(r.expert_id, len(r.correct_ids)) for r in reg.experts]} "
               f"remainder={len(pool)} runtime={trained['seq_seconds']:.0f}s")
        assert trained["seq_seconds"] < 600


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_03_rare_pattern_hitrate(trained):
    with criterion(3, "conflict HitRate@2: chief-only vs full pipeline") as c:
        corpus = trained["corpus"]
        n_conf = sum(1 for r in corpus.train if r.reactants.n_atoms and "Si" in {a.element for a in r.reactants.atoms}
                     and "N" in {a.element for a in r.reactants.atoms})
        chief = trained["reports"]["chief_only"].hitrate[2]
        full = trained["reports"]["full"].hitrate[2]
        c.note(f"chief={chief:.3f} full={full:.3f} conflict_train_share={n_conf / len(corpus.train):.2f} "
               f"groups={len(corpus.conflict_test)} runtime={trained['total_seconds']:.0f}s")
        assert n_conf / len(corpus.train) >= 0.10
        assert chief <= 0.65
        assert full >= chief + 0.15
        assert trained["total_seconds"] < 1200


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_04_ablation_ordering(trained):
    with criterion(4, "Top-5 ordering full >= single additions >= chief-only") as c:
        r = {k: v.topk[5] for k, v in trained["reports"].items()}
        c.note(" ".join(f"{k}={v:.3f}" for k, v in r.items()))
        for single in ("seq_moe_only", "dropout_only"):
            assert r["full"] >= r[single] >= r["chief_only"]
        assert r["full"] - r["chief_only"] >= 0.01


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_05_avg_list_length(trained):
    with criterion(5, "Avg.L chief-only = 1.0, full in (1, 1 + N + n_seeds(N+1)]") as c:
        chief = trained["reports"]["chief_only"].avg_l
        full = trained["reports"]["full"].avg_l
        bound = 1 + 2 + 5 * (2 + 1)
        c.note(f"chief={chief:.3f} full={full:.3f} bound={bound}")
        assert chief == 1.0
        assert 1.0 < full <= bound


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_06_ranking_contract(trained):
    with criterion(6, "rank_and_merge vs comparator oracle, chief first, six orders share Top-1") as c:
        rng = np.random.default_rng(6)
        for trial in range(1000):
            tiers = random_tiers(rng)
            order = ALL_ORDERS[trial % len(ALL_ORDERS)]
            got = rank_and_merge(*tiers, order=order)
            assert [(p.signature, p.tier, p.expert_id, p.seed) for p in got] == merge_oracle(sum(tiers, []), order)
            if tiers[0] and tiers[0][0].product is not None:
                assert got[0].tier == CHIEF
        corpus, reg = trained["corpus"], trained["registry"]
        table = ev.ablation_run(reg, corpus.test[:200], (), ("full",), ALL_ORDERS)
        top1 = {r.topk[1] for r in table.values()}
        c.note(f"oracle_cases=1000 orders={len(table)} top1={sorted(top1)}")
        assert len(table) == 6 and len(top1) == 1


# -- 7 ---------------------------------------------------------------------------------

def _run_pipeline(root, spec_text, cfg_text):
    root.mkdir()
    (root / "spec.ini").write_text(spec_text)
    (root / "run.cfg").write_text(cfg_text)
    env = dict(os.environ, ERPFLOW_THREADS="1")

    def erp(*args):
        proc = subprocess.run([sys.executable, "-m", "erpflow", "--log-level", "WARNING", *map(str, args)],
                              capture_output=True, text=True, env=env)
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    erp("gen-data", "--spec", root / "spec.ini", "--out", root / "data")
    erp("train", "--config", root / "run.cfg", "--train", root / "data/train.txt", "--out", root / "reg.bin")
    erp("predict", "--config", root / "run.cfg", "--registry", root / "reg.bin", "--input", root / "data/test.txt",
        "--out", root / "pred.txt", "--verbose")
    report = erp("eval", "--config", root / "run.cfg", "--registry", root / "reg.bin", "--test",
                 root / "data/test.txt", "--conflict", root / "data/conflict.txt", "--latency-samples", "0")
    digest = hashlib.sha256((root / "reg.bin").read_bytes()).hexdigest()
    return digest, (root / "pred.txt").read_bytes(), report


def test_criterion_07_end_to_end_determinism(tmp_path):
    with criterion(7, "two seeded end-to-end CLI runs are byte-identical") as c:
        spec = datagen.dump_corpus_spec(datagen.CorpusSpec(total=200, conflict_fraction=0.3, seed=7))
        cfg = RunConfig(expert=SMALL_EXPERT, training=dataclasses.replace(SMALL_TRAIN, seed=13)).to_text()
        a = _run_pipeline(tmp_path / "a", spec, cfg)
        b = _run_pipeline(tmp_path / "b", spec, cfg)
        c.note(f"registry_sha256={a[0][:16]}... prediction_bytes={len(a[1])}")
        assert a[0] == b[0]
        assert a[1] == b[1]
        assert a[2] == b[2]
        for name in ("train.txt", "test.txt", "conflict.txt", "manifest.txt"):
            assert (tmp_path / "a/data" / name).read_bytes() == (tmp_path / "b/data" / name).read_bytes()


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_08_metric_oracles():
    with criterion(8, "Top-K and HitRate@K equal brute force on 500 cases; Top-K monotone") as c:
        rng = np.random.default_rng(8)
        alphabet = [f"p{k}" for k in range(10)]
        for _ in range(500):
            n = int(rng.integers(1, 40))
            lists = [list(rng.choice(alphabet, size=int(rng.integers(0, 11)), replace=False)) for _ in range(n)]
            truths = [str(rng.choice(alphabet)) for _ in range(n)]
            sets = [set(rng.choice(alphabet, size=int(rng.integers(1, 5)), replace=False)) for _ in range(n)]
            accs = []
            for k in ev.TOP_KS:
                acc = ev.topk_accuracy(lists, truths, k)
                assert acc == topk_bruteforce(lists, truths, k)
                assert ev.hitrate_at_k(lists, sets, k) == hitrate_bruteforce(lists, sets, k)
                accs.append(acc)
            assert accs == sorted(accs)
        c.note("cases=500")


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_09_parser_and_delta_round_trip(trained):
    with criterion(9, "SMILES round trip on 1,000 molecules; delta round trip on the corpus") as c:
        rng = np.random.default_rng(9)
        for _ in range(1000):
            g = datagen.random_molecule(rng)
            assert canonical_signature(parse_smiles(write_smiles(g))) == canonical_signature(g)
        corpus = trained["corpus"]
        reactions = corpus.train + corpus.test + datagen.conflict_reactions(corpus.conflict_test)
        for r in reactions:
            assert np.array_equal(product_graph(r).bonds, r.product.bonds)
        c.note(f"molecules=1000 reactions={len(reactions)}")


# -- 10 --------------------------------------------------------------------------------

def test_criterion_10_dropout_protocol(trained):
    with criterion(10, "dropout determinism, diversity across 5 seeds, pass count") as c:
        corpus, reg = trained["corpus"], trained["registry"]
        opts = InferenceOptions()
        graphs = [r.reactants for r in corpus.test] + [cc.reactants for cc in corpus.conflict_test]
        first = predict(graphs[0], reg, opts)
        again = predict(graphs[0], reg, opts)
        assert [(p.signature, p.metadata()) for p in first] == [(p.signature, p.metadata()) for p in again]
        diverse = 0
        for g in graphs:
            pool = collect_candidates(g, reg, opts)
            assert pool.passes == 1 + 2 + 5 + 2 * 5 == opts.expected_passes(len(pool.selected))
            # raw dropout outputs per model, before the merge drops repeats of earlier tiers
            by_model: dict = {}
            for tier in (CHIEF_DROP, SELECTED_DROP):
                for cand in pool.tiers[tier]:
                    if cand.product is not None:
                        by_model.setdefault(cand.expert_id, set()).add(cand.signature)
            diverse += any(len(s) >= 2 for s in by_model.values())
        c.note(f"reactants_with_dropout_diversity={diverse}/{len(graphs)} passes=18")
        assert diverse >= 1


# -- 11 --------------------------------------------------------------------------------

def test_criterion_11_latency_scaling(trained):
    with criterion(11, "serial pipeline latency within 20% of passes x single pass") as c:
        corpus, reg = trained["corpus"], trained["registry"]
        stats = ev.latency_benchmark(reg, [r.reactants for r in corpus.test[:50]], repetitions=2)
        report = ev.evaluate(reg, corpus.test[:5], latency_samples=5)[0].to_text()
        c.note(f"single={stats.single_pass_ms:.3f}ms pipeline={stats.pipeline_ms:.3f}ms "
               f"passes={stats.passes_per_sample:.0f} ratio={stats.ratio:.3f}")
        assert "latency_single_pass_ms" in report
        assert abs(stats.ratio - 1.0) <= 0.20
