"""gen-data -> train -> predict -> eval through the CLI, all files under one directory.

    python3 scripts/run_pipeline.py /tmp/run --total 400
"""
import argparse
from pathlib import Path

from erpflow import datagen
from erpflow.cli import main as erpflow
from erpflow.config import RunConfig
from erpflow.expert import ExpertConfig
from erpflow.seqmoe import SeqTrainConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root", type=Path)
    p.add_argument("--total", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--chief-iters", type=int, default=40)
    p.add_argument("--lr", type=float, default=3e-3)
    args = p.parse_args()

    root = args.root
    root.mkdir(parents=True, exist_ok=True)
    spec = datagen.CorpusSpec({"substitution": 0.9, "silylation": 0.1}, total=args.total,
                              conflict_fraction=0.3, seed=args.seed)
    (root / "spec.ini").write_text(datagen.dump_corpus_spec(spec))
    cfg = RunConfig(
        expert=ExpertConfig(embed_dim=args.embed_dim, attn_heads=2),
        training=SeqTrainConfig(warmup_iters=args.warmup, chief_iters=args.chief_iters, n_experts=10,
                                max_total_iters=20, lr=args.lr, seed=args.seed),
    )
    (root / "run.cfg").write_text(cfg.to_text())

    steps = [
        ["gen-data", "--spec", root / "spec.ini", "--out", root / "data"],
        ["train", "--config", root / "run.cfg", "--train", root / "data/train.txt", "--out", root / "reg.bin"],
        ["inspect-registry", root / "reg.bin"],
        ["predict", "--config", root / "run.cfg", "--registry", root / "reg.bin",
         "--input", root / "data/test.txt", "--out", root / "predictions.txt"],
        ["eval", "--config", root / "run.cfg", "--registry", root / "reg.bin", "--test", root / "data/test.txt",
         "--train", root / "data/train.txt", "--conflict", root / "data/conflict.txt", "--rare-threshold", "0.2",
         "--ablation", "--out", root / "report.txt", "--csv", root / "metrics.csv"],
    ]
    for step in steps:
        print("$ erpflow", " ".join(map(str, step)))
        rc = erpflow([str(s) for s in step])
        if rc:
            raise SystemExit(rc)


if __name__ == "__main__":
    main()
