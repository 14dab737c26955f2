"""Command-line entry point: ``erpflow {gen-data,train,predict,eval,inspect-registry}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen
from . import evaluation as ev
from . import expert as ex
from . import seqmoe
from .autodiff import ChecksumError
from .config import ConfigError, RunConfig
from .inference import ALL_ORDERS, InferenceOptions, format_prediction_line, predict
from .molgraph import ChemistryError, MolGraph
from .smiles import ReactionFileError, iter_reaction_lines, parse_reaction, parse_smiles, read_reactions

log = logging.getLogger("erpflow")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _read(path: str, what: str):
    try:
        reactions, _ = read_reactions(path)
    except OSError as exc:
        raise CliError(f"cannot read {what} file {path}: {exc}", EXIT_DATA) from exc
    except ReactionFileError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from exc
    return reactions


def _load_registry(path: str, cfg: RunConfig | None) -> seqmoe.ExpertRegistry:
    """Load a registry; with a config, its fingerprint settings must match the registry's."""
    fp = (None, None) if cfg is None else (cfg.fingerprint.radius, cfg.fingerprint.length)
    try:
        return seqmoe.load_registry(path, *fp)
    except OSError as exc:
        raise CliError(f"cannot read registry {path}: {exc}", EXIT_DATA) from exc
    except (ChecksumError, seqmoe.RegistryError, ValueError, KeyError) as exc:
        raise CliError(f"bad registry {path}: {exc}", EXIT_DATA) from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    try:
        spec = datagen.load_corpus_spec(args.spec)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    except datagen.CorpusSpecError as exc:
        raise CliError(f"invalid corpus spec: {exc}", EXIT_USAGE) from exc
    corpus = datagen.generate_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "train": (out / "train.txt", corpus.train),
        "test": (out / "test.txt", corpus.test),
        "conflict": (out / "conflict.txt", datagen.conflict_reactions(corpus.conflict_test)),
    }
    for name, (path, reactions) in files.items():
        datagen.write_corpus(path, reactions, (f"{name} split, seed {spec.seed}",))
    manifest = [f"seed: {spec.seed}"]
    for name, (path, reactions) in files.items():
        manifest += [f"{name}_file: {path.name}", f"{name}_count: {len(reactions)}",
                     f"{name}_sha256: {_sha256(path)}"]
    manifest.append(f"conflict_groups: {len(corpus.conflict_test)}")
    manifest += ["spec:"] + ["  " + line for line in datagen.dump_corpus_spec(spec).splitlines() if line]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    print(f"wrote {len(corpus.train)} train, {len(corpus.test)} test, "
          f"{len(corpus.conflict_test)} conflict groups to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    train_path = args.train or cfg.paths.train
    out = args.out or cfg.paths.registry
    if not train_path or not out:
        raise CliError("train file and output registry are required (flags or [paths])", EXIT_USAGE)
    if args.seed is not None:
        cfg = replace(cfg, training=replace(cfg.training, seed=args.seed))
    reactions = _read(train_path, "training")
    if not reactions:
        raise CliError(f"{train_path} holds no reactions", EXIT_DATA)
    try:
        data = ex.examples_from(reactions)
    except ChemistryError as exc:
        raise CliError(f"training data: {exc}", EXIT_DATA) from exc
    try:
        reg = seqmoe.train_registry(data, cfg.expert, cfg.training, cfg.fingerprint.radius, cfg.fingerprint.length)
    except ex.GraphTooLargeError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    except seqmoe.TrainingDivergence as exc:
        raise CliError(f"training diverged: {exc}", EXIT_TRAINING) from exc
    reg.manifest["config"] = cfg.to_text()
    digest = seqmoe.save_registry(reg, out)
    print(f"registry {out} experts={len(reg.experts)} sha256={digest}")
    return EXIT_OK


def _prediction_inputs(path: str) -> tuple[list[tuple[str, MolGraph]], list[str]]:
    """Reactant graphs from a reaction file; lines may be ``r>>p`` or bare reactant SMILES."""
    items, problems = [], []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read input {path}: {exc}", EXIT_DATA) from exc
    with fh:
        for lineno, text, rid in iter_reaction_lines(fh):
            try:
                graph = parse_reaction(text, rid).reactants if ">" in text else parse_smiles(text)
            except ChemistryError as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            items.append((rid, graph))
    return items, problems


def _options(cfg: RunConfig, args: argparse.Namespace) -> InferenceOptions:
    opts = cfg.inference
    if getattr(args, "variant", None):
        opts = replace(opts, tiers=ev.VARIANTS[args.variant])
    if getattr(args, "n_seeds", None) is not None:
        opts = replace(opts, n_seeds=args.n_seeds)
    if getattr(args, "top_n", None) is not None:
        opts = replace(opts, top_n=args.top_n)
    return opts


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    reg = _load_registry(args.registry, cfg if args.config else None)
    opts = _options(cfg, args)
    items, problems = _prediction_inputs(args.input)
    for p in problems:
        print(f"{args.input}: {p} (skipped)", file=sys.stderr)
    preds = ev.parallel_map(lambda item: predict(item[1], reg, opts), items)
    lines = [format_prediction_line(rid, p, args.verbose) for (rid, _), p in zip(items, preds)]
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"predicted {len(items)} reactions, skipped {len(problems)}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    reg = _load_registry(args.registry, cfg if args.config else None)
    opts = _options(cfg, args)
    test = _read(args.test, "test")
    train = _read(args.train, "training") if args.train else None
    conflict = _read(args.conflict, "conflict") if args.conflict else []
    if args.rare_threshold is not None and not train:
        raise CliError("--rare-threshold needs a non-empty --train file", EXIT_USAGE)
    if not test:
        raise CliError(f"{args.test} holds no reactions", EXIT_DATA)
    reports = ev.evaluate(reg, test, train, opts, args.rare_threshold, conflict, args.adjust_uspto,
                          args.latency_samples, args.min_products)
    groups = ev.multi_product_groups(list(test) + list(conflict), args.min_products)
    if args.ablation:
        orders = ALL_ORDERS if args.all_orders else (opts.order,)
        reports += ev.ablation_run(reg, test, groups, ev.VARIANTS, orders, opts,
                                   min_products=args.min_products).values()
    elif args.all_orders:
        reports += ev.ablation_run(reg, test, groups, ("full",), ALL_ORDERS, opts,
                                   min_products=args.min_products).values()
    text = "\n".join(r.to_text() for r in reports)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.csv:
        rows = ["metric,K,subset,value"] + [row for r in reports for row in r.to_csv_lines()]
        Path(args.csv).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_inspect_registry(args: argparse.Namespace) -> int:
    reg = _load_registry(args.registry, None)
    print(f"experts: {len(reg.experts)}")
    print(f"chief: {'yes' if reg.chief is not None else 'no'}")
    print(f"fingerprint: radius={reg.fp_radius} length={reg.fp_length}")
    for rec in reg.experts:
        print(f"expert {rec.expert_id}: |s_i|={len(rec.correct_ids)} "
              f"centroid_norm={float(np.linalg.norm(rec.centroid)):.6f}")
    for key in ("seed", "dataset_size", "dataset_digest"):
        if key in reg.manifest:
            print(f"manifest.{key}: {reg.manifest[key]}")
    for step in reg.manifest.get("chain", []):
        print(f"chain {step['expert_id']}: |D_i|={step['pool_size']} |s_i|={step['correct']} "
              f"remaining={step['remaining']} stored={str(step['stored']).lower()}")
    print(f"manifest.remainder: {len(reg.manifest.get('remainder', []))}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="erpflow", description="Reaction outcome prediction by electron redistribution.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--spec", required=True, help="corpus spec (INI with [corpus] and [shares])")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="warm-up, sequential experts and chief; writes a registry")
    t.add_argument("--config")
    t.add_argument("--train", help="training reaction file (default: [paths] train)")
    t.add_argument("--out", help="registry path (default: [paths] registry)")
    t.add_argument("--seed", type=int, help="override [run] seed")
    t.set_defaults(fn=cmd_train)

    def inference_flags(q: argparse.ArgumentParser) -> None:
        q.add_argument("--config")
        q.add_argument("--registry", required=True)
        q.add_argument("--variant", choices=sorted(ev.VARIANTS), help="restrict the candidate tiers")
        q.add_argument("--top-n", type=int, dest="top_n", help="experts selected per input")
        q.add_argument("--n-seeds", type=int, dest="n_seeds", help="dropout samples per model")

    q = sub.add_parser("predict", help="ranked product lists for a reaction file")
    inference_flags(q)
    q.add_argument("--input", required=True, help="reaction file or one reactant SMILES per line")
    q.add_argument("--out", required=True)
    q.add_argument("--verbose", action="store_true", help="append tier:expert:seed:similarity per candidate")
    q.set_defaults(fn=cmd_predict)

    e = sub.add_parser("eval", help="Top-K, HitRate@K, Avg.L, rare subset, latency, ablations")
    inference_flags(e)
    e.add_argument("--test", required=True)
    e.add_argument("--train", help="training file; needed for --rare-threshold")
    e.add_argument("--conflict", help="reaction file with several products per reactant set")
    e.add_argument("--rare-threshold", type=float, dest="rare_threshold")
    e.add_argument("--adjust-uspto", action="store_true", dest="adjust_uspto",
                   help="subtract 0.003 from Top-K accuracies and mark the report")
    e.add_argument("--min-products", type=int, default=2, dest="min_products",
                   help="distinct products a reactant set needs to count for HitRate")
    e.add_argument("--ablation", action="store_true", help="also report the four tier variants")
    e.add_argument("--all-orders", action="store_true", dest="all_orders", help="also report the six tier orders")
    e.add_argument("--latency-samples", type=int, default=20, dest="latency_samples")
    e.add_argument("--out", help="write the text report here too")
    e.add_argument("--csv", help="write metric,K,subset,value rows here")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect-registry", help="summarise a registry file")
    i.add_argument("registry")
    i.set_defaults(fn=cmd_inspect_registry)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"erpflow {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, ConfigError) as exc:
        print(f"erpflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
