"""Command-line interface: one subcommand per pipeline stage.

Configuration comes from one JSON document; every key can be overridden on
the command line with --set key=value. Diagnostics go to stderr, data to
files or stdout. Exit status: 0 success, 1 domain/contract/state error,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import DatasetManifest, build_dataset, read_cloud, write_cloud, write_xyz
from .errors import ContractError, DomainError, EvaluationError, FormatError, StateError
from .memory import MemoryBank
from .models import CompletionModel
from . import pipeline

_HANDLED_ERRORS = (ContractError, DomainError, FormatError, StateError, EvaluationError)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.from_file(args.config)
    else:
        config = ExperimentConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = _parse_value(value.strip())
    if getattr(args, "threads", None):
        overrides["threads"] = args.threads
    env_seed = os.environ.get("PPC_SEED")
    if env_seed is not None:
        overrides["seed"] = int(env_seed)
    config = config.with_overrides(overrides) if overrides else config.validate()
    print(f"config: {config.to_json()}", file=sys.stderr)
    return config


def _add_common(parser):
    parser.add_argument("--config", help="path to a JSON config document")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--threads", type=int, help="cap worker threads")


def _cmd_gen_data(args) -> int:
    config = _load_config(args)
    manifest = build_dataset(
        config.data_dir, config.categories, config.samples_per_category,
        config.complete_points, config.partial_points, config.train_fraction,
        config.seed, fractions=config.fractions,
    )
    print(f"wrote {len(manifest.samples)} clouds under {config.data_dir}",
          file=sys.stderr)
    return 0


def _cmd_pretrain(args) -> int:
    config = _load_config(args)
    path = pipeline.pretrain_stage(config)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    artifacts = pipeline.train_run(config, label=args.label)
    print(f"wrote {artifacts.weights_path}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args)
    run_dir = Path(config.out_dir) / "train" / args.label
    weights = run_dir / "weights.ppcw"
    if not weights.exists():
        raise StateError(f"weights {weights} not found; run the train stage first")
    model = CompletionModel(config.feature_dim, config.hidden_dim,
                            config.decoder_hidden, config.num_centers,
                            config.expansion, config.prior_count, config.seed)
    model.load(weights)
    bank = None
    if config.use_memory:
        bank_path = run_dir / "bank.ppcm"
        if not bank_path.exists():
            raise StateError(f"bank {bank_path} not found; run the train stage first")
        bank = MemoryBank.load(bank_path, top_k=max(config.prior_count, 1),
                               delta=config.chamfer_threshold)
    data_root = Path(config.data_dir)
    manifest = DatasetManifest.load(data_root / "manifest.json")
    report = pipeline.evaluate(model, bank, config, data_root, manifest,
                               split=args.split)
    report.write_jsonl(run_dir / f"eval_{args.split}.jsonl")
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def _cmd_complete(args) -> int:
    config = _load_config(args)
    partial = read_cloud(args.infile)
    model = CompletionModel(config.feature_dim, config.hidden_dim,
                            config.decoder_hidden, config.num_centers,
                            config.expansion, config.prior_count, config.seed)
    model.load(args.weights)
    bank = None
    if config.use_memory:
        if not args.bank:
            raise StateError("memory is enabled but no --bank was given")
        bank = MemoryBank.load(args.bank, top_k=max(config.prior_count, 1),
                               delta=config.chamfer_threshold)
    completer = pipeline.Completer(model, bank, config)
    dense = completer.complete(partial)
    write_cloud(args.out, dense)
    if args.xyz:
        write_xyz(args.xyz, dense)
    print(f"wrote {args.out} ({len(dense)} points)", file=sys.stderr)
    return 0


def _cmd_ablate(args) -> int:
    config = _load_config(args)
    settings = args.settings.split(",") if args.settings else None
    priors = [int(x) for x in args.priors.split(",")] if args.priors else None
    deltas = [float(x) for x in args.deltas.split(",")] if args.deltas else None
    rows = pipeline.ablation_matrix(config, settings=settings,
                                    prior_counts=priors, deltas=deltas)
    for row in rows:
        print(json.dumps({"setting": row.setting, **row.summary}, sort_keys=True))
    return 0


def _cmd_memory_dump(args) -> int:
    bank = MemoryBank.load(args.bank)
    print(f"slots: {len(bank.slots)} capacity: {bank.capacity}")
    for i, slot in enumerate(bank.slots):
        norm = float(np.linalg.norm(slot.key))
        print(f"slot {i:4d} age {slot.age:6d} key-norm {norm:.3f} "
              f"points {len(slot.value)}")
    if len(bank.slots) > 1:
        keys = np.stack([s.key for s in bank.slots])
        sims = keys @ keys.T
        pairs = [(float(sims[i, j]), i, j)
                 for i in range(len(keys)) for j in range(i + 1, len(keys))]
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        print("top key similarities:")
        for sim, i, j in pairs[:5]:
            print(f"  ({i}, {j}) cos {sim:.4f}")
    return 0


def _cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    return run_selfcheck()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapemem",
        description="memory-guided point cloud completion, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastively pretrain both encoders")
    _add_common(p)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("train", help="train the completion model")
    _add_common(p)
    p.add_argument("--label", default="run", help="run directory name")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    _add_common(p)
    p.add_argument("--label", default="run")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("complete", help="complete one partial cloud file")
    _add_common(p)
    p.add_argument("--in", dest="infile", required=True, help="partial NPC1 file")
    p.add_argument("--weights", required=True, help="PPCW weights file")
    p.add_argument("--bank", help="PPCM memory bank file")
    p.add_argument("--out", required=True, help="output NPC1 file")
    p.add_argument("--xyz", help="also export plain-text XYZ")
    p.set_defaults(fn=_cmd_complete)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    _add_common(p)
    p.add_argument("--settings", help="comma list from A..F (default all)")
    p.add_argument("--priors", help="comma list of prior counts")
    p.add_argument("--deltas", help="comma list of write thresholds")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("memory-dump", help="print a readable bank listing")
    p.add_argument("--bank", required=True)
    p.set_defaults(fn=_cmd_memory_dump)

    p = sub.add_parser("selfcheck", help="run built-in oracle and gradient checks")
    _add_common(p)
    p.set_defaults(fn=_cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _HANDLED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
