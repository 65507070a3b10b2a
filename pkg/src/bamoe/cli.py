"""Command line entry point.

Exit codes: 0 success, 1 gradient check failed, 2 contract/config/data
error, 3 numerical failure (non-finite values, divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .checkpoint import Checkpoint
from .config import TrainConfig, load_toml, train_config_from_toml
from .data import (
    SynthConfig,
    generate_dataset,
    read_jsonl,
    synth_config_from_dict,
    synth_config_to_dict,
    write_jsonl,
)
from .errors import ContractError, NumericalError

log = logging.getLogger("bamoe")


def _configs(args) -> tuple[TrainConfig, SynthConfig]:
    raw = load_toml(args.config) if args.config else {}
    train_cfg = train_config_from_toml(raw)
    data_cfg = synth_config_from_dict(raw.get("data", {}))
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, optim=dataclasses.replace(train_cfg.optim, seed=args.seed))
        data_cfg = dataclasses.replace(data_cfg, seed=args.seed)
    return train_cfg, data_cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick_utterance(path: str, utt_id: str | None):
    data = read_jsonl(path)
    if not data:
        raise ContractError(f"{path} holds no utterances")
    if utt_id is None:
        return data[0]
    for u in data:
        if u.id == utt_id:
            return u
    raise ContractError(f"utterance {utt_id!r} not found in {path}")


def cmd_gen_data(args) -> int:
    _, data_cfg = _configs(args)
    out = _out_dir(args)
    splits = {"train": (args.n_train, 0), "dev": (args.n_dev, 10**6), "test": (args.n_test, 2 * 10**6)}
    for name, (n, start) in splits.items():
        if n:
            write_jsonl(generate_dataset(data_cfg, n, start), out / f"{name}.jsonl")
    (out / "data_config.json").write_text(json.dumps(synth_config_to_dict(data_cfg), indent=2) + "\n")
    print(f"wrote {', '.join(k for k, (n, _) in splits.items() if n)} to {out}")
    return 0


def cmd_train(args) -> int:
    train_cfg, _ = _configs(args)
    out = _out_dir(args)
    train_set = read_jsonl(args.train)
    dev_set = read_jsonl(args.dev) if args.dev else None
    result = harness.train(train_cfg, train_set, dev_set)
    result.checkpoint.save(out / "checkpoint.json")
    (out / "train_log.csv").write_text(result.log_csv())
    last = result.log_rows[-1] if result.log_rows else {}
    print(f"step {result.checkpoint.step} saved to {out / 'checkpoint.json'}; last total {last.get('total', float('nan')):.4f}")
    return 0


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    _check_boundary_source(args)
    ev = harness.evaluate_params(ck.params, ck.config.model, read_jsonl(args.test), args.boundary_source)
    print(ev.report.to_json())
    if args.out_dir:
        out = _out_dir(args)
        (out / "report.json").write_text(ev.report.to_json() + "\n")
        (out / "report.txt").write_text(ev.text_report(ck.config.model.vocab) + "\n")
    return 0


def _check_boundary_source(args) -> None:
    if args.boundary_source not in harness.BOUNDARY_SOURCES:
        raise ContractError(f"--boundary-source must be one of {harness.BOUNDARY_SOURCES}")


def cmd_ablate(args) -> int:
    train_cfg, data_cfg = _configs(args)
    out = _out_dir(args)
    if args.train and args.test:
        train_set, test_set = read_jsonl(args.train), read_jsonl(args.test)
    else:
        train_set = generate_dataset(data_cfg, args.n_train)
        test_set = generate_dataset(data_cfg, args.n_test, start=2 * 10**6)
    rows = harness.run_ablation(train_cfg, train_set, test_set)
    (out / "ablation.md").write_text(harness.ablation_markdown(rows))
    (out / "ablation.csv").write_text(harness.ablation_csv(rows))
    for i, row in enumerate(rows):
        row.result.checkpoint.save(out / f"checkpoint_row{i}.json")
    print(harness.ablation_markdown(rows), end="")
    return 0


def cmd_gradcheck(args) -> int:
    train_cfg, _ = _configs(args)
    if not args.config:
        train_cfg = dataclasses.replace(train_cfg, model=harness.gradcheck_config())
    seed = train_cfg.optim.seed
    only = args.groups.split(",") if args.groups else None
    groups = harness.gradcheck(train_cfg, h=args.step, seed=seed, groups=only)
    bad = 0
    for g in sorted(groups, key=lambda g: g.group):
        ok = g.max_rel_error < harness.GRADCHECK_TOL
        bad += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {g.group:<18} {g.max_rel_error:.3e}  ({g.worst_param})")
    return 1 if bad else 0


def cmd_export_gates(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    utt = _pick_utterance(args.data, args.utt_id)
    path = _out_dir(args) / f"gates_{utt.id}.csv"
    harness.export_gates(ck, utt, path)
    print(path)
    return 0


def cmd_export_attention(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    utt = _pick_utterance(args.data, args.utt_id)
    path = _out_dir(args) / f"attention_{utt.id}.csv"
    harness.export_attention(ck, utt, path)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [model] [encoder] [decoder] [boundary] [ablation] [weights] [optim] [data] tables")
    common.add_argument("--seed", type=int, help="overrides optim.seed and data.seed")
    common.add_argument("--out-dir", help="directory for outputs, created if missing (default: current directory; eval writes files only when given)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bamoe", description="Boundary-aware MoE code-switching recognizer (toy scale)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic train/dev/test JSONL corpora")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=0)
    p.add_argument("--n-test", type=int, default=200)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one model, write checkpoint.json and train_log.csv")
    p.add_argument("--train", required=True, help="training JSONL")
    p.add_argument("--dev", help="dev JSONL for best-checkpoint selection (needs optim.eval_every)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="greedy-decode and score a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--boundary-source", default="langs", help="BER hypothesis unit: langs (default) or decoder")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and score the four ablation rows")
    p.add_argument("--train", help="training JSONL (default: generate from [data])")
    p.add_argument("--test", help="test JSONL (default: generate from [data])")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="central-difference check of the total loss")
    p.add_argument("--step", type=float, default=harness.GRADCHECK_STEP, help="finite-difference step h")
    p.add_argument("--groups", help="comma-separated parameter groups to check (default: all)")
    p.set_defaults(func=cmd_gradcheck)

    for name, func, what in (
        ("export-gates", cmd_export_gates, "per-layer, per-frame gate coefficients"),
        ("export-attention", cmd_export_attention, "boundary attention-pooling weights"),
    ):
        p = sub.add_parser(name, parents=[common], help=f"CSV of {what} for one utterance")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="JSONL holding the utterance")
        p.add_argument("--utt-id", help="utterance id (default: first record)")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
