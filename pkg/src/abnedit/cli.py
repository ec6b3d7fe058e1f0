"""Command-line pipeline: generate, train, collect, finetune, eval, serve.

The intended loop:
    abnedit generate --out data/
    abnedit train --data data/train.tsv --out base.abnm
    abnedit collect --model base.abnm --data data/train.tsv --out edits/
    ... edit the AMAP files under edits/ ...
    abnedit finetune --model base.abnm --data data/train.tsv --edits edits/ \
        --out tuned.abnm
    abnedit eval --model tuned.abnm --data data/test.tsv --out report.csv

Every subcommand accepts --config FILE with key=value lines; explicit flags
override file values.
"""

from __future__ import annotations

import argparse
import os
import sys

from .data import ArrayDataset, generate, save_dataset
from .maps import load_map, save_map
from .metrics import evaluate_model, write_report
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import (FinetuneConfig, TrainConfig, accuracy,
                       collect_misclassified, finetune_with_maps, train_abn,
                       write_history)


def parse_config_file(path) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key=value, "
                                 f"got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


_COERCERS = {int: int, float: float, str: str}


def _coerce(value: str, kind):
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ValueError(f"expected boolean, got {value!r}")
    return _COERCERS[kind](value)


def _merged_config(args, cls, fields):
    """Dataclass config from defaults <- config file <- explicit flags."""
    kwargs = {}
    file_values = parse_config_file(args.config) if args.config else {}
    for name, kind in fields.items():
        if name in file_values:
            try:
                kwargs[name] = _coerce(file_values[name], kind)
            except ValueError as e:
                raise ValueError(f"config key {name}: {e}")
        flag = getattr(args, name, None)
        if flag is not None:
            kwargs[name] = flag
    unknown = set(file_values) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cls(**kwargs)


TRAIN_FIELDS = {"epochs": int, "batch_size": int, "learning_rate": float,
                "momentum": float, "seed": int}
FINETUNE_FIELDS = dict(TRAIN_FIELDS, gamma=float, edited_only=bool)


def _add_common(p, model=True, out=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    if model:
        p.add_argument("--model", required=True, help="model checkpoint path")
    if out:
        p.add_argument("--out", required=True, help="output path")


def _load_dataset(path) -> ArrayDataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return ArrayDataset.from_manifest(path)


def _load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_generate(args):
    os.makedirs(args.out, exist_ok=True)
    train = generate(args.train, num_classes=args.classes, seed=args.seed or 0,
                     distractor_rate=args.distractor_rate, split="train")
    test = generate(args.test, num_classes=args.classes,
                    seed=(args.seed or 0) + 1,
                    distractor_rate=args.distractor_rate, split="test")
    tpath = save_dataset(train, args.out, "train", args.seed or 0)
    epath = save_dataset(test, args.out, "test", (args.seed or 0) + 1)
    print(f"wrote {len(train)} train samples -> {tpath}")
    print(f"wrote {len(test)} test samples -> {epath}")
    return 0


def cmd_train(args):
    dataset = _load_dataset(args.data)
    config = _merged_config(args, TrainConfig, TRAIN_FIELDS)
    if args.model:
        model = _load_model(args.model)
    else:
        num_classes = int(dataset.labels.max()) + 1
        model_config = ModelConfig(num_classes=max(2, num_classes))
        model = build_model(model_config, seed=config.seed)
    history = train_abn(model, dataset, config)
    save_checkpoint(model, args.out)
    if args.history:
        write_history(history, args.history)
    acc = accuracy(model, dataset)
    print(f"trained {config.epochs} epochs, final loss "
          f"{history[-1].total:.4f}, train accuracy {acc:.3f}")
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_collect(args):
    dataset = _load_dataset(args.data)
    model = _load_model(args.model)
    wrong = collect_misclassified(model, dataset)
    os.makedirs(args.out, exist_ok=True)
    listing = os.path.join(args.out, "misclassified.tsv")
    with open(listing, "w", encoding="utf-8") as f:
        f.write("id\tpredicted\ttrue\n")
        for m in wrong:
            f.write(f"{m.sample_id}\t{m.predicted}\t{m.true_label}\n")
            save_map(m.attention_map, os.path.join(args.out, f"{m.sample_id}.amap"))
    print(f"{len(wrong)} misclassified samples -> {listing}")
    return 0


def cmd_finetune(args):
    dataset = _load_dataset(args.data)
    model = _load_model(args.model)
    config = _merged_config(args, FinetuneConfig, FINETUNE_FIELDS)
    if not os.path.isdir(args.edits):
        raise FileNotFoundError(f"edits directory not found: {args.edits}")
    edited = {}
    for name in sorted(os.listdir(args.edits)):
        if name.endswith(".amap"):
            edited[name[: -len(".amap")]] = load_map(os.path.join(args.edits, name))
    if not edited:
        raise ValueError(f"no .amap files under {args.edits}")
    history = finetune_with_maps(model, dataset, edited, config)
    save_checkpoint(model, args.out)
    if args.history:
        write_history(history, args.history)
    print(f"fine-tuned on {len(edited)} edited maps, final loss "
          f"{history[-1].total:.4f}")
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_eval(args):
    dataset = _load_dataset(args.data)
    model = _load_model(args.model)
    refs = None
    if args.edits:
        refs = {}
        for name in sorted(os.listdir(args.edits)):
            if name.endswith(".amap"):
                refs[name[: -len(".amap")]] = load_map(os.path.join(args.edits, name))
    sample_ids = None
    if args.limit is not None:
        if args.limit < 1:
            raise ValueError(f"--limit must be >= 1, got {args.limit}")
        sample_ids = dataset.ids[: args.limit]
    baseline = args.baseline
    if baseline not in ("mean", "zero", "gray"):
        baseline = float(baseline)
    report = evaluate_model(model, dataset, reference_maps=refs,
                            steps=args.steps, baseline=baseline,
                            sample_ids=sample_ids)
    write_report(report, args.out)
    acc = accuracy(model, dataset)
    mse = "n/a" if report.map_mse is None else f"{report.map_mse:.5f}"
    print(f"accuracy {acc:.3f}  deletion_auc {report.deletion_auc:.4f}  "
          f"insertion_auc {report.insertion_auc:.4f}  map_mse {mse}")
    print(f"report -> {args.out}")
    return 0


def cmd_serve(args):
    from .service import serve

    serve(args.model, args.data, args.store, port=args.port)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="abnedit",
        description="attention-map editing pipeline: train, harvest "
                    "misclassifications, fine-tune on edited maps, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic glyph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=800)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--distractor-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_common(p, model=False)
    p.add_argument("--model", help="optional checkpoint to continue training from")
    p.add_argument("--data", required=True, help="train manifest (.tsv)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--history", help="write per-step loss CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("collect", help="dump misclassified samples and their maps")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("finetune", help="fine-tune branches on edited maps")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--edits", required=True, help="directory of edited .amap files")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--edited-only", dest="edited_only", action="store_true",
                   default=None)
    p.add_argument("--history", help="write per-step loss CSV here")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy, deletion/insertion AUC, map MSE")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--edits", help="directory of reference .amap files for MSE")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--baseline", default="mean", help="mean|zero|gray or a float")
    p.add_argument("--limit", type=int, default=None,
                   help="evaluate only the first N samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the editing service")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", required=True, help="session/job store directory")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
