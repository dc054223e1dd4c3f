"""Command-line entry point: ``vsl {synth,semsim,train,eval,rankcheck}``.

Option values resolve as command-line flag > config file > built-in default.
A config file holds ``key = value`` lines (keys are the long option names,
dashes or underscores); ``#`` starts a comment.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checks
from .data_io import DATASET_FILES, SynthConfig, atomic_write_bytes, load_captions, load_dataset, save_dataset, synth_generate
from .encoder_trainer import TrainConfig, TrainingError, TwoBranchEncoder, score_matrix, train
from .evaluator import confuser_outranks, format_tables, recall_table_folds
from .losses import LossConfig
from .text_semantics import build_corpus_stats, semantic_matrix

log = logging.getLogger("vsl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

OUTPUT_FILES = {
    **DATASET_FILES,
    "encoder": "encoder.vslm",
    "report": "report.json",
    "timing": "timing.json",
    "recall": "recall.json",
    "semantic": "semantic.json",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, default, help); every entry is a flag and a config-file key
OPTIONS = {
    "synth": {
        "images": (int, 300, "number of images"),
        "concepts": (int, 6, "number of main-content concepts"),
        "confound": (float, 0.5, "fraction of images carrying another image's content in the background"),
        "noise": (float, SynthConfig.feature_noise, "feature noise standard deviation"),
        "q": (int, 5, "captions per image"),
    },
    "semsim": {
        "captions": (str, None, "caption JSON file"),
        "ids": (str, "", "comma-separated image ids (default: all)"),
    },
    "train": {
        "data": (str, None, "dataset directory (captions JSON + FVEC features)"),
        "alpha": (float, 1.0, "triplet weight"),
        "beta": (float, 10.0, "visual semantic loss weight"),
        "margin": (float, 0.2, "triplet margin"),
        "tau": (float, 0.001, "smooth-rank temperature"),
        "tsl": (_bool, False, "add the text-side semantic loss"),
        "mining": (str, "hardest", "negative mining: hardest or sum_all"),
        "batch": (int, 128, "batch size"),
        "epochs": (int, 25, "training epochs"),
        "lr": (float, 0.0003, "initial learning rate"),
        "lr_decayed": (float, 0.00003, "learning rate after the decay epoch"),
        "decay_epoch": (int, 10, "epoch at which the learning rate drops"),
        "emb_dim": (int, 64, "embedding dimension"),
        "grad_clip": (float, None, "clip the global gradient norm (default: off)"),
        "split": (str, "train", "split to train on"),
    },
    "eval": {
        "data": (str, None, "dataset directory"),
        "snapshot": (str, None, "encoder snapshot (default: <out>/encoder.vslm)"),
        "split": (str, "test", "split to evaluate"),
        "folds": (int, 1, "average over this many image folds (5 for the 1K protocol)"),
    },
    "rankcheck": {
        "tau": (float, 0.001, "temperature for the hard-limit and identity suites"),
        "trials": (int, 100, "matrices in the hard-limit suite"),
    },
}
COMMON = {
    "seed": (int, 0, "random seed"),
    "out": (str, "out", "output directory"),
}


def parse_config_file(path, allowed) -> dict:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in body.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        typ = allowed[key][0]
        try:
            values[key] = typ(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vsl", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=f"{cmd} command")
        p.add_argument("--config", help="key = value config file (flags take precedence)")
        for name, (typ, default, help_text) in {**opts, **COMMON}.items():
            flag = "--" + name.replace("_", "-")
            if typ is _bool:
                p.add_argument(flag, dest=name, action="store_const", const=True, default=None,
                               help=f"{help_text} (default: off)")
            else:
                if "default" not in help_text:
                    help_text = f"{help_text} (default: {default})"
                p.add_argument(flag, dest=name, type=typ, default=None, help=help_text)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    allowed = {**OPTIONS[args.command], **COMMON}
    from_file = parse_config_file(args.config, allowed) if args.config else {}
    out = {}
    for name, (_, default, _) in allowed.items():
        flag = getattr(args, name)
        out[name] = flag if flag is not None else from_file.get(name, default)
    return out


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_synth(opts) -> int:
    cfg = SynthConfig(num_images=opts["images"], concepts=opts["concepts"], confound_rate=opts["confound"],
                      feature_noise=opts["noise"], q_per_image=opts["q"], seed=opts["seed"])
    ds = synth_generate(cfg)
    paths = save_dataset(ds, _out_dir(opts))
    for p in paths.values():
        print(p)
    planted = sum(1 for t in ds.meta["confuser_target"] if t >= 0)
    counts = {s: ds.splits.count(s) for s in ("train", "val", "test")}
    print(f"synthetic dataset: {ds.n_images} images, {ds.n_texts} texts, {cfg.concepts} concepts, "
          f"{planted} planted confusers, splits {counts}")
    return EXIT_OK


def cmd_semsim(opts) -> int:
    if not opts["captions"]:
        raise UsageError("--captions is required")
    records = load_captions(opts["captions"])
    train_records = [r for r in records if r.split in (None, "train")] or records
    stats = build_corpus_stats([r.captions for r in train_records])
    by_id = {r.image_id: r for r in records}
    ids = [s.strip() for s in opts["ids"].split(",") if s.strip()] or list(by_id)
    for image_id in ids:
        if image_id not in by_id:
            raise UsageError(f"unknown image id {image_id!r}")
    C = semantic_matrix([by_id[i].captions for i in ids], stats)
    path = _out_dir(opts) / OUTPUT_FILES["semantic"]
    payload = {"image_ids": ids, "matrix": C.tolist()}
    atomic_write_bytes(path, (json.dumps(payload, indent=1) + "\n").encode("utf-8"))
    print(path)
    return EXIT_OK


def train_config(opts) -> TrainConfig:
    loss = LossConfig(margin=opts["margin"], alpha=opts["alpha"], beta=opts["beta"], tau=opts["tau"],
                      negative_mining=opts["mining"], include_tsl=opts["tsl"])
    return TrainConfig(batch_size=opts["batch"], epochs=opts["epochs"], lr_initial=opts["lr"],
                       lr_decayed=opts["lr_decayed"], decay_epoch=opts["decay_epoch"], seed=opts["seed"],
                       d_emb=opts["emb_dim"], grad_clip=opts["grad_clip"], loss=loss)


def cmd_train(opts) -> int:
    if not opts["data"]:
        raise UsageError("--data is required")
    try:
        cfg = train_config(opts)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print("config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    ds = load_dataset(opts["data"])
    data = ds.split(opts["split"])
    if data.n_images < 2:
        raise UsageError(f"split {opts['split']!r} has fewer than two images")
    out = _out_dir(opts)
    try:
        report = train(data, cfg)
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    snap = out / OUTPUT_FILES["encoder"]
    report.encoder.save(snap)
    report.snapshot = OUTPUT_FILES["encoder"]
    atomic_write_bytes(out / OUTPUT_FILES["report"], report.to_json().encode("utf-8"))
    timing = json.dumps({"wall_clock_per_epoch": report.wall_clock}, indent=2) + "\n"
    atomic_write_bytes(out / OUTPUT_FILES["timing"], timing.encode("utf-8"))
    last = report.epochs[-1]
    print(f"trained {report.steps} steps; final epoch loss {last.total:.4f} "
          f"(triplet {last.triplet:.4f}, vsl {last.vsl:.4f}, tsl {last.tsl:.4f})")
    print(snap)
    print(out / OUTPUT_FILES["report"])
    return EXIT_OK


def cmd_eval(opts) -> int:
    if not opts["data"]:
        raise UsageError("--data is required")
    out = _out_dir(opts)
    snap = Path(opts["snapshot"] or out / OUTPUT_FILES["encoder"])
    enc = TwoBranchEncoder.load(snap)
    ds = load_dataset(opts["data"]).split(opts["split"])
    if ds.n_images == 0:
        raise UsageError(f"split {opts['split']!r} is empty")
    if ds.image_features.shape[1] != enc.w_img.shape[0] or ds.text_features.shape[1] != enc.w_txt.shape[0]:
        raise UsageError(
            f"snapshot expects features of dim {enc.w_img.shape[0]}/{enc.w_txt.shape[0]}, dataset has "
            f"{ds.image_features.shape[1]}/{ds.text_features.shape[1]}"
        )
    S = score_matrix(enc, ds)
    i2t = recall_table_folds(S, ds.ground_truth, "i2t", opts["folds"])
    t2i = recall_table_folds(S, ds.ground_truth, "t2i", opts["folds"])
    print(format_tables(i2t, t2i, label=snap.name))
    result = {"split": opts["split"], "folds": opts["folds"], "i2t": i2t.to_dict(), "t2i": t2i.to_dict()}
    if "confuser_target" in ds.meta:
        result["confuser_outranks"] = confuser_outranks(S, ds.ground_truth, ds.meta["confuser_target"])
        print(f"planted confusers outranking the true image: {result['confuser_outranks']}")
    path = out / OUTPUT_FILES["recall"]
    atomic_write_bytes(path, (json.dumps(result, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    print(path)
    return EXIT_OK


def cmd_rankcheck(opts) -> int:
    results = [checks.suite_hard_limit(opts["tau"], opts["seed"], opts["trials"]),
               *checks.suite_gradients(opts["seed"]),
               checks.suite_vsl_identity(opts["tau"], opts["seed"])]
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "semsim": cmd_semsim,
    "train": cmd_train,
    "eval": cmd_eval,
    "rankcheck": cmd_rankcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"vsl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"vsl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
