"""``rankfid`` command line: synth, pairgen, train, eval, sessions, report.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import (RasterStore, SynthSpec, ValidationError, derive_seed, linear_rescale, load_manifest,
                   split_database, synth_database, write_database)
from .evaluation import MedianReport, UndefinedCorrelation, evaluate, run_sessions, write_report
from .losses import CLI_NAMES
from .pairgen import combine, load_training_set, sample_pairs, save_training_set
from .trainer import (CheckpointError, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train,
                      write_loss_csv)

log = logging.getLogger("rankfid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} {path}: line {exc.lineno}: {exc.msg}") from None


def _dataclass_from(cls, doc, what):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**doc)


def _manifest_paths(dirs):
    out = []
    for d in dirs:
        d = Path(d)
        if d.is_file():
            out.append(d)
        elif (d / "manifest.json").exists():
            out.append(d / "manifest.json")
        else:
            out.extend(sorted(d.glob("*/manifest.json")))
    if not out:
        raise ValidationError(f"no manifest.json found under {[str(d) for d in dirs]}")
    return out


def _load_data(dirs):
    manifests = [load_manifest(p) for p in _manifest_paths(dirs)]
    store = RasterStore()
    for m in manifests:
        store.add_manifest(m)
    return manifests, store


# ----------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    doc = _read_json(args.spec, "synth spec")
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = _dataclass_from(SynthSpec, doc, "synth spec")
    manifest, rasters = synth_database(spec)
    path = write_database(manifest, rasters, args.out)
    print(f"wrote {len(manifest.records)} records to {path}")


def cmd_pairgen(args):
    manifests = [load_manifest(p) for p in args.manifests]
    if len({m.database_id for m in manifests}) != len(manifests):
        raise ValidationError("duplicate database_id among manifests")
    per_db, splits = {}, {}
    for m in manifests:
        if args.no_split:
            train_ids, test_ids = m.ids(), []
        else:
            by_ref = m.scenario == "synthetic" and not args.random_split
            train_ids, test_ids = split_database(m, args.train_fraction, by_reference=by_ref, seed=args.seed)
        splits[m.database_id] = {"train": train_ids, "test": test_ids}
        per_db[m.database_id] = sample_pairs(m, train_ids, args.per_db, seed=derive_seed(args.seed, "pairgen"))
    ts = combine(per_db)
    save_training_set(ts, args.out)
    split_out = Path(args.split_out) if args.split_out else Path(args.out).with_name("split.json")
    split_out.write_text(json.dumps(splits, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(ts)} pairs to {args.out}; split to {split_out}")


def _train_config(args):
    doc = _read_json(args.config, "train config") if args.config else {}
    if args.loss is not None:
        doc["loss"] = CLI_NAMES[args.loss]
    if args.seed is not None:
        doc["seed"] = args.seed
    return TrainConfig.from_dict(doc)


def cmd_train(args):
    cfg = _train_config(args)
    ts = load_training_set(args.pairs)
    manifests, store = _load_data(args.data)
    known = {i for m in manifests for i in m.ids()}
    unknown = [i for p in ts.pairs for i in (p.x_id, p.y_id) if i not in known]
    if unknown:
        raise ValidationError(f"pairs reference images missing from --data: {unknown[:3]}")
    targets = None
    if cfg.loss == "mos_regression":
        targets = {r.image_id: linear_rescale(r.mos, m.range) for m in manifests for r in m.records}
    state, curve = train(ts, store, cfg, image_targets=targets)
    save_checkpoint(state, args.out)
    if args.log:
        write_loss_csv(curve, args.log)
    print(f"trained {len(curve)} iterations; final loss {curve[-1][3]:.5f}; checkpoint {args.out}")


def cmd_eval(args):
    manifest = load_manifest(args.manifest)
    store = RasterStore().add_manifest(manifest)
    split = _read_json(args.split, "split")
    if manifest.database_id not in split:
        raise ValidationError(f"split file has no entry for {manifest.database_id!r}")
    test_ids = split[manifest.database_id]["test"]
    state = load_checkpoint(args.ckpt)
    cell = {"database_id": manifest.database_id, "n_test": len(test_ids)}
    try:
        cell["srcc"] = evaluate(state.net, manifest, test_ids, store)
    except UndefinedCorrelation as exc:
        cell["srcc"] = None
        cell["error"] = str(exc)
    Path(args.out).write_text(json.dumps(cell, indent=1) + "\n", encoding="utf-8")
    print(json.dumps(cell))
    return 0 if cell["srcc"] is not None else 2


def load_bench(path, seed=None):
    """Bench spec: databases (SynthSpec dicts), pairs_per_db, train_fraction, train config, variants."""
    doc = _read_json(path, "bench spec")
    known = {"databases", "pairs_per_db", "train_fraction", "train", "variants", "seed", "sessions"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown bench spec keys: {sorted(unknown)}")
    master = doc.get("seed", 0) if seed is None else seed
    specs = []
    for d in doc.get("databases", []):
        d = dict(d)
        d.setdefault("seed", derive_seed(master, "synth", d.get("database_id", "synth")))
        specs.append(_dataclass_from(SynthSpec, d, "synth spec"))
    if not specs:
        raise ValidationError("bench spec needs at least one database")
    train_doc = dict(doc.get("train", {}))
    train_doc.setdefault("seed", master)
    cfg = TrainConfig.from_dict(train_doc)
    variants = doc.get("variants") or {cfg.loss: cfg.loss}
    for label, kind in variants.items():
        TrainConfig.from_dict({**cfg.to_dict(), "loss": CLI_NAMES.get(kind, kind)})
    variants = {label: CLI_NAMES.get(kind, kind) for label, kind in variants.items()}
    return {
        "specs": specs,
        "pairs_per_db": int(doc.get("pairs_per_db", 4000)),
        "train_fraction": float(doc.get("train_fraction", 0.8)),
        "config": cfg,
        "variants": variants,
        "seed": master,
        "sessions": doc.get("sessions"),
    }


def build_bench_data(specs):
    manifests, store = [], RasterStore()
    for spec in specs:
        m, rasters = synth_database(spec)
        manifests.append(m)
        for k, r in rasters.items():
            store[k] = r
    return manifests, store


def cmd_sessions(args):
    bench = load_bench(args.spec, args.seed)
    n = args.sessions or bench["sessions"] or 10
    manifests, store = build_bench_data(bench["specs"])
    seeds = [derive_seed(bench["seed"], "session", k) for k in range(n)]
    report = run_sessions(manifests, store, bench["config"], n, seeds=seeds, pairs_per_db=bench["pairs_per_db"],
                          train_fraction=bench["train_fraction"], variants=bench["variants"],
                          workers=max(1, args.threads))
    write_report(report, args.out)
    print(Path(args.out).with_suffix(".txt").read_text(encoding="utf-8"), end="")
    return 0 if not report.warnings else 2


def cmd_report(args):
    merged = None
    for path in args.inputs:
        rep = MedianReport.from_dict(_read_json(path, "report"))
        if merged is None:
            merged = rep
            continue
        if rep.databases != merged.databases:
            raise ValidationError(f"{path}: databases {rep.databases} differ from {merged.databases}")
        for label in rep.variants:
            if label in merged.variants:
                raise ValidationError(f"duplicate variant {label!r} in {path}")
            merged.variants[label] = rep.variants[label]
            merged.digests[label] = rep.digests.get(label, "")
            merged.kinds[label] = rep.kinds.get(label, label)
        merged.sessions += rep.sessions
        merged.warnings += rep.warnings
    write_report(merged, args.out)
    print(Path(args.out).with_suffix(".txt").read_text(encoding="utf-8"), end="")


# ----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="rankfid", description="Pairwise fidelity-loss training of a blind image-quality ranker.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for the sessions subcommand (default 1)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="fixed reduction order (default on; all kernels already reduce in a fixed order)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a synthetic rated database")
    s.add_argument("--spec", required=True, help="SynthSpec JSON file")
    s.add_argument("--out", required=True, help="output directory (manifest.json + rasters/)")
    s.add_argument("--seed", type=int, default=None, help="override the spec seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pairgen", help="sample annotated intra-database training pairs")
    s.add_argument("--manifests", nargs="+", required=True, help="manifest files")
    s.add_argument("--per-db", type=int, required=True, help="pairs per database (n_j)")
    s.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    s.add_argument("--out", required=True, help="pair list JSON")
    s.add_argument("--train-fraction", type=float, default=0.8, help="train split fraction (default 0.8)")
    s.add_argument("--split-out", default=None, help="split JSON (default: split.json next to --out)")
    s.add_argument("--random-split", action="store_true",
                   help="split synthetic databases by image instead of by reference (default off)")
    s.add_argument("--no-split", action="store_true", help="sample from all images (default off)")
    s.set_defaults(func=cmd_pairgen)

    s = sub.add_parser("train", help="train the quality network on a pair list")
    s.add_argument("--pairs", required=True, help="pair list JSON from pairgen")
    s.add_argument("--data", nargs="+", required=True, help="database directories or manifest files")
    s.add_argument("--config", default=None, help="TrainConfig JSON (defaults: 12 epochs, lr 1e-4, ...)")
    s.add_argument("--loss", choices=sorted(CLI_NAMES), default=None, help="override the config loss")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", default=None, help="per-iteration loss CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="SRCC of a checkpoint on one database's test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", required=True, help="split JSON from pairgen")
    s.add_argument("--out", required=True, help="result cell JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sessions", help="run the multi-session protocol on a synthetic bench spec")
    s.add_argument("--spec", required=True, help="bench spec JSON")
    s.add_argument("--sessions", type=int, default=None, help="number of sessions (default: spec value or 10)")
    s.add_argument("--seed", type=int, default=None, help="override the bench seed")
    s.add_argument("--out", required=True, help="report CSV (.txt and .json written alongside)")
    s.set_defaults(func=cmd_sessions)

    s = sub.add_parser("report", help="merge session reports into one table")
    s.add_argument("--in", dest="inputs", nargs="+", required=True, help="report JSON files")
    s.add_argument("--out", required=True, help="table CSV")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (ValidationError, CheckpointError, KeyError) as exc:
        print(f"rankfid {args.command}: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"rankfid {args.command}: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
