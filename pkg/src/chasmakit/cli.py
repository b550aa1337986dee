"""Command-line entry point.

Subcommands cover the full pipeline: store inspection, misalignment
generation, dataset dedup/balance/aggregation, benchmark expansion and
validation, synthetic corpora, training, grid search, evaluation, and
the bias audit. Every run writes a RunManifest JSON next to its primary
output recording the command, resolved configuration, seeds, input
hashes, and tool version; reruns with an identical manifest (timestamps
aside) produce byte-identical outputs.

Configuration precedence: command-line flags > ``--config`` JSON file >
built-in defaults. Exit codes: 0 success, 1 validation or runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import benchmark as bench_mod
from . import chasma, metrics, synthkit, trainer
from .detector import MODES, DetectorConfig, load_params, save_params
from .embstore import open_store, validate_store, write_store
from .features import materialize


class CliError(Exception):
    """Fatal runtime error reported to stderr with exit code 1."""


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _require(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"input file not found: {p}")
    return p


class Run:
    """Collects inputs/outputs and writes the manifest beside the output."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self.argv = list(getattr(args, "_argv", sys.argv[1:]))
        self.config = config
        self.inputs: dict[str, str] = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def input(self, path: str | Path) -> Path:
        p = _require(path)
        self.inputs[str(p)] = _sha256(p)
        return p

    def write_manifest(self, primary_output: str | Path, is_dir: bool = False):
        out = Path(primary_output)
        target = out / "manifest.json" if is_dir else Path(str(out) + ".manifest.json")
        manifest = {
            "command": self.argv,
            "config": self.config,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "inputs": self.inputs,
            "seeds": _collect_seeds(self.config),
            "started_at": self.started,
            "version": __version__,
        }
        with open(target, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _collect_seeds(config: dict, prefix: str = "") -> dict:
    """Every ``seed`` entry in the resolved config, flattened by path."""
    seeds: dict[str, int] = {}
    for key, value in config.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            seeds.update(_collect_seeds(value, f"{path}."))
        elif key == "seed":
            seeds[path] = value
    return seeds


def _resolve(args: argparse.Namespace, file_config: dict, key: str, default):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in file_config:
        return file_config[key]
    return default


def _load_file_config(args) -> dict:
    path = getattr(args, "config", None)
    if path is None:
        return {}
    with open(_require(path)) as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return config


def _json_dump(payload: dict, path: str | Path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _open_stores(run: Run, paths: list[str]):
    return [open_store(run.input(p)) for p in paths]


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_store_validate(args) -> int:
    cfg = _load_file_config(args)
    run = Run(args, {"store": args.store})
    store = open_store(run.input(args.store))
    report = validate_store(store)
    out = _resolve(args, cfg, "out", None)
    if out:
        _json_dump(report.to_dict(), out)
        run.write_manifest(out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0 if report.ok else 1


def cmd_store_info(args) -> int:
    run = Run(args, {"store": args.store})
    store = open_store(run.input(args.store))
    info = {
        "count": store.count,
        "dim": store.dim,
        "modality": store.modality,
        "path": str(args.store),
    }
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_chasma_generate(args) -> int:
    cfg = _load_file_config(args)
    seed = _resolve(args, cfg, "seed", 0)
    threshold = _resolve(args, cfg, "threshold", 0.5)
    workers = _resolve(args, cfg, "workers", 1)
    run = Run(args, {"seed": seed, "threshold": threshold, "workers": workers})

    pairs = chasma.read_pairs_csv(run.input(args.pairs))
    image_store, = _open_stores(run, [args.images])
    text_store, = _open_stores(run, [args.texts])
    pool = chasma.CaptionPool.from_store(open_store(run.input(args.pool)))

    fn = chasma.misalign_bruteforce if args.oracle else chasma.misalign
    kwargs = {} if args.oracle else {"workers": workers}
    assignments = fn(pairs, image_store, text_store, pool,
                     seed=seed, threshold=threshold, **kwargs)
    chasma.write_assignments_csv(assignments, args.out)
    if args.dataset_out:
        dataset = chasma.build_mc_dataset(pairs, assignments)
        chasma.write_dataset_csv(dataset, args.dataset_out)
    run.write_manifest(args.out)
    return 0


def cmd_chasma_dedup(args) -> int:
    run = Run(args, {})
    pairs = chasma.read_pairs_csv(run.input(args.pairs))
    assignments = chasma.read_assignments_csv(run.input(args.assignments))
    dataset = chasma.build_mc_dataset(pairs, assignments)
    dataset = chasma.deduplicate_false_captions(dataset)
    chasma.write_dataset_csv(dataset, args.out)
    run.write_manifest(args.out)
    return 0


def cmd_chasma_balance(args) -> int:
    cfg = _load_file_config(args)
    seed = _resolve(args, cfg, "seed", 0)
    run = Run(args, {"seed": seed})
    dataset = chasma.read_dataset_csv(run.input(args.data), split=args.split)
    dataset = chasma.downsample_balance(dataset, seed)
    chasma.write_dataset_csv(dataset, args.out)
    run.write_manifest(args.out)
    return 0


def cmd_chasma_aggregate(args) -> int:
    cfg = _load_file_config(args)
    seed = _resolve(args, cfg, "seed", 0)
    multiclass = bool(args.multiclass or cfg.get("multiclass", False))
    run = Run(args, {"multiclass": multiclass, "seed": seed})
    datasets = [
        chasma.read_dataset_csv(run.input(p), split=args.split) for p in args.data
    ]
    combined = chasma.aggregate(datasets, seed, multiclass=multiclass)
    chasma.write_dataset_csv(combined, args.out)
    run.write_manifest(args.out)
    return 0


def cmd_bench_expand(args) -> int:
    run = Run(args, {"source": args.source})
    trios = bench_mod.read_trios_csv(run.input(args.trios))
    dataset = bench_mod.expand_trios(trios, source=args.source)
    chasma.write_dataset_csv(dataset, args.out)
    run.write_manifest(args.out)
    return 0


def cmd_bench_validate(args) -> int:
    run = Run(args, {})
    dataset = chasma.read_dataset_csv(run.input(args.data), split="test")
    report = bench_mod.validate_modality_balance(dataset)
    if args.out:
        _json_dump(report.to_dict(), args.out)
        run.write_manifest(args.out)
    print(json.dumps({"ok": report.ok, "violations": report.violations}, sort_keys=True))
    return 0 if report.ok else 1


def cmd_bench_binarize(args) -> int:
    run = Run(args, {"mode": args.mode})
    dataset = chasma.read_dataset_csv(run.input(args.data), split="test")
    derived = bench_mod.derive_binary(dataset, args.mode)
    chasma.write_dataset_csv(derived, args.out)
    run.write_manifest(args.out)
    return 0


def cmd_synth_corpus(args) -> int:
    cfg = _load_file_config(args)
    config = synthkit.SynthConfig(
        dim=_resolve(args, cfg, "dim", 32),
        n_pairs=_resolve(args, cfg, "pairs", 1000),
        signal_mode=_resolve(args, cfg, "mode", "crossmodal_only"),
        signal_strength=_resolve(args, cfg, "strength", 1.0),
        seed=_resolve(args, cfg, "seed", 0),
        pool_size=_resolve(args, cfg, "pool_size", None),
    )
    run = Run(args, asdict(config))
    corpus = synthkit.generate_corpus(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_store(
        zip(corpus.image_store.ids, corpus.image_store.vectors),
        config.dim, "image", out_dir / "images.embs",
    )
    write_store(
        zip(corpus.text_store.ids, corpus.text_store.vectors),
        config.dim, "text", out_dir / "texts.embs",
    )
    write_store(
        zip(corpus.pool_store.ids, corpus.pool_store.vectors),
        config.dim, "text", out_dir / "pool.embs",
    )
    chasma.write_pairs_csv(corpus.pairs, out_dir / "pairs.csv")
    run.write_manifest(out_dir, is_dir=True)
    return 0


def cmd_synth_bench(args) -> int:
    cfg = _load_file_config(args)
    config = synthkit.SynthConfig(
        dim=_resolve(args, cfg, "dim", 32),
        n_pairs=_resolve(args, cfg, "trios", 338),
        signal_strength=_resolve(args, cfg, "strength", 1.0),
        seed=_resolve(args, cfg, "seed", 0),
    )
    missing = _resolve(args, cfg, "missing_ooc_fraction", 0.0)
    run = Run(args, {**asdict(config), "missing_ooc_fraction": missing})
    result = synthkit.generate_balanced_benchmark(config, missing_ooc_fraction=missing)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench_mod.write_trios_csv(result.trios, out_dir / "trios.csv")
    write_store(
        zip(result.image_store.ids, result.image_store.vectors),
        config.dim, "image", out_dir / "images.embs",
    )
    write_store(
        zip(result.text_store.ids, result.text_store.vectors),
        config.dim, "text", out_dir / "texts.embs",
    )
    run.write_manifest(out_dir, is_dir=True)
    return 0


def _train_setup(args, run: Run, cfg: dict):
    images = _open_stores(run, args.images)
    texts = _open_stores(run, args.texts)
    data = chasma.read_dataset_csv(run.input(args.data), split="train")
    seed = _resolve(args, cfg, "seed", 0)
    if args.val:
        val = chasma.read_dataset_csv(run.input(args.val), split="validation")
        train_ds = data
    else:
        fraction = _resolve(args, cfg, "val_fraction", 0.10)
        train_ds, val = trainer.split_train_val(data, fraction, seed)
    return (
        materialize(train_ds, images, texts),
        materialize(val, images, texts),
        seed,
    )


def _train_config(args, cfg: dict, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=_resolve(args, cfg, "lr", 5e-5),
        batch_size=_resolve(args, cfg, "batch_size", 512),
        max_epochs=_resolve(args, cfg, "max_epochs", 30),
        patience_epochs=_resolve(args, cfg, "patience", 10),
        seed=seed,
    )


def cmd_train(args) -> int:
    cfg = _load_file_config(args)
    detector_config = DetectorConfig(
        mode=args.mode,
        n=_resolve(args, cfg, "classes", 3),
        m=_resolve(args, cfg, "m", 768),
        L=_resolve(args, cfg, "layers", 1),
        h=_resolve(args, cfg, "heads", 2),
        f=_resolve(args, cfg, "ffn", 128),
        dropout=_resolve(args, cfg, "dropout", 0.1),
    )
    run = Run(args, {"detector": asdict(detector_config)})
    train_set, val_set, seed = _train_setup(args, run, cfg)
    train_cfg = _train_config(args, cfg, seed)
    run.config["train"] = asdict(train_cfg)

    params, report = trainer.train(train_set, val_set, detector_config, train_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, detector_config, out_dir / "best.dpar")
    _json_dump(report.to_dict(), out_dir / "report.json")
    run.write_manifest(out_dir, is_dir=True)
    return 0


def cmd_grid(args) -> int:
    cfg = _load_file_config(args)
    base = DetectorConfig(
        mode=args.mode,
        n=_resolve(args, cfg, "classes", 3),
        m=_resolve(args, cfg, "m", 768),
        dropout=_resolve(args, cfg, "dropout", 0.1),
    )
    grid = {
        "L": _resolve(args, cfg, "layers", [1, 4]),
        "f": _resolve(args, cfg, "ffn", [128, 1024]),
        "h": _resolve(args, cfg, "heads", [2, 8]),
    }
    lr_grid = _resolve(args, cfg, "lr_grid", None)
    if lr_grid:
        grid["lr"] = lr_grid
    run = Run(args, {"detector": asdict(base), "grid": grid})
    train_set, val_set, seed = _train_setup(args, run, cfg)
    train_cfg = _train_config(args, cfg, seed)
    run.config["train"] = asdict(train_cfg)

    params, config, report, reports = trainer.grid_search(
        train_set, val_set, base, grid, train_cfg
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, config, out_dir / "best.dpar")
    _json_dump(report.to_dict(), out_dir / "report.json")
    _json_dump({"runs": [r.to_dict() for r in reports]}, out_dir / "grid.json")
    run.write_manifest(out_dir, is_dir=True)
    return 0


def cmd_evaluate(args) -> int:
    run = Run(args, {})
    params, config = load_params(run.input(args.checkpoint))
    images = _open_stores(run, args.images)
    texts = _open_stores(run, args.texts)
    dataset = chasma.read_dataset_csv(run.input(args.data), split="test")
    data = materialize(dataset, images, texts)
    report = metrics.evaluate(params, config, data)
    _json_dump(report.to_dict(), args.out)
    run.write_manifest(args.out)
    print(json.dumps({"overall_accuracy": report.overall_accuracy}))
    return 0


def cmd_audit(args) -> int:
    run = Run(args, {})
    table = metrics.read_accuracy_table(run.input(args.table))
    report = metrics.audit(table)
    _json_dump(report.to_dict(), args.out)
    if args.csv:
        metrics.write_audit_csv(report, args.csv)
    run.write_manifest(args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_config_flag(p):
    p.add_argument("--config", help="JSON config file (flags override it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chasmakit",
        description="Crossmodal misalignment data, balanced benchmarks, "
        "detector training, and unimodal-bias audits.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    store = sub.add_parser("store", help="inspect and validate embedding stores")
    store_sub = store.add_subparsers(dest="subcommand", required=True)
    sv = store_sub.add_parser("validate", help="check store invariants")
    sv.add_argument("--store", required=True)
    sv.add_argument("--out", help="write the JSON report here")
    _add_config_flag(sv)
    sv.set_defaults(fn=cmd_store_validate)
    si = store_sub.add_parser("info", help="print store header fields")
    si.add_argument("--store", required=True)
    si.set_defaults(fn=cmd_store_info)

    ch = sub.add_parser("chasma", help="misalignment generation and dataset ops")
    ch_sub = ch.add_subparsers(dest="subcommand", required=True)
    cg = ch_sub.add_parser("generate", help="retrieve hard misleading captions")
    cg.add_argument("--pairs", required=True)
    cg.add_argument("--images", required=True)
    cg.add_argument("--texts", required=True)
    cg.add_argument("--pool", required=True)
    cg.add_argument("--out", required=True)
    cg.add_argument("--dataset-out", help="also write the paired True/MC dataset")
    cg.add_argument("--seed", type=int)
    cg.add_argument("--threshold", type=float)
    cg.add_argument("--workers", type=int)
    cg.add_argument("--oracle", action="store_true",
                    help="use the brute-force reference scan")
    _add_config_flag(cg)
    cg.set_defaults(fn=cmd_chasma_generate)
    cd = ch_sub.add_parser("dedup", help="drop duplicate false captions")
    cd.add_argument("--pairs", required=True)
    cd.add_argument("--assignments", required=True)
    cd.add_argument("--out", required=True)
    _add_config_flag(cd)
    cd.set_defaults(fn=cmd_chasma_dedup)
    cb = ch_sub.add_parser("balance", help="seeded class down-sampling")
    cb.add_argument("--data", required=True)
    cb.add_argument("--out", required=True)
    cb.add_argument("--seed", type=int)
    cb.add_argument("--split", default="train", choices=chasma.Dataset.SPLITS)
    _add_config_flag(cb)
    cb.set_defaults(fn=cmd_chasma_balance)
    ca = ch_sub.add_parser("aggregate", help="combine datasets and rebalance")
    ca.add_argument("--data", required=True, action="append")
    ca.add_argument("--out", required=True)
    ca.add_argument("--seed", type=int)
    ca.add_argument("--multiclass", action="store_true")
    ca.add_argument("--split", default="train", choices=chasma.Dataset.SPLITS)
    _add_config_flag(ca)
    ca.set_defaults(fn=cmd_chasma_aggregate)

    be = sub.add_parser("bench", help="benchmark expansion and validation")
    be_sub = be.add_subparsers(dest="subcommand", required=True)
    bx = be_sub.add_parser("expand", help="trios to a three-class test set")
    bx.add_argument("--trios", required=True)
    bx.add_argument("--out", required=True)
    bx.add_argument("--source", default="benchmark")
    _add_config_flag(bx)
    bx.set_defaults(fn=cmd_bench_expand)
    bv = be_sub.add_parser("validate", help="check modality balance")
    bv.add_argument("--data", required=True)
    bv.add_argument("--out")
    _add_config_flag(bv)
    bv.set_defaults(fn=cmd_bench_validate)
    bb = be_sub.add_parser("binarize", help="derive a binary evaluation view")
    bb.add_argument("--data", required=True)
    bb.add_argument("--mode", required=True, choices=bench_mod.BINARY_MODES)
    bb.add_argument("--out", required=True)
    _add_config_flag(bb)
    bb.set_defaults(fn=cmd_bench_binarize)

    sy = sub.add_parser("synth", help="seeded synthetic fixtures")
    sy_sub = sy.add_subparsers(dest="subcommand", required=True)
    sc = sy_sub.add_parser("corpus", help="corpus with controllable signal")
    sc.add_argument("--out-dir", required=True)
    sc.add_argument("--dim", type=int)
    sc.add_argument("--pairs", type=int)
    sc.add_argument("--mode", choices=synthkit.SIGNAL_MODES)
    sc.add_argument("--strength", type=float)
    sc.add_argument("--pool-size", type=int)
    sc.add_argument("--seed", type=int)
    _add_config_flag(sc)
    sc.set_defaults(fn=cmd_synth_corpus)
    sb = sy_sub.add_parser("bench", help="modality-balanced benchmark fixture")
    sb.add_argument("--out-dir", required=True)
    sb.add_argument("--dim", type=int)
    sb.add_argument("--trios", type=int)
    sb.add_argument("--missing-ooc-fraction", type=float)
    sb.add_argument("--strength", type=float)
    sb.add_argument("--seed", type=int)
    _add_config_flag(sb)
    sb.set_defaults(fn=cmd_synth_bench)

    tr = sub.add_parser("train", help="train one detector")
    for p in (tr,):
        p.add_argument("--data", required=True)
        p.add_argument("--val")
        p.add_argument("--images", required=True, action="append")
        p.add_argument("--texts", required=True, action="append")
        p.add_argument("--mode", required=True, choices=MODES)
        p.add_argument("--classes", type=int, choices=(1, 3))
        p.add_argument("--m", type=int)
        p.add_argument("--dropout", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--val-fraction", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", required=True)
        _add_config_flag(p)
    tr.add_argument("--layers", type=int)
    tr.add_argument("--heads", type=int)
    tr.add_argument("--ffn", type=int)
    tr.set_defaults(fn=cmd_train)

    gr = sub.add_parser("grid", help="hyperparameter grid search")
    gr.add_argument("--data", required=True)
    gr.add_argument("--val")
    gr.add_argument("--images", required=True, action="append")
    gr.add_argument("--texts", required=True, action="append")
    gr.add_argument("--mode", required=True, choices=MODES)
    gr.add_argument("--classes", type=int, choices=(1, 3))
    gr.add_argument("--m", type=int)
    gr.add_argument("--dropout", type=float)
    gr.add_argument("--layers", type=int, nargs="+")
    gr.add_argument("--heads", type=int, nargs="+")
    gr.add_argument("--ffn", type=int, nargs="+")
    gr.add_argument("--lr-grid", type=float, nargs="+")
    gr.add_argument("--lr", type=float)
    gr.add_argument("--batch-size", type=int)
    gr.add_argument("--max-epochs", type=int)
    gr.add_argument("--patience", type=int)
    gr.add_argument("--val-fraction", type=float)
    gr.add_argument("--seed", type=int)
    gr.add_argument("--out-dir", required=True)
    _add_config_flag(gr)
    gr.set_defaults(fn=cmd_grid)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--images", required=True, action="append")
    ev.add_argument("--texts", required=True, action="append")
    ev.add_argument("--out", required=True)
    _add_config_flag(ev)
    ev.set_defaults(fn=cmd_evaluate)

    au = sub.add_parser("audit", help="unimodal-bias audit of an accuracy table")
    au.add_argument("--table", required=True)
    au.add_argument("--out", required=True)
    au.add_argument("--csv", help="also write the audit rows as CSV")
    _add_config_flag(au)
    au.set_defaults(fn=cmd_audit)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        return args.fn(args)
    except (CliError, OSError, ValueError, KeyError) as exc:
        message = exc.args[0] if exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
