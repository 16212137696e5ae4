"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error (missing/invalid input
files, checkpoints that do not fit), 3 a check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, datagen, evaluation, gradcheck, imaging, training
from .config import OUTPUT_ENV, RunConfig, default_output_dir, parse_pairs

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("ssmn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(flag: str, text: str, n: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{flag}: expected {n} values, got {len(vals)}")
    return vals


def _ints(flag: str, text: str, minimum: int = 1) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if min(vals) < minimum:
        raise UsageError(f"{flag}: values must be >= {minimum}")
    return vals


def build_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        values.update(parse_pairs(path.read_text(), str(path)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set: expected KEY=VALUE, got {item!r}")
        try:
            values.update(parse_pairs(item.replace("=", " = ", 1), "--set"))
        except ValueError as e:
            raise UsageError(str(e)) from None
    for key in ("seed", "workers"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "data", None):
        values["data_dir"] = args.data
    if getattr(args, "out", None):
        values["output_dir"] = args.out
    if getattr(args, "disable_fgc", False):
        values["use_fgc"] = False
    if getattr(args, "disable_fp", False):
        values["use_fp"] = False
    if getattr(args, "raw_patches", False):
        values["use_dt"] = False
    try:
        return RunConfig(**values)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_dataset(cfg: RunConfig) -> datagen.Dataset:
    return datagen.load_dataset(cfg.data_dir)


def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    fractions = _floats("--split", args.split, 3)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"--split: fractions must be non-negative and sum to 1, got {args.split}")
    if args.categories < 1:
        raise UsageError("--categories must be >= 1")
    if args.per_category < 2:
        raise UsageError("--per-category must be >= 2 (pairs need two images)")
    if not 2 <= args.parts <= 12:
        raise UsageError("--parts must lie in [2, 12]")
    ranges = datagen.TransformRanges(rotation_deg=args.rotation, flip_prob=args.flip, jitter=args.jitter)
    out = Path(args.data_out) if args.data_out else Path(default_output_dir()) / "data"
    ds = datagen.build_dataset(out, args.categories, args.per_category, args.parts, fractions, args.seed, ranges)
    counts = {s: len(ds.pairs[s]) for s in datagen.SPLITS}
    print(f"wrote {len(ds.images)} images to {out}; pairs " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    ds = _load_dataset(cfg)
    out = _out_dir(cfg)
    training.pretrain(ds, cfg, out)
    cfg.save(out / "pretrain.cfg")
    print(f"wrote {out / 'pretrain.ckpt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    init = checkpoint.load(args.init)
    # architecture keys come from the pre-trained checkpoint unless overridden explicitly
    cfg = cfg.replace(**{k: getattr(init.config, k) for k in RunConfig.ARCH_KEYS
                         if not _explicit(args, k)})
    ds = _load_dataset(cfg)
    out = _out_dir(cfg)
    name = args.name or ("ssmn" if cfg.use_fgc else "ssmn_nofgc")
    training.finetune(ds, cfg, init, out, name)
    print(f"wrote {out / (name + '.ckpt')}")
    return EXIT_OK


def _explicit(args, key: str) -> bool:
    return any(item.split("=", 1)[0].strip() == key for item in (getattr(args, "set", None) or []))


def cmd_baseline(args) -> int:
    cfg = build_config(args)
    ds = _load_dataset(cfg)
    out = _out_dir(cfg)
    training.train_matching_network(ds, cfg, out)
    print(f"wrote {out / 'mn.ckpt'}")
    return EXIT_OK


def _maybe_load(path):
    return checkpoint.load(path) if path else None


def evaluate_all(cfg: RunConfig, examples, ckpts: dict, hungarian: bool = False, oracle: bool = False,
                 sink: evaluation.SearchLog | None = None, keep_trace: bool = False) -> list:
    """Rows for every method whose inputs are available, in report order."""
    seed, beam, order = cfg.seed, cfg.eval_beam, cfg.target_order
    rows = []

    def add(method, predict):
        rows.append(evaluation.run(method, predict, examples, cfg.workers))

    add("Random", evaluation.random_predictor(seed))
    add("NN-RGB", evaluation.nn_rgb_predictor(hungarian))
    add("Affine", evaluation.affine_predictor(seed, beam, order))
    if ckpts.get("mn"):
        add("MN", evaluation.mn_predictor(ckpts["mn"].params, seed, False))
        add("MN+Hungarian", evaluation.mn_predictor(ckpts["mn"].params, seed, True))
    if ckpts.get("amn"):
        add("AMN+NN", evaluation.amn_nn_predictor(ckpts["amn"].params, hungarian))
    if ckpts.get("nofgc"):
        add("SSMN-f_gc", evaluation.ssmn_predictor(ckpts["nofgc"].params, seed, beam, order))
    if ckpts.get("ssmn") or oracle:
        params = ckpts["ssmn"].params if ckpts.get("ssmn") else None
        add("SSMN", evaluation.ssmn_predictor(params, seed, beam, order, oracle, sink, keep_trace))
    return rows


def _eval_examples(cfg: RunConfig, split: str):
    ds = _load_dataset(cfg)
    if split not in datagen.SPLITS:
        raise UsageError(f"--split must be one of {', '.join(datagen.SPLITS)}")
    return training.dataset_examples(ds, cfg, (split,))[split]


def cmd_eval(args) -> int:
    cfg = build_config(args)
    if args.beam is not None:
        cfg = cfg.replace(eval_beam=args.beam)
    if args.target_order:
        cfg = cfg.replace(target_order=args.target_order)
    ckpts = {"ssmn": _maybe_load(args.ssmn), "nofgc": _maybe_load(args.ssmn_nofgc),
             "mn": _maybe_load(args.mn), "amn": _maybe_load(args.amn)}
    loaded = [c for c in ckpts.values() if c is not None]
    if not loaded and not args.oracle:
        raise UsageError("eval needs at least one checkpoint (--ssmn, --ssmn-nofgc, --mn, --amn) or --oracle")
    for c in loaded:
        if c.config.arch_hash() != loaded[0].config.arch_hash():
            raise checkpoint.CheckpointError("checkpoints were trained with different preprocessing/architecture")
    if loaded:
        cfg = cfg.replace(**{k: getattr(loaded[0].config, k) for k in RunConfig.ARCH_KEYS})
    examples = _eval_examples(cfg, args.split)
    out = _out_dir(cfg)
    if args.beam_sweep:
        if ckpts["ssmn"] is None:
            raise UsageError("--beam-sweep needs --ssmn")
        rows = evaluation.beam_sweep(ckpts["ssmn"].params, examples, _ints("--beam-sweep", args.beam_sweep),
                                     cfg.seed, cfg.target_order)
        text = evaluation.sweep_tsv(rows)
        (out / "beam_sweep.tsv").write_text(text)
        print(evaluation.aligned([line.split("\t") for line in text.splitlines()]), end="")
        return EXIT_OK
    sink = evaluation.SearchLog([], []) if (args.trace or args.factor_dump) else None
    results = evaluate_all(cfg, examples, ckpts, args.hungarian, args.oracle, sink, bool(args.trace))
    (out / "report.tsv").write_text(evaluation.report_tsv(results))
    (out / "report_by_category.tsv").write_text(evaluation.category_tsv(results))
    if args.trace:
        Path(args.trace).write_text(evaluation.trace_jsonl(sink.traces))
    if args.factor_dump:
        Path(args.factor_dump).write_text(evaluation.factor_tsv(sink.factors))
    print(evaluation.report_text(results), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    """Full protocol per seed: data, both training phases, the ablation, the
    baseline, evaluation; then the mean over seeds."""
    seeds = _ints("--seeds", args.seeds, minimum=0)
    base = build_config(args)
    root = Path(base.output_dir)
    per_seed = []
    for seed in seeds:
        cfg = base.replace(seed=seed, output_dir=str(root / f"seed{seed}"), data_dir=str(root / f"seed{seed}" / "data"))
        out = _out_dir(cfg)
        ranges = datagen.TransformRanges(rotation_deg=args.rotation, flip_prob=args.flip)
        ds = datagen.build_dataset(cfg.data_dir, args.categories, args.per_category, args.parts,
                                   _floats("--split", args.split, 3), seed, ranges)
        examples = training.dataset_examples(ds, cfg)
        amn = training.pretrain(ds, cfg, out, examples)
        ssmn = training.finetune(ds, cfg, amn, out, "ssmn", examples)
        nofgc = training.finetune(ds, cfg.replace(use_fgc=False), amn, out, "ssmn_nofgc", examples)
        mn = training.train_matching_network(ds, cfg, out, examples)
        cfg.save(out / "run.cfg")
        results = evaluate_all(cfg, examples["test"], {"ssmn": ssmn, "nofgc": nofgc, "mn": mn, "amn": amn})
        (out / "report.tsv").write_text(evaluation.report_tsv(results))
        (out / "report_by_category.tsv").write_text(evaluation.category_tsv(results))
        print(f"seed {seed}\n" + evaluation.report_text(results), end="")
        per_seed.append({r.method: r.accuracy for r in results})
    methods = list(per_seed[0])
    lines = ["method\tmean_accuracy\t" + "\t".join(f"seed{s}" for s in seeds)]
    for m in methods:
        vals = [p[m] for p in per_seed]
        lines.append(f"{m}\t{np.mean(vals):.2f}\t" + "\t".join(f"{v:.1f}" for v in vals))
    text = "\n".join(lines) + "\n"
    (root / "bench.tsv").write_text(text)
    print("mean over seeds\n" + evaluation.aligned([ln.split("\t") for ln in text.splitlines()]), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_suite(args.seed or 0, args.max_coords, corrupt=args.corrupt)
    rows = [("group", "max_rel_error", "checked", "skipped_kinks", "status")]
    rows += [(r.group, f"{r.max_rel_error:.3e}", str(r.checked), str(r.skipped), "pass" if r.passed else "FAIL")
             for r in reports]
    print(evaluation.aligned(rows), end="")
    failed = [r.group for r in reports if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_dump_dt(args) -> int:
    img = imaging.read_pgm(args.image)
    dt = imaging.distance_transform(imaging.binarize(img, args.ink_threshold), args.clip)
    imaging.write_pgm(args.output, dt)
    print(f"wrote {args.output}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def _common(p, data=True):
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--workers", type=int, help="parallel evaluation workers")
    if data:
        p.add_argument("--data", help="dataset directory containing manifest.jsonl")


def _dataset_flags(p):
    p.add_argument("--categories", type=int, default=50)
    p.add_argument("--per-category", type=int, default=5)
    p.add_argument("--parts", type=int, default=10)
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test category fractions")
    p.add_argument("--rotation", type=float, default=30.0, help="max rotation in degrees")
    p.add_argument("--flip", type=float, default=0.2, help="horizontal flip probability")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssmn", description="Structured set matching: data, training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out", dest="data_out", help=f"dataset directory (default ${OUTPUT_ENV}/data)")
    p.add_argument("--seed", type=int, default=0)
    _dataset_flags(p)
    p.add_argument("--jitter", type=float, default=0.01, help="per-anchor position noise")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="phase 1: surrogate pre-training")
    _common(p)
    p.add_argument("--raw-patches", action="store_true", help="feed grayscale patches instead of DT")
    p.add_argument("--disable-fp", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="phase 2: conv-frozen search-based training")
    _common(p)
    p.add_argument("--init", required=True, help="phase-1 checkpoint")
    p.add_argument("--disable-fgc", action="store_true", help="drop the global consistency factors")
    p.add_argument("--disable-fp", action="store_true", help="drop the part-name factor")
    p.add_argument("--name", help="checkpoint basename")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="train a learned baseline")
    _common(p)
    p.add_argument("--method", choices=["mn"], required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="accuracy report on a split")
    _common(p)
    p.add_argument("--ssmn", help="SSMN checkpoint")
    p.add_argument("--ssmn-nofgc", help="checkpoint trained with --disable-fgc")
    p.add_argument("--mn", help="matching-network checkpoint")
    p.add_argument("--amn", help="phase-1 checkpoint (AMN+NN row)")
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int)
    p.add_argument("--beam-sweep", help="comma-separated beam widths, e.g. 1,5,10,50,100,200")
    p.add_argument("--target-order", choices=["shuffle", "fixed"])
    p.add_argument("--hungarian", action="store_true", help="one-to-one post-processing for NN baselines")
    p.add_argument("--trace", help="write beam traces (JSON lines)")
    p.add_argument("--factor-dump", help="write per-pair factor breakdown (TSV)")
    p.add_argument("--oracle", action="store_true", help="score SSMN with gold local scores")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="full benchmark over several seeds")
    _common(p, data=False)
    _dataset_flags(p)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=40, help="sampled coordinates per tensor")
    p.add_argument("--corrupt", choices=gradcheck.GROUPS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-dt", help="write the distance transform of a PGM")
    p.add_argument("image")
    p.add_argument("output")
    p.add_argument("--ink-threshold", type=float, default=0.98)
    p.add_argument("--clip", type=float, default=0.2)
    p.set_defaults(func=cmd_dump_dt)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"ssmn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (datagen.DataError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"ssmn {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
