"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
DLIP_NUM_THREADS caps BLAS/OpenMP threads; it is applied before NumPy is
imported, so only stdlib imports are allowed at module level here.
"""

import argparse
import json
import os
import sys
from collections import Counter
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _configure_threads() -> None:
    cap = os.environ.get("DLIP_NUM_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ[var] = cap


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this project reserves 2 for data
    errors, so usage failures exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=96)


def _grid(text: str):
    try:
        h, _, w = text.partition("x")
        return (int(h), int(w))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dlip",
        description="Desk-scale dual-encoder contrastive training on multi-granularity captions.",
        formatter_class=_formatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser(
        "prepare",
        help="merge raw/long/short caption files into a dataset JSONL",
        formatter_class=_formatter,
    )
    p.add_argument("--raw", required=True, help="JSONL of {image_id, caption} raw alt-texts")
    p.add_argument("--long", required=True, nargs="+", metavar="FILE",
                   help="JSONL of {image_id, caption} long captions, one file per source")
    p.add_argument("--short", required=True, nargs="+", metavar="FILE",
                   help="JSONL of {image_id, caption} short captions, one file per source")
    p.add_argument("--sources", nargs="+", metavar="NAME",
                   help="source names (default: long file stems)")
    p.add_argument("--out", required=True, help="output dataset JSONL path")

    p = sub.add_parser(
        "gen-synthetic",
        help="generate the synthetic blob corpus",
        formatter_class=_formatter,
    )
    p.add_argument("--images", type=int, required=True, help="number of images")
    p.add_argument("--classes", type=int, default=8, help="number of blob colors (2-8)")
    p.add_argument("--grid", type=_grid, default=(4, 4), help="cell grid as HxW (default 4x4)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--cell-px", type=int, default=8, help="pixels per grid cell")
    p.add_argument("--min-blobs", type=int, default=1, help="minimum blobs per image")
    p.add_argument("--max-blobs", type=int, default=3, help="maximum blobs per image")
    p.add_argument("--train-fraction", type=float, default=0.8, help="train split fraction")
    p.add_argument("--raw-noise", type=float, default=0.15,
                   help="probability the raw caption names a wrong color")
    p.add_argument("--out", required=True, help="output corpus directory")

    p = sub.add_parser(
        "train",
        help="train on a prepared corpus directory",
        formatter_class=_formatter,
    )
    p.add_argument("--data", required=True, help="corpus directory (captions.jsonl, images/)")
    p.add_argument("--out", required=True, help="output directory for metrics and checkpoints")
    p.add_argument("--config", help="flat key=value run config file")
    p.add_argument("--resume", help="run.ckpt to resume from (its config wins)")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")

    p = sub.add_parser(
        "sweep",
        help="train once per sweep cell and tabulate retrieval",
        formatter_class=_formatter,
    )
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="base run config file")
    p.add_argument("--axis", choices=("k", "sigma"), default="k",
                   help="sweep K in 3..10 or sigma in {0, 0.1, 0.3, 0.5, 0.7}")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")

    p = sub.add_parser(
        "gradcheck",
        help="finite-difference check of analytic gradients",
        formatter_class=_formatter,
    )
    p.add_argument("--instances", type=int, default=20, help="random instances per loss")
    p.add_argument("--directions", type=int, default=32, help="random directions per instance")
    p.add_argument("--step-size", type=float, default=1e-5, help="central-difference h")
    p.add_argument("--seed", type=int, default=0, help="instance seed")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error to pass")
    p.add_argument("--skip-full-chain", action="store_true",
                   help="skip the params-to-loss whole-pipeline check")

    p = sub.add_parser(
        "eval",
        help="retrieval and zero-shot metrics for a trained checkpoint",
        formatter_class=_formatter,
    )
    p.add_argument("--weights", required=True, help="model .dlip file")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test", help="split name from split.json (default test)")
    p.add_argument("--queries", choices=("short", "raw", "long"), default="short",
                   help="caption field used as retrieval queries")
    p.add_argument("--out", help="optional eval report CSV path")

    p = sub.add_parser(
        "export-attn",
        help="export per-sub-caption patch attention grids as JSONL",
        formatter_class=_formatter,
    )
    p.add_argument("--weights", required=True, help="model .dlip file")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--image-id", required=True, help="image to export")
    p.add_argument("--sigma", type=float, default=0.0, help="sparsity threshold")
    p.add_argument("--out", required=True, help="output JSONL path")

    p = sub.add_parser(
        "stats",
        help="sub-caption and token count histogram of a dataset",
        formatter_class=_formatter,
    )
    p.add_argument("--data", required=True, help="dataset JSONL file or corpus directory")

    return parser


# ---- helpers ----

def _load_keyed_captions(path):
    from .errors import DataError

    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: bad JSON: {e}") from e
            if "image_id" not in obj or "caption" not in obj:
                raise DataError(f"{path}:{line_no}: need image_id and caption fields")
            out[obj["image_id"]] = obj["caption"]
    return out


def dataset_histogram(records):
    """Counter over (n_subcaptions, n_tokens) per record: candidate count of
    the full sub-caption set and total token count across its candidates."""
    from .captions import build_subcaption_set
    from .encoders import Tokenizer

    counter = Counter()
    for rec in records:
        sset = build_subcaption_set(rec)
        n_tokens = sum(len(Tokenizer.tokenize(text)) for text in sset.texts())
        counter[(len(sset.candidates), n_tokens)] += 1
    return counter


def _print_histogram(counter, out=None):
    out = out if out is not None else sys.stdout
    print("n_subcaptions,n_tokens,count", file=out)
    for (n_sub, n_tok), count in sorted(counter.items()):
        print(f"{n_sub},{n_tok},{count}", file=out)


# ---- subcommands ----

def _cmd_prepare(args) -> int:
    from .captions import CaptionRecord, save_dataset, split_sentences
    from .errors import DataError

    if len(args.long) != len(args.short):
        print("error: need as many --short files as --long files", file=sys.stderr)
        return 1
    sources = args.sources or [Path(p).stem for p in args.long]
    if len(sources) != len(args.long):
        print("error: --sources must name every long/short file pair", file=sys.stderr)
        return 1

    raw = _load_keyed_captions(args.raw)
    longs = [_load_keyed_captions(p) for p in args.long]
    shorts = [_load_keyed_captions(p) for p in args.short]

    missing = []
    for name, table in [("raw", raw)] + [
        (f"long[{i}]", t) for i, t in enumerate(longs)
    ] + [(f"short[{i}]", t) for i, t in enumerate(shorts)]:
        for image_id in raw:
            if image_id not in table:
                missing.append(f"{name}: {image_id}")
    for i, t in enumerate(longs + shorts):
        for image_id in t:
            if image_id not in raw:
                missing.append(f"raw: {image_id}")
    if missing:
        raise DataError(
            "caption files disagree on image ids; missing entries:\n  "
            + "\n  ".join(sorted(set(missing)))
        )

    records = []
    for image_id in sorted(raw):
        records.append(
            CaptionRecord(
                image_id=image_id,
                raw_caption=raw[image_id],
                short_captions=[t[image_id] for t in shorts],
                long_captions=[split_sentences(t[image_id]) for t in longs],
                sources=list(sources),
            )
        )
    save_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    _print_histogram(dataset_histogram(records))
    return 0


def _cmd_gen_synthetic(args) -> int:
    from .synthetic import GenConfig, generate_corpus

    try:
        cfg = GenConfig(
            n_images=args.images,
            n_classes=args.classes,
            grid=args.grid,
            seed=args.seed,
            cell_px=args.cell_px,
            min_blobs=args.min_blobs,
            max_blobs=args.max_blobs,
            train_fraction=args.train_fraction,
            raw_wrong_color_rate=args.raw_noise,
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    summary = generate_corpus(cfg, args.out)
    print(
        f"wrote {summary['n_images']} images "
        f"({summary['n_train']} train / {summary['n_test']} test) to {summary['out_dir']}"
    )
    return 0


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, load_config, run_training

    config = load_config(args.config) if args.config else TrainConfig()
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    summary = run_training(config, args.data, args.out, resume_from=args.resume, log_fn=log)
    print(f"finished {summary['steps']} steps; outputs in {summary['out_dir']}")
    return 0


_SWEEP_K = tuple(range(3, 11))
_SWEEP_SIGMA = (0.0, 0.1, 0.3, 0.5, 0.7)


def _cmd_sweep(args) -> int:
    import dataclasses

    from .encoders import load_weights
    from .evaluation import evaluate_corpus, RECALL_KS
    from .trainer import TrainConfig, load_config, run_training

    base = load_config(args.config) if args.config else TrainConfig()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = _SWEEP_K if args.axis == "k" else _SWEEP_SIGMA

    rows = []
    for value in cells:
        if args.axis == "k":
            config = dataclasses.replace(base, k_subcaptions=int(value))
            cell_dir = out_dir / f"k{value}"
        else:
            config = dataclasses.replace(base, sigma=float(value))
            cell_dir = out_dir / f"sigma{value:g}"
        if not args.quiet:
            print(f"sweep {args.axis}={value}", flush=True)
        run_training(config, args.data, cell_dir, log_fn=None)
        model, tokenizer = load_weights(cell_dir / "model.dlip")
        metrics = evaluate_corpus(model, tokenizer, args.data, split="test")
        mean_r1 = 0.5 * (metrics["t2i_r1"] + metrics["i2t_r1"])
        rows.append((value, metrics, mean_r1))

    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        ks = ",".join(f"t2i_r{k}" for k in RECALL_KS) + "," + ",".join(
            f"i2t_r{k}" for k in RECALL_KS
        )
        f.write(f"axis,value,{ks},mean_r1\n")
        for value, metrics, mean_r1 in rows:
            vals = [repr(float(metrics[f"t2i_r{k}"])) for k in RECALL_KS]
            vals += [repr(float(metrics[f"i2t_r{k}"])) for k in RECALL_KS]
            f.write(f"{args.axis},{value},{','.join(vals)},{repr(mean_r1)}\n")
    print(f"wrote {len(rows)} sweep rows to {csv_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .losses import run_gradient_checks
    from .trainer import full_chain_check

    suite = run_gradient_checks(
        instances=args.instances,
        directions=args.directions,
        h=args.step_size,
        seed=args.seed,
    )
    print(suite.text(args.tol))
    ok = suite.passed(args.tol)
    if not args.skip_full_chain:
        for depth, sigma in ((0, 0.0), (1, 0.3)):
            report = full_chain_check(h=args.step_size, seed=args.seed, sigma=sigma, depth=depth)
            print(report.text(args.tol))
            ok = ok and report.passed(args.tol)
    return 0 if ok else 3


def _cmd_eval(args) -> int:
    from .encoders import load_weights
    from .evaluation import evaluate_corpus, write_eval_report

    model, tokenizer = load_weights(args.weights)
    metrics = evaluate_corpus(model, tokenizer, args.data, split=args.split, queries=args.queries)
    for name, value in metrics.items():
        print(f"{name},{value}")
    if args.out:
        write_eval_report(args.out, metrics)
        print(f"wrote report to {args.out}")
    return 0


def _cmd_export_attn(args) -> int:
    from .captions import load_dataset
    from .encoders import load_image_tensor, load_weights
    from .errors import DataError
    from .evaluation import export_attention

    model, tokenizer = load_weights(args.weights)
    records = load_dataset(Path(args.data) / "captions.jsonl")
    record = next((r for r in records if r.image_id == args.image_id), None)
    if record is None:
        raise DataError(f"image id {args.image_id!r} not in {args.data}")
    subcaptions = [s for sentences in record.long_captions for s in sentences]
    if not subcaptions:
        subcaptions = [record.raw_caption]
    image = load_image_tensor(Path(args.data) / "images" / f"{record.image_id}.dlt")
    records_out = export_attention(
        model, tokenizer, image, subcaptions, args.sigma, args.out, image_id=record.image_id
    )
    print(f"wrote {len(records_out)} attention grids to {args.out}")
    return 0


def _cmd_stats(args) -> int:
    from .captions import load_dataset

    path = Path(args.data)
    if path.is_dir():
        path = path / "captions.jsonl"
    records = load_dataset(path)
    print(f"records: {len(records)}")
    _print_histogram(dataset_histogram(records))
    return 0


_HANDLERS = {
    "prepare": _cmd_prepare,
    "gen-synthetic": _cmd_gen_synthetic,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "eval": _cmd_eval,
    "export-attn": _cmd_export_attn,
    "stats": _cmd_stats,
}


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import DataError, NumericError

    try:
        return _HANDLERS[args.command](args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
