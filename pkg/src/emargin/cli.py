"""Command-line entry point: ``emargin {synth,preprocess,pretrain,eval,compare}``.

Layout under ``--out``::

    data/train.emsb, data/test.emsb, data/manifest.json
    runs/<loss>-seed<seed>/checkpoint.emgn, loss_trace.csv, report-<assignment>.json
    compare.md

Exit codes: 0 success, 1 data error, 2 config/usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from .encoder import EncoderConfig, embed, init_params
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    NumericError,
)
from .evaluation import (
    METRIC_FIELDS,
    ProbeConfig,
    evaluate_embeddings,
    export_embeddings,
    subset_counts,
)
from .loss import LossConfig
from .signals import (
    SplitSpec,
    concat_batches,
    frame_labels,
    load_csv,
    read_batch,
    split,
    stft,
    synth_regimes,
    window_sequences,
    write_batch,
)
from .trainer import TrainConfig, load_checkpoint, train

log = logging.getLogger("emargin")

EXIT_DATA, EXIT_USAGE, EXIT_NUMERIC = 1, 2, 3


def _data_dir(args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(args.out) / "data"


def _run_dir(args, loss_kind: str, seed: int) -> Path:
    return Path(args.out) / "runs" / f"{loss_kind}-seed{seed}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(train_b, test_b, extra: dict) -> dict:
    def hist(b):
        if b.labels is None:
            return {}
        vals, counts = np.unique(b.labels, return_counts=True)
        return {str(int(v)): int(c) for v, c in zip(vals, counts)}

    return {
        "train_shape": list(train_b.shape),
        "test_shape": list(test_b.shape),
        "D": int(train_b.shape[2]),
        "class_histogram": {"train": hist(train_b), "test": hist(test_b)},
        **extra,
    }


def _write_split(cfg: dict, batch, out: Path, header: dict) -> dict:
    spec = SplitSpec(cfg["split"]["train_fraction"], cfg["split"]["seed"])
    train_b, test_b = split(batch, spec)
    write_batch(train_b, out / "train.emsb", header)
    write_batch(test_b, out / "test.emsb", header)
    manifest = _manifest(train_b, test_b, {"dataset": cfg["dataset"]["name"], **header})
    _write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: dict) -> int:
    syn = dict(cfg["dataset"]["synth"])
    if args.seed is not None:
        syn["seed"] = args.seed
    batch = synth_regimes(
        int(syn["num_seqs"]), int(syn["T"]), int(syn["D"]), int(syn["num_classes"]),
        float(syn["regime_dwell"]), float(syn["noise_sigma"]), int(syn["seed"]),
    )
    header = {"class_map": {str(c): c for c in range(int(syn["num_classes"]))}, "source": "synth"}
    manifest = _write_split(cfg, batch, _data_dir(args), header)
    print(json.dumps({"data": str(_data_dir(args)), "train_shape": manifest["train_shape"]}))
    return 0


def cmd_preprocess(args, cfg: dict) -> int:
    csv_cfg = cfg["dataset"]["csv"]
    paths = list(args.csv or csv_cfg["paths"])
    if not paths:
        raise ConfigError("no CSV paths given (dataset.csv.paths or --csv)")
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"CSV file(s) not found: {missing}")
    st = cfg["stft"]
    window, hop = int(st["window"]), int(st["hop"])
    seq_len = int(cfg["seq_len"])
    parts = []
    raw_labels = set()
    series_list = []
    for p in sorted(paths):
        series = load_csv(p, csv_cfg["channels"], csv_cfg["label_column"], csv_cfg["sample_rate"])
        series_list.append((p, series))
        if series.labels is not None:
            raw_labels.update(int(v) for v in np.unique(series.labels))
    class_map = {str(v): i for i, v in enumerate(sorted(raw_labels))}
    for p, series in series_list:
        frames = stft(series, window, hop, st["window_fn"], bool(st["log_scale"]))
        labels = None
        if series.labels is not None:
            mapped = np.array([class_map[str(int(v))] for v in series.labels], dtype=np.int64)
            labels = frame_labels(mapped, len(series), window, hop)
        parts.append(window_sequences(frames, seq_len, labels, source=Path(p).name))
    batch = concat_batches(parts)
    header = {"window": window, "hop": hop, "window_fn": st["window_fn"], "class_map": class_map, "source": "csv"}
    manifest = _write_split(cfg, batch, _data_dir(args), header)
    print(json.dumps({"data": str(_data_dir(args)), "D": manifest["D"]}))
    return 0


def _train_config(cfg: dict, loss_kind: str, seed: int, iterations: int | None) -> TrainConfig:
    t = dict(cfg["train"])
    t["loss"] = LossConfig(**t["loss"])
    t["loss_kind"] = loss_kind
    t["seed"] = seed
    if iterations is not None:
        t["iterations"] = iterations
    try:
        return TrainConfig(**t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _encoder_config(cfg: dict, input_dim: int) -> EncoderConfig:
    return EncoderConfig(input_dim=input_dim, **{**cfg["encoder"], "hidden_dims": tuple(cfg["encoder"]["hidden_dims"])})


def cmd_pretrain(args, cfg: dict) -> int:
    seed = 1 if args.seed is None else args.seed
    loss_kind = args.loss or cfg["train"]["loss_kind"]
    train_b, _ = read_batch(_data_dir(args) / "train.emsb")
    tcfg = _train_config(cfg, loss_kind, seed, args.iterations)
    enc = _encoder_config(cfg, train_b.shape[2])
    run = _run_dir(args, loss_kind, seed)
    run.mkdir(parents=True, exist_ok=True)
    ckpt = train(train_b.data, tcfg, enc, checkpoint_path=run / "checkpoint.emgn")
    with (run / "loss_trace.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(ckpt.loss_trace, start=1):
            w.writerow([i, repr(v)])
    print(json.dumps({"run": str(run), "iterations": ckpt.iteration, "final_loss": ckpt.loss_trace[-1]}))
    return 0


def cmd_eval(args, cfg: dict) -> int:
    seed = 1 if args.seed is None else args.seed
    data = _data_dir(args)
    train_b, _ = read_batch(data / "train.emsb")
    test_b, _ = read_batch(data / "test.emsb")
    if train_b.labels is None or test_b.labels is None:
        raise DataError("evaluation needs labelled train and test batches")
    if args.random_init:
        loss_kind = "random_init"
        enc = _encoder_config(cfg, train_b.shape[2])
        params = init_params(enc, seed)
    else:
        loss_kind = args.loss or cfg["train"]["loss_kind"]
        path = Path(args.checkpoint) if args.checkpoint else _run_dir(args, loss_kind, seed) / "checkpoint.emgn"
        if not path.exists():
            raise DataError(f"checkpoint {path} not found")
        ckpt = load_checkpoint(path)
        enc, params = ckpt.encoder_config, ckpt.params
        loss_kind = ckpt.train_config.get("loss_kind", loss_kind)
        if args.seed is None:
            seed = ckpt.seed
    if enc.input_dim != train_b.shape[2]:
        raise ConfigError(f"checkpoint expects D={enc.input_dim}, data has D={train_b.shape[2]}")

    ev = cfg["eval"]
    assignment = args.assignment or ev["assignment"]
    Z_train = embed(train_b.data, params, enc)
    Z_test = embed(test_b.data, params, enc)
    d = enc.output_dim
    counts = (
        {int(c): int(n) for c, n in ev["subset_counts"].items()}
        if ev["subset_counts"]
        else subset_counts(test_b.labels, int(ev["per_class"]))
    )
    metrics = evaluate_embeddings(
        Z_train.reshape(-1, d), train_b.labels.reshape(-1),
        Z_test.reshape(-1, d), test_b.labels.reshape(-1),
        counts, seed, assignment, ev["k"], ProbeConfig(**ev["probe"]),
    )
    report = {
        "dataset": cfg["dataset"]["name"],
        "seed": seed,
        "loss_kind": loss_kind,
        "pseudo_label_scope": cfg["train"]["loss"]["pseudo_label_scope"],
        "config_digest": config_mod.digest(cfg),
        **metrics,
    }
    run = _run_dir(args, loss_kind, seed)
    out = run / f"report-{assignment}.json"
    _write_json(out, report)
    if args.export_embeddings:
        export_embeddings(Z_test, test_b.labels, run / "embeddings.csv",
                          {"seq_ids": test_b.meta.get("sources") or list(range(len(test_b)))})
    print(json.dumps({"report": str(out), **{k: report[k] for k in METRIC_FIELDS}}))
    return 0


def _fmt(values: list[float]) -> str:
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return f"{mean:.2f}±{std:.2f}"


def compare_reports(reports: list[dict]) -> str:
    """Markdown tables of mean±sample-std over seeds, one table per dataset."""
    if not reports:
        raise DataError("no reports to compare")
    groups: dict[str, dict[str, list[dict]]] = {}
    for r in reports:
        missing = [k for k in ("dataset", "seed", "loss_kind", *METRIC_FIELDS) if k not in r]
        if missing:
            raise DataError(f"report lacks fields {missing}")
        method = f"{r['loss_kind']} ({r.get('assignment', 'kmeans')})"
        groups.setdefault(str(r["dataset"]), {}).setdefault(method, []).append(r)
    lines = ["Cells are mean±std over seeds (sample std, n-1).", ""]
    for dataset in sorted(groups):
        lines += [f"### {dataset}", ""]
        lines.append("| method | seeds | " + " | ".join(METRIC_FIELDS) + " |")
        lines.append("|---|---|" + "---|" * len(METRIC_FIELDS))
        for method in sorted(groups[dataset]):
            rs = groups[dataset][method]
            seeds = [r["seed"] for r in rs]
            if len(set(seeds)) != len(seeds):
                raise ConfigError(f"{dataset}/{method}: duplicate seeds {seeds}")
            if len({r.get("k") for r in rs}) > 1:
                raise ConfigError(f"{dataset}/{method}: reports disagree on cluster count k")
            cells = [_fmt([float(r[m]) for r in rs]) for m in METRIC_FIELDS]
            lines.append(f"| {method} | {len(rs)} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def cmd_compare(args, cfg: dict) -> int:
    files: list[Path] = []
    for item in args.reports or [str(Path(args.out) / "runs")]:
        p = Path(item)
        files += sorted(p.rglob("report-*.json")) if p.is_dir() else [p]
    reports = []
    for f in files:
        try:
            reports.append(json.loads(f.read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read report {f}: {exc}") from None
    table = compare_reports(reports)
    out = Path(args.out) / "compare.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table, encoding="utf-8")
    print(table)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (synth: data seed; default 1 otherwise)")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="emargin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate synthetic regime data")

    p = sub.add_parser("preprocess", parents=[common], help="STFT + window + split CSV recordings")
    p.add_argument("--csv", nargs="+", help="input CSV files (overrides dataset.csv.paths)")
    p.add_argument("--data", help="output data directory (default: <out>/data)")

    p = sub.add_parser("pretrain", parents=[common], help="train the encoder")
    p.add_argument("--loss", choices=("emargin", "infonce"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--data", help="data directory (default: <out>/data)")

    p = sub.add_parser("eval", parents=[common], help="clustering metrics and linear probe")
    p.add_argument("--loss", choices=("emargin", "infonce"))
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true", help="evaluate an untrained encoder")
    p.add_argument("--assignment", choices=("kmeans", "labels"))
    p.add_argument("--export-embeddings", action="store_true")
    p.add_argument("--data", help="data directory (default: <out>/data)")

    p = sub.add_parser("compare", parents=[common], help="mean±std tables from reports")
    p.add_argument("reports", nargs="*", help="report files or directories (default: <out>/runs)")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    threads = int(os.environ.get("EMARGIN_THREADS", "1"))
    with threadpool_limits(limits=threads):
        return _dispatch(args)


def _dispatch(args) -> int:
    try:
        cfg = config_mod.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DomainError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
