"""Command-line entry point: ``deapcache {synth,pretrain,train,simulate,report}``.

Every command reads the flat config file given by ``--config`` (optional),
applies ``--set key=value`` overrides and then its own path flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_config, load_config
from .embed import ByteEmbeddingTables, Word2VecConfig, pretrain_word2vec
from .errors import ConfigError, DeapError
from .model import (DeapModel, LossWeights, ModelDims, TrainConfig, load_checkpoint, lru_miss_indices,
                    make_samples, save_checkpoint, train)
from .sim import ALL_POLICIES, SimConfig, run_simulation
from .trace import SYNTH_KINDS, label_trace, load_trace, synth_trace, write_trace

log = logging.getLogger("deapcache")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FORMAT = 0, 2, 3, 4


# --------------------------------------------------------------------------
# config -> component settings

def model_dims(cfg):
    return ModelDims(
        d_byte=cfg.word2vec_byte_embedding_dimension,
        d_addr=cfg.address_embedding_size,
        comb_hidden=cfg.word2vec_encoder_hidden_layer_size,
        lstm_hidden=cfg.lstm_hidden_cell_size,
        dec_hidden=cfg.decoder_hidden_size,
        kde_probes=cfg.kde_probes,
        seq_len=cfg.prefetching_input_sequence_length,
        kde_window=cfg.miss_buffer_size,
        label_scale=cfg.label_scale,
        kde_floor=cfg.kde_bandwidth_floor,
    )


def word2vec_config(cfg):
    return Word2VecConfig(
        epochs=cfg.word2vec_number_of_epochs, lr=cfg.word2vec_learning_rate,
        weight_decay=cfg.word2vec_weight_decay, optimizer=cfg.word2vec_optimizer,
        hidden=cfg.word2vec_encoder_hidden_layer_size, dim=cfg.word2vec_byte_embedding_dimension,
        context=cfg.word2vec_context_size, seed=cfg.rng_seed,
    )


def train_config(cfg):
    weights = LossWeights(cfg.weight_for_cross_entropy_loss, cfg.weight_for_frequency_mse_loss,
                          cfg.weight_for_reuse_distance_mse_loss)
    return TrainConfig(epochs=cfg.num_epochs, batch_size=cfg.training_batch_size, lr=cfg.learning_rate,
                       optimizer=cfg.optimizer, temperature=cfg.training_temperature, weights=weights,
                       freeze_byte_tables=cfg.freeze_byte_tables, seed=cfg.rng_seed)


def sim_config(cfg):
    return SimConfig(
        capacity=cfg.cache_size, alpha=cfg.admission_frequency_threshold,
        beta=cfg.admission_reuse_distance_threshold, miss_buffer=cfg.miss_buffer_size,
        prefetch_interval=cfg.test_simulation_prefetching_interval,
        seq_len=cfg.prefetching_input_sequence_length, prefetch_n=cfg.prefetch_n,
        lecar_lambda=cfg.lecar_lambda, lecar_discount=cfg.lecar_discount or None,
        score_cache=cfg.score_cache, buffer_sampling=cfg.buffer_sampling, rng_seed=cfg.rng_seed,
        batch_size=cfg.test_simulation_batch_size,
    )


def read_labeled(path, cfg):
    tr = load_trace(path)
    return label_trace(tr, cfg.label_cap or None)


def _trace_paths(paths, what):
    if not paths:
        raise ConfigError(f"no {what} given")
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"trace file not found: {p}")
    return list(paths)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# --------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg):
    tr = synth_trace(args.kind, args.length, args.seed)
    write_trace(args.out, tr)
    print(f"wrote {len(tr)} records to {args.out}")


def cmd_pretrain(args, cfg):
    paths = _trace_paths(args.traces or cfg.train_traces, "training traces")
    out = Path(args.out or cfg.tables_path)
    traces = [load_trace(p) for p in paths]
    tables, losses = pretrain_word2vec(traces, word2vec_config(cfg))
    out.parent.mkdir(parents=True, exist_ok=True)
    tables.save(out)
    _write_json(out.with_suffix(".log.json"), {"address": losses["address"], "pc": losses["pc"]})
    print(f"wrote {out}")


def cmd_train(args, cfg):
    paths = _trace_paths(args.traces or cfg.train_traces, "training traces")
    out = Path(args.out or cfg.checkpoint_path)
    dims = model_dims(cfg)
    tcfg = train_config(cfg)
    optimizer = None
    if args.resume:
        model, optimizer = load_checkpoint(args.resume, expected_dims=dims, with_optimizer=True)
    else:
        tables = None
        if not args.random_init:
            tables = ByteEmbeddingTables.load(args.tables or cfg.tables_path)
        model = DeapModel.create(dims, seed=cfg.rng_seed, tables=tables)
    traces = [read_labeled(p, cfg) for p in paths]
    sets = [make_samples(tr, lru_miss_indices(tr, cfg.cache_size), dims.kde_window) for tr in traces]
    curve, _, optimizer = train(model, sets, tcfg, optimizer)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, optimizer)
    stem = out.with_suffix("")
    with open(f"{stem}.curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "l_prefetching", "l_frequency", "l_recency", "l_total"))
        for k, row in enumerate(curve):
            w.writerow((k + 1, *(f"{v:.8g}" for v in row)))
    from .plotting import plot_loss_curve
    plot_loss_curve(curve, f"{stem}.loss.png")
    print(f"wrote {out} (step {model.train_step})")


def cmd_simulate(args, cfg):
    paths = _trace_paths(args.traces or cfg.test_traces, "test traces")
    policies = tuple(p.strip() for p in args.policies.split(",")) if args.policies else ALL_POLICIES
    for p in policies:
        if p not in ALL_POLICIES:
            raise ConfigError(f"unknown policy {p!r}; choose from {','.join(ALL_POLICIES)}")
    model = None
    if "deap" in policies:
        model = load_checkpoint(args.checkpoint or cfg.checkpoint_path, expected_dims=model_dims(cfg))
    out_dir = Path(args.out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scfg = sim_config(cfg)
    for path in paths:
        tr = read_labeled(path, cfg)
        name = Path(path).stem
        report = run_simulation(tr, model, scfg, policies, trace_name=name)
        (out_dir / f"{name}.report.json").write_text(report.to_json())
        (out_dir / f"{name}.report.csv").write_text(report.to_csv())
        summary = "  ".join(f"{p}={r.hit_rate:.4f}" for p, r in report.policies.items())
        print(f"{name}: {summary}")


def merge_reports(paths):
    """Per-trace hit rates from report JSON files, in argument order."""
    table = {}
    for p in paths:
        data = json.loads(Path(p).read_text())
        name = data.get("trace") or Path(p).stem
        table[name] = {k: v["hit_rate"] for k, v in data["policies"].items()}
    return table


def cmd_report(args, cfg):
    for p in args.reports:
        if not Path(p).is_file():
            raise FileNotFoundError(f"report not found: {p}")
    try:
        table = merge_reports(args.reports)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed report: {exc}") from exc
    out_dir = Path(args.out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    policies = [p for p in ALL_POLICIES if any(p in row for row in table.values())]
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("trace", *policies))
        for name, row in table.items():
            w.writerow((name, *(f"{row[p]:.6f}" if p in row else "" for p in policies)))
        w.writerow(("mean", *(f"{np.mean([r[p] for r in table.values() if p in r]):.6f}" for p in policies)))
    from .plotting import plot_hit_rates
    plot_hit_rates(table, out_dir / "hit_rates.png")
    print(f"wrote {out_dir / 'comparison.csv'} and {out_dir / 'hit_rates.png'}")


def cmd_config(args, cfg):
    sys.stdout.write(dump_config(cfg))


# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deapcache", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic trace")
    p.add_argument("--kind", choices=SYNTH_KINDS, default="program")
    p.add_argument("--length", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain byte embedding tables")
    p.add_argument("traces", nargs="*")
    p.add_argument("--out", help="tables file (.npy)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="train the prediction model")
    p.add_argument("traces", nargs="*")
    p.add_argument("--tables")
    p.add_argument("--random-init", action="store_true", help="skip pretrained tables")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", parents=[common], help="simulate the learned policy and baselines")
    p.add_argument("traces", nargs="*")
    p.add_argument("--checkpoint")
    p.add_argument("--policies", help=f"comma-separated subset of {','.join(ALL_POLICIES)}")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="merge simulation reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config", parents=[common], help="print the effective config")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
