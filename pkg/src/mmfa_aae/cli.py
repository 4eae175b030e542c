"""Command-line entry point.

Numeric settings live in ``key = value`` config files; the command line only
carries subcommands and paths.  Exit status: 0 success, 1 invalid input
(config, file format, dimension mismatch, bad usage), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, defaults_help, load_config
from .data import FORMAT_VERSION, Dataset, DatasetFormatError, generate_synthetic, read_dataset, write_dataset
from .diagnostics import loss_gradient_reports
from .diffcore import NonFiniteError, ShapeError
from .evaluate import EvalConfig, EvalReport, probe_domain_accuracy, run_protocol
from .model import CHECKPOINT_VERSION, CheckpointError, ModelState, embed, init_model, load_checkpoint, save_checkpoint
from .train import TrainingError, metrics_csv, run_training

log = logging.getLogger("mmfa_aae")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# Ablation rows: each adds one component on top of the previous row.
ABLATION_ROWS = (
    ("baseline", dict(in_blocks=0), dict(use_triplet=False, use_aae=False, use_mmd=False)),
    ("+IN", {}, dict(use_triplet=False, use_aae=False, use_mmd=False)),
    ("+Triplet", {}, dict(use_aae=False, use_mmd=False)),
    ("+AAE", {}, dict(use_mmd=False)),
    ("+MMD", {}, {}),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mmfa-aae",
        description="Multi-domain adversarial auto-encoder feature learning at desk scale.",
        epilog="config keys and defaults:\n" + defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the synthetic multi-domain corpus")
    p.add_argument("config")
    p.add_argument("out")

    p = sub.add_parser("train", help="train a model; writes metrics.csv, final.ckpt, run.cfg")
    p.add_argument("config")
    p.add_argument("data")
    p.add_argument("out_dir")

    p = sub.add_parser("extract", help="write hidden codes of every sample as a dataset file")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("out")

    p = sub.add_parser("eval", help="retrieval on held-out domains plus the domain probe")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("report")
    p.add_argument("--config", help="run config supplying eval.* settings")

    p = sub.add_parser("grad-check", help="finite-difference check of every loss")
    p.add_argument("config")

    p = sub.add_parser("ablate", help="train and evaluate the five component rows")
    p.add_argument("config")
    p.add_argument("out_dir")
    return parser


def provenance_text(config: RunConfig, command: str, extra: dict | None = None) -> str:
    """Config echo headed by comment lines; the file itself is a valid run config."""
    head = {
        "command": command,
        "package_version": __version__,
        "dataset_format_version": FORMAT_VERSION,
        "checkpoint_format_version": CHECKPOINT_VERSION,
        "seed": config.train.seed,
        **(extra or {}),
    }
    lines = [f"# {k}: {v}" for k, v in head.items()]
    return "\n".join(lines) + "\n" + config.to_text()


def fit_model_to_data(config: RunConfig, dataset: Dataset) -> RunConfig:
    """Copy the data-determined model dimensions (input shape, label counts) into the config."""
    config = config.copy()
    train = dataset.train_part()
    shape = dataset.sample_shape
    m = config.model
    m.mode = dataset.mode
    if dataset.mode == "vector":
        m.input_dim = shape[0]
    else:
        m.channels, m.height, m.width = shape
    m.identities = len(np.unique(train.identities))
    m.domains = len(np.unique(train.domains))
    try:
        m.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def check_compatible(state: ModelState, dataset: Dataset) -> None:
    cfg = state.config
    if dataset.mode != cfg.mode or tuple(dataset.sample_shape) != cfg.input_shape:
        raise ConfigError(
            f"checkpoint expects {cfg.mode} samples of shape {cfg.input_shape}, "
            f"dataset has {dataset.mode} samples of shape {tuple(dataset.sample_shape)}"
        )


def train_to_dir(config: RunConfig, dataset: Dataset, out_dir: Path, command: str) -> ModelState:
    config = fit_model_to_data(config, dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_seed = dataset.provenance.get("seed", "unknown")
    (out_dir / "run.cfg").write_text(provenance_text(config, command, {"data_seed": data_seed}))
    state = init_model(config.model)
    state, metrics = run_training(state, dataset, config.train, checkpoint_dir=out_dir)
    (out_dir / "metrics.csv").write_text(metrics_csv(metrics))
    save_checkpoint(state, out_dir / "final.ckpt")
    return state


def evaluate_state(state: ModelState, dataset: Dataset, ev: EvalConfig) -> EvalReport:
    check_compatible(state, dataset)
    heldout = dataset.heldout_part() if dataset.heldout else dataset
    if len(heldout) == 0:
        raise ConfigError("dataset has no held-out samples to evaluate on")
    report = run_protocol(state, heldout, ev.trials, ev.max_rank, ev.seed, ev.normalize)
    train = dataset.train_part()
    if len(np.unique(train.domains)) >= 2:
        report.domain_probe_accuracy = probe_domain_accuracy(
            embed(state, train.features), train.domains, ev.probe_holdout, ev.seed,
            groups=train.identities, steps=ev.probe_steps, lr=ev.probe_lr,
        )
    report.config.update(dataclasses.asdict(ev))
    return report


def write_report(report: EvalReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    path.with_suffix(".csv").write_text(report.to_csv())


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    write_dataset(generate_synthetic(config.data), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    dataset = read_dataset(args.data)
    out_dir = Path(args.out_dir)
    train_to_dir(config, dataset, out_dir, f"train {args.config} {args.data} {args.out_dir}")
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'final.ckpt'}")
    return EXIT_OK


def cmd_extract(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    check_compatible(state, dataset)
    codes = embed(state, dataset.features)
    out = Dataset(
        codes, dataset.identities, dataset.domains, dataset.domain_names, dataset.heldout, "vector",
        {**dataset.provenance, "codes_from": str(args.checkpoint)},
    )
    write_dataset(out, args.out)
    print(f"wrote {len(codes)} codes of dim {codes.shape[1]} to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ev = load_config(args.config).eval if args.config else EvalConfig()
    state = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    report = evaluate_state(state, dataset, ev)
    write_report(report, Path(args.report))
    probe = report.domain_probe_accuracy
    print(f"rank-1 {report.rank(1):.4f}  mAP {report.mAP:.4f}  domain probe "
          + ("n/a" if probe is None else f"{probe:.4f}"))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    config = load_config(args.config)
    reports = loss_gradient_reports(seed=config.train.seed, kernel=config.train.kernel())
    for name, rep in reports.items():
        print(f"{name:<15} max rel err {rep.max_rel_error:.3e}  {'PASS' if rep.passed else 'FAIL'}")
    failed = [n for n, r in reports.items() if not r.passed]
    if failed:
        for n in failed:
            print(f"{n}: " + "; ".join(reports[n].failures()), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def run_ablation(config: RunConfig, out_dir: Path) -> list[tuple[str, EvalReport]]:
    dataset = generate_synthetic(config.data)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out_dir / "data.mmfa")
    rows = []
    for i, (name, model_over, train_over) in enumerate(ABLATION_ROWS):
        row_cfg = config.copy()
        row_cfg.model = dataclasses.replace(row_cfg.model, **model_over)
        row_cfg.train = dataclasses.replace(row_cfg.train, **train_over)
        row_dir = out_dir / f"row{i}"
        state = train_to_dir(row_cfg, dataset, row_dir, f"ablate row {name}")
        report = evaluate_state(state, dataset, config.eval)
        write_report(report, row_dir / "report.json")
        rows.append((name, report))
        log.info("ablation %s: rank-1 %.4f", name, report.rank(1))
    return rows


def ablation_table(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "rank1", "rank5", "rank10", "mAP", "domain_probe"])
    for name, rep in rows:
        ranks = [repr(rep.cmc[r - 1]) if r <= len(rep.cmc) else "" for r in (1, 5, 10)]
        writer.writerow([name, *ranks, repr(rep.mAP), repr(rep.domain_probe_accuracy)])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out_dir)
    rows = run_ablation(config, out_dir)
    table = ablation_table(rows)
    (out_dir / "ablation.csv").write_text(table)
    (out_dir / "run.cfg").write_text(provenance_text(config, f"ablate {args.config} {args.out_dir}"))
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, NonFiniteError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
