"""Command-line experiment runner.

Subcommands::

    pfedsam run       [--config P] [--preset NAME] [--seed N] [--rounds N] [--out DIR]
    pfedsam ablate    [--config P] [--seed N] [--rounds N] [--out DIR]
    pfedsam gradcheck [--seed N]
    pfedsam gendata   [--config P | --spec FILE.json] [--seed N] --out DIR
    pfedsam eval      --checkpoint FILE --dataset DIR
    pfedsam config    [--config P] [--preset NAME] [--seed N] [--rounds N]

Every random draw comes from a PCG64 generator keyed by the root seed and a
label path (see :mod:`pfedsam.rng`), so the same config and seed give
byte-identical outputs. ``PFSM_THREADS`` caps client parallelism (0 or 1 is
serial); results do not depend on it.

Outputs are staged in a temporary sibling directory and moved into ``--out``
only when the command succeeds.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, parse_config
from .data import DatasetSpec, generate_client, read_dataset, write_dataset
from .errors import PFedSAMError
from .federation import PRESETS, run_experiment, thread_count
from .gradsuite import run_suite
from .metrics import evaluate
from .reporting import format_ablation_csv, format_results_csv, result_rows, round_line
from .segmodel import load_checkpoint, save_checkpoint, transfer_table

PROG = "pfedsam"


@contextmanager
def staged_output(out_dir):
    """Yield a scratch directory whose files land in ``out_dir`` on success."""
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for src in sorted(tmp.rglob("*")):
        if src.is_file():
            dest = out / src.relative_to(tmp)
            dest.parent.mkdir(parents=True, exist_ok=True)
            src.replace(dest)
    shutil.rmtree(tmp, ignore_errors=True)


def _experiment(cfg: ExperimentConfig, preset, threads, log=None):
    lines = []

    def on_round(report):
        lines.append(round_line(report, preset))
        if log is not None:
            log(f"[{preset}] round {report.round_index + 1}/{cfg.fed.rounds}")

    exp = run_experiment(preset, cfg.fed, cfg.model, cfg.clients, cfg.unseen, threads=threads, on_round=on_round)
    return exp, lines


def _write_transfer(path, model_config):
    rows = transfer_table(model_config)
    text = "# pfedsam transfer v1\nmodel,flops,params\n" + "".join(f"{r['model']},{r['flops']},{r['params']}\n" for r in rows)
    Path(path).write_text(text)


def cmd_run(cfg: ExperimentConfig, threads=None, log=None) -> int:
    """Run one preset; write rounds.ndjson, results.csv, config.toml and checkpoints."""
    with staged_output(cfg.out_dir) as tmp:
        exp, lines = _experiment(cfg, cfg.preset, threads, log)
        (tmp / "config.toml").write_text(cfg.to_toml())
        (tmp / "rounds.ndjson").write_text("".join(line + "\n" for line in lines))
        (tmp / "results.csv").write_text(format_results_csv(result_rows(exp)))
        _write_transfer(tmp / "transfer.csv", cfg.model)
        ckpt = tmp / "checkpoints"
        ckpt.mkdir()
        save_checkpoint(exp.global_model, ckpt / "global.pfsm")
        for client in exp.clients:
            save_checkpoint(client.eval_model, ckpt / f"{client.client_id}.pfsm")
    if log is not None:
        log(f"{cfg.preset}: mean dice {exp.mean_dice:.4f}, mean iou {exp.mean_iou:.4f}")
    return 0


def cmd_ablate(cfg: ExperimentConfig, threads=None, log=None) -> int:
    """Run every preset with the same seed and data; write the wide ablation table."""
    with staged_output(cfg.out_dir) as tmp:
        experiments, log_lines, long_rows = [], [], []
        for name in PRESETS:
            exp, lines = _experiment(cfg, name, threads, log)
            experiments.append(exp)
            log_lines += lines
            long_rows += result_rows(exp)
            if log is not None:
                log(f"{name}: mean dice {exp.mean_dice:.4f}")
        (tmp / "config.toml").write_text(cfg.to_toml())
        (tmp / "rounds.ndjson").write_text("".join(line + "\n" for line in log_lines))
        (tmp / "ablation.csv").write_text(format_ablation_csv(experiments))
        (tmp / "ablation_long.csv").write_text(format_results_csv(long_rows))
    return 0


def cmd_gradcheck(seed: int = 0, log=print) -> int:
    start = time.perf_counter()
    reports = run_suite(seed)
    for rep in reports:
        log(str(rep))
    failed = [r.op_name for r in reports if not r.passed]
    log(f"{len(reports) - len(failed)}/{len(reports)} passed in {time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


def cmd_gendata(specs, out_dir, image_size: int = 64, mask_scale: int = 4, log=None) -> int:
    """Write one dataset directory per spec under ``out_dir``."""
    with staged_output(out_dir) as tmp:
        for spec in specs:
            write_dataset(tmp / spec.client_id, spec, generate_client(spec, image_size, mask_scale))
            if log is not None:
                log(f"{spec.client_id}: {spec.n_samples} samples")
    return 0


def cmd_eval(checkpoint, dataset, log=print) -> int:
    model = load_checkpoint(checkpoint)
    spec, samples = read_dataset(dataset, model.config.mask_scale)
    if not samples:
        raise PFedSAMError(f"no samples in {dataset}")
    result = evaluate(model, samples, spec.client_id, "global")
    log(f"{result.client_id} dice={result.dice:.6f} iou={result.iou:.6f} n={result.n_samples}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Personalized federated segmentation simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=True, out=True):
        p.add_argument("--config", type=Path, help="TOML experiment config")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--rounds", type=int, help="number of federated rounds")
        if preset:
            p.add_argument("--preset", choices=list(PRESETS), help="ablation preset")
        if out:
            p.add_argument("--out", type=Path, help="output directory")
        return p

    common(sub.add_parser("run", help="run one preset"))
    common(sub.add_parser("ablate", help="run all six presets"), preset=False)
    common(sub.add_parser("config", help="print the resolved config"), out=False)
    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    d = sub.add_parser("gendata", help="materialize synthetic client datasets")
    d.add_argument("--config", type=Path)
    d.add_argument("--spec", type=Path, help="JSON file with one DatasetSpec")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", type=Path, required=True)
    e = sub.add_parser("eval", help="Dice/IoU of a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path, required=True)
    return parser


def _load(args) -> ExperimentConfig:
    if args.config is not None and not args.config.exists():
        raise PFedSAMError(f"config file not found: {args.config}")
    cfg = parse_config(args.config)
    return cfg.with_overrides(
        preset=getattr(args, "preset", None),
        seed=args.seed,
        out_dir=getattr(args, "out", None),
        rounds=getattr(args, "rounds", None),
    )


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _dispatch(args) -> int:
    threads = thread_count()
    if args.command == "run":
        return cmd_run(_load(args), threads, _log)
    if args.command == "ablate":
        return cmd_ablate(_load(args), threads, _log)
    if args.command == "config":
        sys.stdout.write(_load(args).to_toml())
        return 0
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed)
    if args.command == "gendata":
        if args.spec is not None:
            cfg = parse_config(args.config) if args.config is not None else ExperimentConfig()
            specs = [DatasetSpec.from_dict(json.loads(args.spec.read_text()))]
        else:
            cfg = _load(args)
            specs = list(cfg.clients) + ([cfg.unseen] if cfg.unseen is not None else [])
        return cmd_gendata(specs, args.out, cfg.model.image_size, cfg.model.mask_scale, _log)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.dataset)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (PFedSAMError, OSError, ValueError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
