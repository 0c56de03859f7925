"""Command-line entry point: ``hcmt train | evaluate | ablate | synth | defaults``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 NaN abort.
Relative ``--out`` paths resolve under ``$HCMT_RUN_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import torch

from hcmt.backbone import network_from_checkpoint
from hcmt.config import MODE_LABELS, MODES, TrainConfig, parse_overrides, set_key
from hcmt.data import SyntheticParams, generate_synthetic, make_split, save_case
from hcmt.errors import ConfigError, DataError, NaNLossError
from hcmt.metrics import METRIC_NAMES, aggregate, evaluate_cases, format_table, write_case_csv
from hcmt.trainer import prepare_data, train

log = logging.getLogger("hcmt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN = 0, 2, 3, 4
RUN_ROOT_ENV = "HCMT_RUN_ROOT"


def resolve_out(out: str) -> Path:
    path = Path(out)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def load_config(args) -> TrainConfig:
    overrides = list(args.set or [])
    if args.config:
        cfg = TrainConfig.load(args.config, overrides)
    else:
        cfg = TrainConfig.from_flat(parse_overrides(overrides))
    cfg.validate()
    return cfg


def _setup_logging(run_dir: Path | None, verbose: bool) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if run_dir is not None:
        handlers.append(logging.FileHandler(run_dir / "log.txt"))
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, handlers=handlers, force=True,
                        format="%(asctime)s %(levelname)s %(message)s")


def _fresh_dir(path: Path) -> bool:
    """Create ``path``; returns True if we created it (and may remove it on failure)."""
    existed = path.exists()
    path.mkdir(parents=True, exist_ok=True)
    return not existed


def run_training(cfg: TrainConfig, out: Path, resume: str | None = None, data=None, log_every: int = 50):
    data = data if data is not None else prepare_data(cfg)
    created = _fresh_dir(out)
    try:
        cfg.resolved().save(out / "config.cfg")
        if data.split is not None:
            data.split.save(out / "split.json")

        def progress(rec):
            if rec.t % log_every == 0:
                log.info("t=%d lr=%.2e lambda=%.4f sup=%.4f unsup=%.5f total=%.4f",
                         rec.t, rec.lr, rec.lam, rec.loss_sup, rec.loss_unsup, rec.total)

        report, trainer = train(cfg, data, out, resume_from=resume, callback=progress)
    except NaNLossError:
        raise
    except BaseException:
        if created and not (out / "checkpoints").exists():
            shutil.rmtree(out, ignore_errors=True)
        raise
    return report, trainer, data


def evaluate_to(out: Path, network, cases, cfg: TrainConfig, metrics, empty_policy: str, tag: str) -> dict:
    torch.set_grad_enabled(False)
    try:
        scores = evaluate_cases(network, cases, cfg.patch_shape, cfg.eval_stride)
    finally:
        torch.set_grad_enabled(True)
    agg = aggregate(scores, empty_policy)
    write_case_csv(out / f"metrics_{tag}.csv", scores, metrics)
    table = format_table({tag: agg}, metrics, label="Split")
    (out / f"metrics_{tag}_mean.txt").write_text(table + "\n")
    (out / f"metrics_{tag}_mean.json").write_text(json.dumps(agg, indent=2))
    return agg


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_config(args)
    out = resolve_out(args.out)
    _setup_logging(None, args.verbose)
    report, trainer, data = run_training(cfg, out, args.resume)
    if not args.no_eval and data.test:
        agg = evaluate_to(out, trainer.student, data.test, cfg, METRIC_NAMES, "exclude", "test")
        print(format_table({MODE_LABELS.get(cfg.mode, cfg.mode): agg}))
    print(f"finished {len(report.records)} iterations in {report.wall_clock:.1f}s -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    net, payload = network_from_checkpoint(args.checkpoint, args.which)
    if "config" not in payload:
        raise ConfigError(f"{args.checkpoint} carries no training config")
    cfg = TrainConfig.loads(payload["config"])
    if args.config or args.set:
        extra = TrainConfig.load(args.config, args.set or []) if args.config else None
        if extra is not None:
            cfg = extra
        else:
            for k, v in parse_overrides(args.set).items():
                set_key(cfg, k, v)
    if cfg.network.to_dict() != payload["network_spec"].to_dict():
        raise ConfigError("checkpoint network spec does not match the config network spec")
    metrics = tuple(m.strip() for m in args.metrics.split(",")) if args.metrics else METRIC_NAMES
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {METRIC_NAMES}")
    data = prepare_data(cfg)
    cases = {"test": data.test, "labeled": data.labeled}[args.split]
    if not cases:
        raise DataError(f"split {args.split!r} is empty")
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = net.to(getattr(torch, cfg.dtype))
    agg = evaluate_to(out, net, cases, cfg, metrics, args.empty_policy, args.split)
    print(format_table({args.split: agg}, metrics, label="Split"))
    return EXIT_OK


def run_ablation(cfg: TrainConfig, modes, out: Path, metrics=METRIC_NAMES) -> dict[str, dict]:
    data = prepare_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for mode in modes:
        mcfg = dataclasses.replace(cfg, mode=mode, use_hs=None, use_hu=None, use_teacher=None)
        run_dir = out / mode
        _, trainer, _ = run_training(mcfg, run_dir, data=data)
        rows[mode] = evaluate_to(run_dir, trainer.student, data.test, mcfg, metrics, "exclude", "test")
    labeled = {f"{MODE_LABELS[m]}": rows[m] for m in modes}
    table = format_table(labeled, metrics)
    (out / "ablation.txt").write_text(table + "\n")
    with (out / "ablation.csv").open("w") as f:
        f.write("mode," + ",".join(metrics) + "\n")
        for m in modes:
            f.write(m + "," + ",".join(repr(rows[m][k]) for k in metrics) + "\n")
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()] if args.modes else list(MODES)
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise ConfigError(f"unknown modes {unknown}; choose from {sorted(MODES)}")
    _setup_logging(None, args.verbose)
    rows = run_ablation(cfg, modes, resolve_out(args.out))
    print(format_table({MODE_LABELS[m]: rows[m] for m in modes}))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = resolve_out(args.out)
    params = SyntheticParams()
    cases = generate_synthetic(args.count, args.grid, args.seed, params)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_case(case, out, args.format)
    n_test = args.n_test
    n_labeled = args.n_labeled
    n_unlabeled = args.count - n_test - n_labeled
    if n_unlabeled < 0:
        raise ConfigError("n_labeled + n_test exceeds count")
    split = make_split([c.id for c in cases], n_labeled, n_unlabeled, n_test, args.seed)
    split.save(out / "split.json")
    print(f"wrote {len(cases)} cases and split.json to {out}")
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(TrainConfig().dumps())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcmt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="train one configuration")
    config_args(sp)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--no-eval", action="store_true", help="skip test-split evaluation after training")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a data split")
    config_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--which", choices=("student", "teacher"), default="student")
    sp.add_argument("--split", choices=("test", "labeled"), default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics", help="comma-separated subset of dice,jaccard,asd,hd95")
    sp.add_argument("--empty-policy", default="exclude",
                    help="'exclude' drops undefined distances from the mean; 'penalty:<value>' substitutes a value")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and evaluate several modes on shared data and seeds")
    config_args(sp)
    sp.add_argument("--modes", help=f"comma-separated subset of {','.join(MODES)} (default: all)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="write a synthetic dataset and split file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--grid", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-labeled", type=int, default=16)
    sp.add_argument("--n-test", type=int, default=20)
    sp.add_argument("--format", choices=("nifti", "nrrd", "raw"), default="nifti")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("defaults", help="print the default configuration")
    sp.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NaNLossError as exc:
        print(f"aborted on non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
