"""Command-line front end: ``odtl <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset as D
from . import harness as H
from . import model as M
from .errors import OdtlError
from .io import atomic_write
from .numerics import NumericMode
from .splits import offline_split
from .trainer import TrainConfig, train

log = logging.getLogger("odtl")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors become the same one-line diagnostic as runtime errors."""

    def error(self, message):
        self.exit(2, f"odtl: error: {message}\n")


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise CliError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {path}")
    return p


def _output(path: str | None, required: bool = True) -> Path | None:
    if not path:
        if required:
            raise CliError("--out is required")
        return None
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"output directory does not exist: {parent}")
    return p


def _topology(text: str | None) -> M.Topology:
    if not text:
        raise CliError("--topology C_i,W_i,C is required")
    try:
        return M.Topology.parse(text)
    except (ValueError, OdtlError) as exc:
        raise CliError(str(exc)) from None


def _train_config(args) -> TrainConfig:
    return TrainConfig(patience=args.patience, max_epochs=args.max_epochs,
                       batch_size=args.batch_size, class_weighting=args.class_weighting,
                       seed=args.seed)


def _topology_for(ds: D.WindowedDataset, text: str | None) -> M.Topology:
    topo = _topology(text) if text else M.Topology(ds.channels, ds.width, ds.classes)
    if (topo.input_channels, topo.input_width, topo.num_classes) != (ds.channels, ds.width, ds.classes):
        raise CliError(f"topology {text} does not match dataset "
                       f"({ds.channels},{ds.width},{ds.classes})")
    return topo


def _emit(text: str, out: Path | None) -> None:
    sys.stdout.write(text)
    if out is not None:
        atomic_write(out, text)


# ------------------------------------------------------------ subcommands

def cmd_synth(args) -> int:
    out = _output(args.out)
    spec = D.DriftSpec(num_users=args.users, sessions_per_user=args.sessions,
                       samples_per_class_per_session=args.samples, num_classes=args.classes,
                       channels=args.channels, width=args.width, user_drift=args.drift,
                       noise_level=args.noise, seed=args.seed)
    ds = D.synth(spec)
    D.write(ds, out)
    print(f"wrote {out} samples={len(ds)} users={len(ds.user_ids)} "
          f"channels={ds.channels} width={ds.width} classes={ds.classes}")
    return 0


def cmd_train(args) -> int:
    ds_path = _existing(args.dataset, "dataset")
    out = _output(args.out)
    log_path = _output(args.log, required=False)
    ds = D.read(ds_path)
    topo = _topology_for(ds, args.topology)
    config = _train_config(args)
    rng = np.random.default_rng(args.seed)
    tr, va = offline_split(np.arange(len(ds)), ds.labels, rng, config.validation_fraction)
    params, report = train(ds.windows[tr], ds.labels[tr], ds.windows[va], ds.labels[va], topo, config)
    params.numeric_mode = NumericMode.parse(args.numeric)
    atomic_write(out, M.save(M.deploy(params, params.numeric_mode)))
    lines = "\n".join(report.log_lines()) + "\n"
    if log_path is not None:
        atomic_write(log_path, lines)
    else:
        sys.stderr.write(lines)
    print(f"wrote {out} epochs_run={report.epochs_run} best_epoch={report.best_epoch} "
          f"best_val_loss={report.best_validation_loss!r} "
          f"train_accuracy={report.final_train_accuracy!r}")
    return 0


def cmd_eval(args) -> int:
    ds = D.read(_existing(args.dataset, "dataset"))
    out = _output(args.out, required=False)
    topo = _topology_for(ds, args.topology)
    rep = H.run_experiment(ds, topo, _train_config(args), args.strategy, None,
                           args.numeric, args.seed, args.jobs)
    _emit(rep.to_text(), out)
    return 1 if rep.failed else 0


def _schedule(args) -> H.OdtlSchedule:
    base = H.preset(args.preset, args.seed) if args.preset else H.OdtlSchedule(shuffle_seed=args.seed)
    changes = {k: v for k, v in (("epochs", args.epochs), ("learning_rate", args.lr),
                                 ("momentum", args.momentum), ("tile_size", args.tile_size))
               if v is not None}
    return replace(base, **changes)


def cmd_odtl_eval(args) -> int:
    ds = D.read(_existing(args.dataset, "dataset"))
    out = _output(args.out, required=False)
    topo = _topology_for(ds, args.topology)
    schedule = _schedule(args)
    rep = H.run_experiment(ds, topo, _train_config(args), "l1po2", schedule,
                           args.numeric, args.seed, args.jobs)
    _emit(rep.to_text(), out)
    return 1 if rep.failed else 0


def cmd_infer(args) -> int:
    model_path = _existing(args.model, "model")
    ds = D.read(_existing(args.dataset, "dataset"))
    out = _output(args.out, required=False)
    params = M.load(model_path.read_bytes())
    mode = NumericMode.parse(args.numeric) if args.numeric else params.numeric_mode
    deployed = M.deploy(params, mode)
    topo = deployed.topology
    if (ds.channels, ds.width) != (topo.input_channels, topo.input_width):
        raise CliError("dataset windows do not match the model topology")
    pred = M.predict_batched(deployed, ds.windows)
    lines = [H.REPORT_HEADER]
    for i, (p, y, u) in enumerate(zip(pred, ds.labels, ds.users)):
        lines.append(f"record=sample index={i} user={u} label={y} pred={p}")
    acc = float(np.mean(pred == ds.labels)) if len(ds) else None
    lines.append(f"record=summary samples={len(ds)} mode={mode.short_name} accuracy={H._fmt(acc)}")
    _emit("\n".join(lines) + "\n", out)
    return 0


def cmd_profile(args) -> int:
    if args.model:
        topo = M.load(_existing(args.model, "model").read_bytes()).topology
    else:
        topo = _topology(args.topology)
    print(f"macs_per_inference={H.count_macs(topo)} params_per_update={H.count_update_params(topo)}")
    return 0


def cmd_inspect(args) -> int:
    info = M.describe(_existing(args.model, "model").read_bytes())
    for k, v in info.items():
        print(f"{k}={v}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="odtl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, dataset=True, train=False):
        if dataset:
            p.add_argument("--dataset")
        p.add_argument("--out")
        p.add_argument("--topology", help="C_i,W_i,C")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--numeric", choices=["f32", "bf16"], default="f32")
        if train:
            p.add_argument("--patience", type=int, default=100)
            p.add_argument("--max-epochs", type=int, default=1000)
            p.add_argument("--batch-size", type=int, default=32)
            p.add_argument("--class-weighting", action="store_true")
            p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", help="write a synthetic drift dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--samples", type=int, default=10, help="samples per class per session")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--width", type=int, default=40)
    p.add_argument("--drift", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="offline-train a model on a dataset")
    common(p, train=True)
    p.add_argument("--log", help="JSON-lines training log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="L1SO / L1PO experiment")
    common(p, train=True)
    p.add_argument("--strategy", choices=["l1so", "l1po"], default="l1po")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("odtl-eval", help="L1PO-2 experiment with on-device training")
    common(p, train=True)
    p.add_argument("--preset", choices=sorted(H.PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--tile-size", type=int)
    p.set_defaults(func=cmd_odtl_eval)

    p = sub.add_parser("infer", help="classify dataset windows with a model")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--numeric", choices=["f32", "bf16"], default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("profile", help="operation counters for a topology")
    p.add_argument("--topology", help="C_i,W_i,C")
    p.add_argument("--model")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("inspect", help="dump a model file header")
    p.add_argument("--model")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, OdtlError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"odtl: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
