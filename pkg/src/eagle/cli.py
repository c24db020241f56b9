"""``eagle`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import checkpoint as ckpt
from . import data as dt
from . import evaluation as ev
from . import numeric as nc
from . import train
from .config import ConfigError, TrainConfig, load_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("eagle")


class UsageError(Exception):
    pass


def say(msg: str) -> None:
    print(msg, flush=True)


def resolve(args) -> TrainConfig:
    cfg = load_config(args.config, args.set or (), args.preset)
    say(f"seed = {cfg.seed}")
    say("# resolved config")
    sys.stdout.write(cfg.to_text())
    sys.stdout.flush()
    return cfg


def require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def dataset(cfg: TrainConfig) -> dt.DatasetManifest:
    root = Path(cfg.data_root)
    if not (root / "index.txt").is_file():
        raise UsageError(f"no dataset at {root}; run `eagle gen-data` first")
    return dt.load(root)


# -- commands --------------------------------------------------------------------------


def cmd_gen_data(cfg: TrainConfig, args) -> int:
    t0 = time.perf_counter()
    man = train.generate_dataset(cfg, cfg.data_root)
    counts = {s: len(man.ids(s)) for s in ("train", "val")}
    say(f"wrote {len(man.samples)} images ({counts['train']} train / {counts['val']} val) "
        f"to {cfg.data_root} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_pretrain(cfg: TrainConfig, args) -> int:
    man = dataset(cfg)
    out = args.out or cfg.pretrain_checkpoint

    def on_step(step, loss, _):
        if step % 50 == 0:
            say(f"pretrain step {step}: loss {loss:.4f}")

    model = train.pretrain(cfg, man, on_step)
    ckpt.save_checkpoint(out, model.params)
    report = ev.evaluate(model, man)
    say(f"saved {out}")
    say(ev.format_report(report.as_dict()).rstrip())
    return EXIT_OK


def cmd_tune(cfg: TrainConfig, args) -> int:
    man = dataset(cfg)
    source = require_file(args.checkpoint or cfg.pretrain_checkpoint, "pretrain checkpoint")
    if args.resume:
        require_file(args.resume, "resume checkpoint")
    model = train.load_model(cfg, source, man.class_names)
    out_dir = args.out or cfg.out_dir
    before, after, _ = train.tune(cfg, man, model, out_dir, resume=args.resume, log_fn=say)
    for k, v in ev.drift_report(before, after).items():
        say(f"{k} = {v:+.4f}")
    say(f"report: {Path(out_dir) / 'final.report'}")
    return EXIT_OK


def cmd_eval(cfg: TrainConfig, args, probe: bool = False) -> int:
    man = dataset(cfg)
    path = require_file(args.checkpoint or cfg.pretrain_checkpoint, "checkpoint")
    model = train.load_model(cfg, path, man.class_names)
    report = ev.evaluate(model, man, probe=probe, probe_lr=cfg.probe_lr, probe_epochs=cfg.probe_epochs)
    if args.out:
        ev.write_report(args.out, report)
    say(ev.format_report(report.as_dict()).rstrip())
    return EXIT_OK


def cmd_probe(cfg: TrainConfig, args) -> int:
    return cmd_eval(cfg, args, probe=True)


def grad_check_problem(cfg: TrainConfig):
    """A two-image grounding loss over every parameter tensor, in float64."""
    cfg = cfg.replace(dtype="float64", supervision="both", n_images=max(cfg.n_images, 4))
    man = dt.manifest_from_samples(
        dt.generate_samples(train.data_config_of(cfg), train.root_stream(cfg)),
        [dt.SHAPES[k] for k in range(cfg.n_classes)],
    )
    ids = sorted(man.samples)[:2]
    batch = dt.make_batch([(i, 0) for i in ids], man, cfg.patch_size, cfg.theta)
    model = train.new_model(cfg, man.class_names)

    def loss_fn(p):
        return train.grounding_loss(p, model.arch, model.vocab, batch, cfg).total

    return loss_fn, model.params


def cmd_check_grad(cfg: TrainConfig, args) -> int:
    t0 = time.perf_counter()
    loss_fn, params = grad_check_problem(cfg)
    report = nc.check_gradients(loss_fn, params, h=1e-5, tol=1e-4, max_entries=args.max_entries)
    say(report.format())
    worst = max(e.max_rel_error for e in report.entries)
    say(f"{len(report.entries)} tensors, max relative error {worst:.3e}, "
        f"{time.perf_counter() - t0:.1f}s: {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_ablate(cfg: TrainConfig, args) -> int:
    man = dataset(cfg)
    source = require_file(args.checkpoint or cfg.pretrain_checkpoint, "pretrain checkpoint")
    model = train.load_model(cfg, source, man.class_names)
    out_dir = Path(args.out or Path(cfg.out_dir).parent / "ablate")
    results = train.ablate(cfg, man, model, out_dir, log_fn=say)
    say(f"{'cell':16s} {'cls':>7s} {'seq':>7s} {'fp1':>7s}")
    for name, (_, after) in results.items():
        say(f"{name:16s} {after.cls_acc:7.4f} {after.seq_acc:7.4f} {after.fp_at.get(1, float('nan')):7.4f}")
    say(f"reports in {out_dir}")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic segmented corpus"),
    "pretrain": (cmd_pretrain, "contrastive image-text pretraining"),
    "tune": (cmd_tune, "mask-pooled grounding fine-tuning"),
    "eval": (cmd_eval, "zero-shot accuracy and FP@K of a checkpoint"),
    "probe": (cmd_probe, "evaluation plus linear probes"),
    "check-grad": (cmd_check_grad, "finite-difference gradient check"),
    "ablate": (cmd_ablate, "optimizer x supervision grid"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--preset", help="named preset applied before the config file")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="eagle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("tune", "eval", "probe", "ablate"):
            p.add_argument("--checkpoint", help="model checkpoint (default: pretrain_checkpoint)")
        if name in ("pretrain", "tune", "eval", "probe", "ablate"):
            p.add_argument("--out", help="output path")
        if name == "tune":
            p.add_argument("--resume", help="tuning checkpoint to continue from")
        if name == "check-grad":
            p.add_argument("--max-entries", type=int, default=32,
                           help="probe at most this many entries per tensor")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    train.configure_threads()
    handler = COMMANDS[args.command][0]
    try:
        cfg = resolve(args)
        return handler(cfg, args)
    except (ConfigError, UsageError, ckpt.CheckpointError, dt.DatasetError) as err:
        print(f"eagle: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"eagle: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except train.NumericalFailure as err:
        print(f"eagle: error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except nc.NonFiniteError as err:
        print(f"eagle: error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
