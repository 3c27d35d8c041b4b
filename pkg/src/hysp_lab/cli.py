"""Command-line entry point: ``hysp-lab <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import secrets
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .config import config_hash, load_config, to_dict
from .errors import InvalidInput

log = logging.getLogger("hysp_lab")

COMMANDS = ("generate", "pretrain", "probe", "ablate", "split", "analyze", "sweep-batch", "gradcheck")


class RunBusy(RuntimeError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def _lock(out: Path):
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunBusy(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Run:
    """Output directory with a manifest that is written before any work starts."""

    def __init__(self, args, cfg):
        self.out = Path(args.out)
        self.cfg = cfg
        inputs = {}
        for key in ("config", "data", "checkpoint", "resume"):
            p = getattr(args, key, None)
            if p:
                inputs[key] = {"path": str(p), "sha256": _sha256(p)}
        self.manifest = {
            "command": args.command,
            "argv": args.argv,
            "seed": cfg.seed,
            "code_version": __version__,
            "config": to_dict(cfg),
            "config_hash": config_hash(cfg),
            "inputs": inputs,
            "threads": os.environ.get("HYSP_LAB_THREADS", "0"),
            "outputs": [],
            "status": "running",
        }

    def path(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.out / name

    def write(self) -> None:
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _dataset(args, cfg):
    from .data import load_dataset
    from .trainer import make_dataset

    if getattr(args, "data", None):
        return load_dataset(args.data)[0]
    return make_dataset(cfg)


def _checkpoint(args, cfg):
    from .checkpoint import load_checkpoint

    if not getattr(args, "checkpoint", None):
        raise InvalidInput("--checkpoint is required for this command")
    return load_checkpoint(args.checkpoint, expected_hash=None)


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_generate(args, cfg, run: Run) -> None:
    from .data import save_dataset
    from .trainer import make_dataset

    samples = make_dataset(cfg)
    save_dataset(run.path("dataset.bin"), samples, cfg.seed)
    print(f"wrote {len(samples)} samples")


def cmd_pretrain(args, cfg, run: Run) -> None:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .trainer import pretrain, train_part, write_metrics

    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, rows = pretrain(cfg, train_part(_dataset(args, cfg), cfg), resume=resume)
    write_metrics(rows, run.path("metrics.csv"), run.path("timings.csv"))
    save_checkpoint(ckpt, run.path("checkpoint.bin"))
    if rows:
        print(f"epochs {rows[0].epoch}-{rows[-1].epoch}: loss {rows[0].loss:.4f} -> {rows[-1].loss:.4f}")


def cmd_probe(args, cfg, run: Run) -> None:
    from .trainer import linear_probe

    ckpt = _checkpoint(args, cfg)
    ckpt.config.probe = cfg.probe
    res = linear_probe(ckpt, _dataset(args, ckpt.config), args.label_fraction, args.finetune)
    report = {"accuracy": res.accuracy, "label_fraction": args.label_fraction, "finetune": args.finetune,
              "n_test": int(len(res.labels))}
    run.path("probe.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"accuracy {res.accuracy:.4f}")


def cmd_ablate(args, cfg, run: Run) -> None:
    from .trainer import ablation_grid

    rows = ablation_grid(cfg, _dataset(args, cfg))
    _write_rows(run.path("ablation.csv"), rows)
    for r in rows:
        print(f"{r['variant']:<20} acc {r['linear_acc']:.4f}  final loss {r['final_loss']:.4f}")


def cmd_split(args, cfg, run: Run) -> None:
    from .checkpoint import save_checkpoint
    from .trainer import hard_easy_split_experiment, pretrain, train_part

    dataset = _dataset(args, cfg)
    if getattr(args, "checkpoint", None):
        ckpt = _checkpoint(args, cfg)
    else:
        ckpt, _ = pretrain(cfg, train_part(dataset, cfg))
        save_checkpoint(ckpt, run.path("full_checkpoint.bin"))
    report = hard_easy_split_experiment(ckpt, dataset, cfg)
    run.path("split.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"full {report['full_acc']:.4f}  hard {report['hard_half_acc']:.4f}  easy {report['easy_half_acc']:.4f}")


def cmd_analyze(args, cfg, run: Run) -> None:
    from . import analytics
    from .trainer import linear_probe, split_dataset

    ckpt = _checkpoint(args, cfg)
    dataset = _dataset(args, ckpt.config)
    a = cfg.analytics
    records = analytics.collect_records(ckpt, dataset, a.n_views, branch=a.branch)
    hists = [analytics.uncertainty_histogram(records, q, a.n_bins) for q in analytics.QUANTITIES]
    probe = linear_probe(ckpt, dataset)
    _, test = split_dataset(dataset, ckpt.config.data.test_fraction, ckpt.config.seed)
    test_ids = {s.sample_id for s in test}
    confusion = analytics.sorted_confusion_matrix(probe.predictions, probe.labels,
                                                  [r for r in records if r.sample_id in test_ids])
    meta = {"n_bins": a.n_bins, "n_views": a.n_views, "branch": a.branch, "probe_accuracy": probe.accuracy,
            "trend": {h.quantity: analytics.bin_trend(h) for h in hists}}
    index = analytics.emit_plots(run.out / "report", hists, records, analytics.class_radius_ranking(records),
                                 confusion, meta)
    run.manifest["outputs"] += [f"report/{a['file']}" for a in index["artifacts"]] + ["report/index.json"]
    print(json.dumps(meta["trend"]))


def cmd_sweep_batch(args, cfg, run: Run) -> None:
    from .trainer import batch_size_sweep

    ckpt = _checkpoint(args, cfg)
    ckpt.config.probe = cfg.probe
    rows = batch_size_sweep(ckpt, _dataset(args, ckpt.config))
    _write_rows(run.path("batch_sweep.csv"), rows)
    for r in rows:
        print(f"batch {r['batch_size']:>4}  acc {r['linear_acc']:.4f}")


def cmd_gradcheck(args, cfg, run: Run) -> int:
    from .gradcheck import format_table, run_all

    rows = run_all(range(args.seeds))
    table = format_table(rows)
    run.path("gradcheck.txt").write_text(table + "\n")
    print(table)
    return 0 if all(ok for _, _, ok in rows) else 1


HANDLERS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "probe": cmd_probe, "ablate": cmd_ablate,
    "split": cmd_split, "analyze": cmd_analyze, "sweep-batch": cmd_sweep_batch, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file merged over the preset defaults")
    common.add_argument("--seed", type=int, help="run seed (drawn from entropy and recorded when omitted)")
    common.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    common.add_argument("--preset", choices=("desk", "full"), default="desk")
    common.add_argument("--epochs", type=int, help="override train.epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hysp-lab", description="Hyperbolic self-paced skeleton representation lab.")
    sub = p.add_subparsers(dest="command", metavar="command")
    data_opt = argparse.ArgumentParser(add_help=False)
    data_opt.add_argument("--data", help="dataset file written by `generate` (default: generate from config)")
    ckpt_opt = argparse.ArgumentParser(add_help=False)
    ckpt_opt.add_argument("--checkpoint", help="checkpoint written by `pretrain`")

    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    sp = sub.add_parser("pretrain", parents=[common, data_opt], help="self-supervised pretraining")
    sp.add_argument("--resume", help="continue from a checkpoint")
    sp = sub.add_parser("probe", parents=[common, data_opt, ckpt_opt], help="linear, semi-supervised or finetune eval")
    sp.add_argument("--label-fraction", type=float, default=1.0)
    sp.add_argument("--finetune", action="store_true", help="train the encoder jointly with the classifier")
    sub.add_parser("ablate", parents=[common, data_opt], help="run the four-way ablation grid")
    sub.add_parser("split", parents=[common, data_opt, ckpt_opt], help="hard/easy half retraining experiment")
    sub.add_parser("analyze", parents=[common, data_opt, ckpt_opt], help="uncertainty reports")
    sub.add_parser("sweep-batch", parents=[common, data_opt, ckpt_opt], help="probe batch-size sweep")
    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=20)
    return p


def resolve_config(args):
    overrides: dict = {}
    seed = args.seed
    if seed is None:
        user_seed = json.loads(Path(args.config).read_text()).get("seed") if args.config else None
        seed = user_seed if user_seed is not None else secrets.randbits(32)
    overrides["seed"] = seed
    if args.epochs is not None:
        overrides["train"] = {"epochs": args.epochs}
    return load_config(args.config, args.preset, overrides)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    run = None
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _lock(out):
            run = Run(args, cfg)
            run.write()
            start = time.perf_counter()
            try:
                code = HANDLERS[args.command](args, cfg, run) or 0
            except KeyboardInterrupt:
                run.manifest["status"] = "interrupted"
                run.write()
                raise
            run.manifest["status"] = "complete" if code == 0 else "failed"
            run.manifest["seconds"] = round(time.perf_counter() - start, 3)
            run.write()
            return code
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one parsable line per failure
        if run is not None and run.manifest["status"] == "running":
            run.manifest["status"] = "failed"
            run.manifest["error"] = f"{type(exc).__name__}: {exc}"
            run.write()
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
