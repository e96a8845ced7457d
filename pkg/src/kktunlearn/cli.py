"""Command line entry point.

Exit status: 0 unlearning executed (or command succeeded), 1 error,
2 unlearning not executed, 3 inconclusive.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data_io, diffnet, experiments, reconstruct, trainer, verify
from .data_io import Checkpoint
from .experiments import ConfigError
from .trainer import UnlearnRequest

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_EXECUTED = 2
EXIT_INCONCLUSIVE = 3

_DECISION_EXIT = {
    verify.EXECUTED: EXIT_OK,
    verify.NOT_EXECUTED: EXIT_NOT_EXECUTED,
    verify.INCONCLUSIVE: EXIT_INCONCLUSIVE,
}

log = logging.getLogger("kktunlearn")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors must not collide with the verification exit codes
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _indices(text: str | None, what: str) -> list[int]:
    if text is None:
        return []
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise CliError(f"{what} must be comma-separated integers, got {text!r}") from None


def _config(args) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_and_spec(cfg):
    ds = experiments.build_dataset(cfg)
    return ds, experiments.build_spec(cfg, ds)


def _dataset_tag(ds) -> str:
    import hashlib

    return hashlib.sha256(ds.samples.tobytes() + ds.labels.astype(np.int64).tobytes()).hexdigest()[:16]


def _load_ckpt(path, ds) -> Checkpoint:
    if path is None:
        raise CliError("--checkpoint is required")
    ckpt = data_io.load_checkpoint(path)
    tag = ckpt.provenance.get("dataset")
    if tag is not None and tag != _dataset_tag(ds):
        raise CliError(f"{path} was trained on a different dataset (check --seed and the config)")
    ds.check_against(ckpt.spec)
    return ckpt


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds, spec = _dataset_and_spec(cfg)
    tcfg = experiments.train_config(cfg)
    theta, rep = trainer.train(spec, ds, tcfg)
    prov = {
        "command": "train",
        "seed": str(cfg.seed),
        "dataset": _dataset_tag(ds),
        "n_train": str(rep.n_train),
        "steps_run": str(rep.steps_run),
        "separation_step": str(rep.separation_step),
    }
    ckpt = Checkpoint(spec, theta, prov)
    data_io.save_checkpoint(ckpt, out / "model.ckpt")
    losses = dict(rep.loss_trajectory)
    data_io.write_csv(out / "train_report.csv", ["step", "min_margin", "loss"],
                      [(s, q, losses[s]) for s, q in rep.margin_trajectory])
    print(f"trained {rep.steps_run} steps, final loss {rep.final_loss:.6g}, checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds, _ = _dataset_and_spec(cfg)
    parent = _load_ckpt(args.checkpoint, ds)
    forget = _indices(args.forget, "--forget") if args.forget is not None else list(cfg.unlearn.forget)
    if not forget:
        raise CliError("the forget set is empty; pass --forget")
    req = UnlearnRequest(frozenset(forget), cfg.unlearn.mode)
    req.check(ds.n)
    theta, rep = trainer.unlearn(parent.spec, parent.theta, ds, req, experiments.train_config(cfg),
                                 finetune_steps=cfg.unlearn.finetune_steps)
    prov = {
        "command": "unlearn",
        "seed": str(cfg.seed),
        "dataset": parent.provenance.get("dataset", _dataset_tag(ds)),
        "parent": parent.digest(),
        "mode": cfg.unlearn.mode,
        "forget": " ".join(str(i) for i in sorted(req.forget_indices)),
        "forget_count": str(len(req.forget_indices)),
        "n_train": str(rep.n_train),
    }
    data_io.save_checkpoint(Checkpoint(parent.spec, theta, prov), out / "unlearned.ckpt")
    print(f"unlearned {len(req.forget_indices)} samples ({cfg.unlearn.mode}), checkpoint {out / 'unlearned.ckpt'}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds, _ = _dataset_and_spec(cfg)
    ckpt = _load_ckpt(args.checkpoint, ds)
    rc = experiments.reconstruct_config(cfg, ds.n)
    try:
        cands, traj = reconstruct.recover(ckpt.spec, ckpt.theta, rc)
    except reconstruct.RecoveryDivergedError as e:
        data_io.save_trajectory(out / "trajectory.csv", e.trajectory)
        raise
    data_io.save_candidates(out / "candidates.txt", cands.candidates, cands.multipliers, cands.labels, ds.shape)
    data_io.save_trajectory(out / "trajectory.csv", traj)
    print(f"recovered {cands.m} candidates in {len(traj)} steps, written to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if not args.pre or not args.post:
        raise CliError("--pre and --post candidate files are required")
    ds, _ = _dataset_and_spec(cfg)
    pre, _, _, pre_shape = data_io.load_candidates(args.pre)
    post, _, _, post_shape = data_io.load_candidates(args.post)
    if pre.shape[1] != ds.d or post.shape[1] != ds.d:
        raise CliError(f"candidate width {pre.shape[1]}/{post.shape[1]} does not match the dataset ({ds.d})")
    queries = _indices(args.queries, "--queries") if args.queries is not None else list(range(ds.n))
    if not queries:
        raise CliError("the query list is empty")
    if min(queries) < 0 or max(queries) >= ds.n:
        raise CliError(f"query indices must lie in [0, {ds.n})")
    forget = set(_indices(args.forget, "--forget")) if args.forget is not None else set(cfg.unlearn.forget)
    flags = np.array([q in forget for q in queries])
    boundary = None
    if args.checkpoint:
        ckpt = _load_ckpt(args.checkpoint, ds)
        boundary = diffnet.margins(ckpt.spec, ckpt.theta, ds.samples[queries], ds.labels[queries]).margins
    imgs = ds.images()[queries]
    report = verify.verify_unlearning(pre, post, imgs, flags, cfg.verify, query_ids=queries, boundary=boundary)
    data_io.export_report(report, out / "verification.csv")
    print(f"decision: {report.decision} (mean D forget {report.mean_D_forget:.6g}, retain {report.mean_D_retain:.6g})")
    return _DECISION_EXIT[report.decision]


def cmd_experiment(args) -> int:
    cfg = _config(args)
    if not args.suite:
        raise CliError("--suite is required")
    if args.suite not in experiments.SUITES:
        raise CliError(f"unknown suite {args.suite!r}; choose from {', '.join(experiments.SUITES)}")
    out = _out_dir(args, cfg)
    result = experiments.run_suite(args.suite, cfg, out)
    for k, v in result.items():
        print(f"{k}: {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kktunlearn", description="Verify machine unlearning by reconstructing training samples.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat 'section.key = value' config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="global seed (overrides experiment.seed)")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("unlearn", help="apply an unlearning operator to a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--forget", help="comma-separated training indices")
    sp.set_defaults(func=cmd_unlearn)

    sp = sub.add_parser("reconstruct", help="recover candidate samples from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("verify", help="compare candidates recovered before and after unlearning")
    common(sp)
    sp.add_argument("--pre", help="candidates recovered from the original model")
    sp.add_argument("--post", help="candidates recovered from the updated model")
    sp.add_argument("--checkpoint", help="original model, for boundary distances")
    sp.add_argument("--forget", help="comma-separated forgotten indices")
    sp.add_argument("--queries", help="comma-separated training indices to query (default: all)")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("experiment", help="run a named experiment suite")
    common(sp)
    sp.add_argument("--suite", help=", ".join(experiments.SUITES))
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ValueError, OSError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
