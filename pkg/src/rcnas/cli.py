"""Command-line entry point: ``rcnas <subcommand> ...``; exit codes 0 ok, 1 failure, 2 usage."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from . import __version__
from .arch import BLOCK_REGISTRY, cost_model, parse_descriptor
from .attacks import AttackSpec, registered_externals
from .config import ConfigError, build_workbench, load_config, rl_config, schema_text, theory_configs
from .encoder import ENCODER_VERSION, StateEncoder, load_encoder, pretrain, save_encoder
from .policy import POLICY_VERSION, PolicyNet
from .report import RecordError, write_report
from .rl import fine_tune, meta_train
from .tasks import TaskSetting
from .theory import median_direction, run_seeds
from .training import CHECKPOINT_VERSION, evaluate

log = logging.getLogger("rcnas")

RUNS_DIR_ENV = "RCNAS_RUNS_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_DIR_ENV, "runs"))


def open_run(command: str, args, cfg: dict | None) -> Path:
    """Create the run directory and write its manifest before anything else happens."""
    run_id = args.run_id or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir = runs_root() / run_id
    if run_dir.exists():
        if not args.force:
            raise FileExistsError(f"run directory {run_dir} exists; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    manifest = {
        "run_id": run_id,
        "command": list(args.argv),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": None if cfg is None else cfg["seed"],
        "config": cfg,
        "versions": {
            "package": __version__,
            "model_checkpoint": CHECKPOINT_VERSION,
            "encoder_checkpoint": ENCODER_VERSION,
            "policy_checkpoint": POLICY_VERSION,
            "blocks": sorted(BLOCK_REGISTRY),
            "external_attacks": registered_externals(),
        },
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return run_dir


def _encoder_for(cfg, bench, path=None) -> tuple[StateEncoder, list]:
    e = cfg["encoder"]
    if path is not None:
        return load_encoder(path, d_state=e["d_state"], eval_size=e["eval_size"]), []
    enc = StateEncoder(n_stages=max(t.n_stages for t in bench.teachers), eval_size=e["eval_size"],
                       hidden=e["hidden"], d_state=e["d_state"], mlp_hidden=e["mlp_hidden"],
                       lips_mode=e["lips_mode"], seed=cfg["seed"])
    history = pretrain(bench.encoder_samples(), enc, steps=e["steps"], lr=e["lr"])
    return enc, history


def cmd_pretrain_encoder(args):
    cfg = load_config(args.config)
    bench = build_workbench(cfg)
    run_dir = open_run("pretrain-encoder", args, cfg)
    enc, history = _encoder_for(cfg, bench)
    save_encoder(enc, run_dir / "encoder.ckpt")
    (run_dir / "pretrain_loss.json").write_text(json.dumps(history))
    print(f"encoder loss {history[0]:.4g} -> {history[-1]:.4g}; saved {run_dir / 'encoder.ckpt'}")


def cmd_meta_train(args):
    cfg = load_config(args.config)
    bench = build_workbench(cfg)
    run_dir = open_run("meta-train", args, cfg)
    enc, history = _encoder_for(cfg, bench, args.encoder)
    save_encoder(enc, run_dir / "encoder.ckpt")
    policy = PolicyNet(d_state=cfg["encoder"]["d_state"], hidden=cfg["policy"]["hidden"], seed=cfg["seed"])
    res = meta_train(rl_config(cfg), bench, enc, policy, run_dir)
    skipped = sum(r["skipped"] for r in res.records)
    print(f"{len(res.records)} steps logged ({skipped} skipped); policy saved to {res.checkpoint}")


def _target(cfg, bench, args) -> TaskSetting:
    idx = 0
    if args.teacher is not None:
        names = cfg["teachers"]
        if args.teacher not in names:
            raise ConfigError(f"teacher {args.teacher!r} is not in the configured pool {names}")
        idx = names.index(args.teacher)
    budget = bench.budgets[idx] if args.budget is None else args.budget
    return TaskSetting(args.dataset or cfg["datasets"][0], args.attack or cfg["attacks"][0],
                       bench.teachers[idx], budget)


def cmd_fine_tune(args):
    cfg = load_config(args.config)
    bench = build_workbench(cfg)
    target = _target(cfg, bench, args)
    run_dir = open_run("fine-tune", args, cfg)
    enc = load_encoder(args.encoder, d_state=cfg["encoder"]["d_state"], eval_size=cfg["encoder"]["eval_size"])
    source = args.checkpoint if args.checkpoint is not None else PolicyNet(
        d_state=cfg["encoder"]["d_state"], hidden=cfg["policy"]["hidden"], seed=cfg["seed"])
    res = fine_tune(source, target, rl_config(cfg), bench, enc, run_dir)
    if res.best is not None:
        (run_dir / "best.json").write_text(res.best.to_json())
    print(f"best descriptor: {None if res.best is None else res.best.to_json()}")


def cmd_evaluate(args):
    cfg = load_config(args.config)
    bench = build_workbench(cfg)
    desc = parse_descriptor(args.arch)
    dataset = args.dataset or cfg["datasets"][0]
    spec = AttackSpec.from_id(args.attack or cfg["attacks"][0])
    run_dir = open_run("evaluate", args, cfg)
    splits = bench.splits(dataset)
    model, ev = bench.cache.train_and_evaluate(bench.head(desc, dataset), splits, bench.teacher_at, spec,
                                               bench.split_seed)
    test = evaluate(model, splits.test, spec, seed=cfg["seed"])
    out = {"eval": ev.to_dict(), "test": test.to_dict(), "descriptor": json.loads(desc.to_json())}
    (run_dir / "eval.json").write_text(json.dumps(out, indent=1))
    print(f"clean {test.clean_accuracy:.4f} robust({spec.id}) {test.robust_accuracy:.4f} on {test.n_items} test items")


def cmd_cost(args):
    head = {}
    if args.classes is not None:
        head["num_classes"] = args.classes
    desc = parse_descriptor(args.arch, **head)
    rep = cost_model(desc, args.resolution)
    print(f"params {rep.params / 1e6:.3g}M, flops {rep.flops / 1e9:.3g}G")
    if args.per_stage:
        for i, (f, p) in enumerate(zip(rep.per_stage_flops, rep.per_stage_params), 1):
            print(f"  stage {i}: params {p}, flops {f}")


def cmd_theory(args):
    cfg = load_config(args.config)
    sc, net = theory_configs(cfg)
    t = cfg["theory"]
    run_dir = open_run("theory", args, cfg)
    seeds = range(cfg["seed"], cfg["seed"] + t["seeds"])
    reports = run_seeds(sc, net, t["T"], t["T_prime"], t["tau"], t["compression"], seeds, run_dir / "theory")
    rlc, u = median_direction(reports)
    worst = max(r.pythagorean_max_error for r in reports)
    print(f"median final max|v|: RL-C {rlc:.4f}, U {u:.4f}; max decomposition error {worst:.2e}")


def cmd_report(args):
    out = write_report(args.run_dir)
    print(f"report written to {out}")


def cmd_config_schema(args):
    print(schema_text())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcnas", description="robust compressive architecture search")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def mutating(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--run-id", help="run directory name under $RCNAS_RUNS_DIR")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        sp.set_defaults(fn=fn)
        return sp

    mutating("pretrain-encoder", cmd_pretrain_encoder, "pre-train and freeze the state encoder")
    sp = mutating("meta-train", cmd_meta_train, "meta RL training across sampled tasks")
    sp.add_argument("--encoder", help="pre-trained encoder checkpoint (pre-trains one if omitted)")
    sp = mutating("fine-tune", cmd_fine_tune, "fine-tune a policy on one target task")
    sp.add_argument("--encoder", required=True, help="pre-trained encoder checkpoint")
    sp.add_argument("--checkpoint", help="meta-trained policy checkpoint (fresh policy if omitted)")
    sp.add_argument("--dataset")
    sp.add_argument("--attack")
    sp.add_argument("--teacher", help="teacher name from the configured pool")
    sp.add_argument("--budget", type=float, help="FLOPs budget (default: the teacher's configured budget)")
    sp = mutating("evaluate", cmd_evaluate, "adversarially train and evaluate one descriptor")
    sp.add_argument("--arch", required=True)
    sp.add_argument("--dataset")
    sp.add_argument("--attack")
    mutating("theory", cmd_theory, "sparse-coding dense-mixture experiment")

    sp = sub.add_parser("cost", help="parameter and FLOPs count of a descriptor")
    sp.add_argument("--arch", required=True, help="WRN-d-k, WRN-d-k/<divisor> or descriptor JSON")
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--per-stage", action="store_true")
    sp.set_defaults(fn=cmd_cost)
    sp = sub.add_parser("report", help="CSV (and plot) reports from a run's records.jsonl")
    sp.add_argument("run_dir")
    sp.set_defaults(fn=cmd_report)
    sp = sub.add_parser("config-schema", help="print every configuration key with its default")
    sp.set_defaults(fn=cmd_config_schema)
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 2
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.fn(args)
    except (ConfigError, RecordError, FileExistsError, FileNotFoundError, ValueError, RuntimeError,
            OSError) as exc:
        print(f"rcnas {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
