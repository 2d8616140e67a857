from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from dotenv import load_dotenv

from .checkpoint import load_checkpoint, save_checkpoint
from .config import AppConfig, load_config
from .dataset import denormalize, generate_dataset, load_manifest, write_norm_stats
from .dynamics import dp_train, dynamics_from_store, rollout, write_rollout_csv
from .errors import ContractViolation, PinferError
from .evaluate import (
    AblationMode,
    EvalSet,
    NetEstimator,
    ProposalSource,
    eval_params,
    eval_refinement,
    eval_rigidness,
    eval_rollout,
)
from .inference import InferenceNets, inf_train, infer, inference_from_store, proposals_for, write_properties
from .nn import ParamStore
from .sim import EnvConfig, EnvKind
from .visual import visual_prior_from_store, vp_train

logger = logging.getLogger("pinfer")

TASKS = ("rigidness", "refinement", "params", "rollout")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _setup_logging(level: str) -> None:
    if not logger.handlers:
        h = logging.StreamHandler(sys.stdout)
        h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        logger.addHandler(h)
    logger.setLevel(level.upper())


def _load(path: str | None, what: str) -> ParamStore:
    if not path:
        raise ContractViolation(f"missing {what} checkpoint (pass --{what})")
    if not Path(path).exists():
        raise ContractViolation(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path)


def _nets(args) -> InferenceNets:
    return InferenceNets(
        refine=inference_from_store(_load(args.refine, "refine")),
        params=inference_from_store(_load(args.params, "params")),
    )


def _visual(args):
    if getattr(args, "visual", None) is None:
        return None
    return visual_prior_from_store(_load(args.visual, "visual"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pinfer")
    parser.add_argument("--config", help="INI file with [env] [model] [train] [eval] sections")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="Simulate a labeled dataset")
    p.add_argument("--env", required=True, choices=[k.value for k in EnvKind])
    p.add_argument("--n-sims", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--scale", choices=["desk", "full"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")

    p = sub.add_parser("stats", help="Recompute normalization stats for a dataset")
    p.add_argument("--data")

    for name, help_text in (("train-visual", "Train the visual prior"),
                            ("train-dynamics", "Train the dynamics prior")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--metrics")
        if name == "train-visual":
            p.add_argument("--iterations", type=int)
        else:
            p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)

    p = sub.add_parser("train-inference", help="Train an inference net through a frozen dynamics prior")
    p.add_argument("--data")
    p.add_argument("--dynamics", required=True)
    p.add_argument("--target", required=True, choices=["refine_rigid", "params"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--proposals", choices=["corrupt", "visual"])
    p.add_argument("--visual")

    for name, help_text in (("infer", "Infer properties of one trajectory"),
                            ("predict", "Infer properties, then roll the dynamics prior forward")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data")
        p.add_argument("--refine", required=True)
        p.add_argument("--params", required=True)
        p.add_argument("--index", type=int, default=0, help="position in the test split")
        p.add_argument("--window", type=int)
        p.add_argument("--start", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--visual")
        p.add_argument("--out", required=True)
        if name == "predict":
            p.add_argument("--dynamics", required=True)
            p.add_argument("--horizon", type=int, default=20)

    p = sub.add_parser("eval", help="Run an evaluation task on the test split")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--env", choices=[k.value for k in EnvKind])
    p.add_argument("--data")
    p.add_argument("--refine")
    p.add_argument("--params")
    p.add_argument("--dynamics")
    p.add_argument("--visual")
    p.add_argument("--mode", default="full", choices=[m.value for m in AblationMode])
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--horizons", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _data_dir(args, cfg: AppConfig) -> Path:
    return Path(args.data or cfg.paths.data_dir)


def cmd_gen(args, cfg: AppConfig) -> int:
    cfg.override("env", kind=args.env, n_sims=args.n_sims, steps=args.steps, scale=args.scale)
    env = EnvConfig.preset(args.env, cfg.env.scale, steps=cfg.env.steps, dt=cfg.env.dt)
    out = Path(args.out or Path(cfg.paths.data_dir) / args.env)
    manifest = generate_dataset(env, cfg.env.n_sims, args.seed, out)
    logger.info("gen wrote %s trajectories to %s", len(manifest.files), out)
    return 0


def cmd_stats(args, cfg: AppConfig) -> int:
    write_norm_stats(load_manifest(_data_dir(args, cfg)))
    return 0


def cmd_train_visual(args, cfg: AppConfig) -> int:
    cfg.override("train", vp_iterations=args.iterations, vp_lr=args.lr)
    store = vp_train(load_manifest(_data_dir(args, cfg)), cfg, args.seed, args.metrics)
    save_checkpoint(store, args.out)
    return 0


def cmd_train_dynamics(args, cfg: AppConfig) -> int:
    cfg.override("train", dp_epochs=args.epochs, dp_lr=args.lr)
    store = dp_train(load_manifest(_data_dir(args, cfg)), cfg, args.seed, args.metrics)
    save_checkpoint(store, args.out)
    return 0


def cmd_train_inference(args, cfg: AppConfig) -> int:
    cfg.override("train", inf_epochs=args.epochs, inf_lr=args.lr, proposals=args.proposals)
    visual = None
    if cfg.train.proposals == "visual":
        visual = visual_prior_from_store(_load(args.visual, "visual"))
    store = inf_train(load_manifest(_data_dir(args, cfg)), _load(args.dynamics, "dynamics"), cfg,
                      args.target, args.seed, args.metrics, visual=visual)
    save_checkpoint(store, args.out)
    return 0


def _one_proposal(args, cfg: AppConfig):
    manifest = load_manifest(_data_dir(args, cfg))
    test = EvalSet.from_manifest(manifest)
    if not 0 <= args.index < len(test.trajectories):
        raise ContractViolation(f"--index {args.index} outside test split of {len(test.trajectories)}")
    traj = test.trajectories[args.index]
    window = args.window or cfg.eval.window
    start = cfg.eval.start_frame if args.start is None else args.start
    seq = proposals_for(traj, test.stats, noise=cfg.eval.proposal_noise, flip_rate=cfg.eval.flip_rate,
                        seed=args.seed, visual=_visual(args))
    return test, traj, seq.window(start, window), start + window


def cmd_infer(args, cfg: AppConfig) -> int:
    test, _, seq, _ = _one_proposal(args, cfg)
    props = infer(_nets(args), seq)
    write_properties(props, test.kind, args.out, cfg.eval.rigid_threshold)
    return 0


def cmd_predict(args, cfg: AppConfig) -> int:
    test, _, seq, _ = _one_proposal(args, cfg)
    props = infer(_nets(args), seq)
    dyn = dynamics_from_store(_load(args.dynamics, "dynamics"))
    k = dyn.history
    hist = denormalize(props.refined[-k:], test.stats)
    rigid = props.rigid_labels(cfg.eval.rigid_threshold)
    result = rollout(dyn, hist, props.grouping, rigid, props.params, args.horizon, norm_stats=test.stats)
    write_rollout_csv(result, args.out)
    write_properties(props, test.kind, Path(args.out).with_suffix(".json"), cfg.eval.rigid_threshold)
    return 0


def cmd_eval(args, cfg: AppConfig) -> int:
    if args.horizons:
        cfg.override("eval", horizons=args.horizons)
    manifest = load_manifest(_data_dir(args, cfg))
    if args.env and args.env != manifest.env_kind.value:
        raise ContractViolation(f"--env {args.env} does not match dataset env {manifest.env_kind.value}")
    test = EvalSet.from_manifest(manifest)
    ev = cfg.eval
    source = ProposalSource(ev.proposal_noise, ev.flip_rate, args.seed, _visual(args))
    out = Path(args.out)
    t0 = time.perf_counter()
    if args.task == "rollout":
        dyn = dynamics_from_store(_load(args.dynamics, "dynamics"))
        estimator = None if args.oracle else NetEstimator(_nets(args))
        report = eval_rollout(estimator, dyn, test, ev.horizons, AblationMode(args.mode), window=ev.window,
                              source=source, start_frame=ev.start_frame, oracle=args.oracle,
                              rigid_threshold=ev.rigid_threshold)
    else:
        estimator = NetEstimator(_nets(args))
        if args.task == "rigidness":
            report = eval_rigidness(estimator, test, range(ev.t_min, ev.t_max + 1), source=source,
                                    start_frame=ev.start_frame)
        elif args.task == "refinement":
            report = eval_refinement(estimator, test, window=ev.window, source=source,
                                     start_frame=ev.start_frame)
        else:
            report = eval_params(estimator, test, window=ev.window, source=source,
                                 start_frame=ev.start_frame, baseline_draws=ev.baseline_draws)
    report.config = cfg.echo()
    stem = args.task if args.task != "rollout" else f"rollout_{'oracle' if args.oracle else args.mode}"
    report.write_csv(out / f"{stem}.csv")
    report.write_summary(out / f"{stem}.json")
    logger.info("eval task=%s env=%s rows=%s took=%.1fs", args.task, test.kind.value, len(report.rows),
                time.perf_counter() - t0)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "stats": cmd_stats,
    "train-visual": cmd_train_visual,
    "train-dynamics": cmd_train_dynamics,
    "train-inference": cmd_train_inference,
    "infer": cmd_infer,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def cli_main(argv: list[str] | None = None) -> int:
    """Run one pipeline stage. Exit codes: 0 ok, 1 usage error, 2 data or contract error."""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        _setup_logging(args.log_level or cfg.log_level)
        logger.debug("config %s", json.dumps(cfg.echo(), sort_keys=True))
        return COMMANDS[args.cmd](args, cfg)
    except (PinferError, OSError, json.JSONDecodeError) as e:
        logger.error("stage %s failed: %s", args.cmd, e)
        logger.debug("stage %s traceback", args.cmd, exc_info=True)
        print(f"pinfer: error: {e}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> int:
    return cli_main(argv)


if __name__ == "__main__":
    raise SystemExit(main())
