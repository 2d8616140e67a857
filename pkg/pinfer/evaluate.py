"""Evaluation tasks: rigidness curves, refinement, parameter error and rollouts."""
from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dataset import DatasetManifest, NormStats, ProposalSequence, denormalize, normalize
from .dynamics import DynamicsNet, rollout
from .errors import ContractViolation
from .inference import InferenceNets, InferredProperties, infer, proposals_for
from .nn import rng_stream
from .sim import OBJECT_NAMES, PARAM_NAMES, EnvConfig, EnvKind, Trajectory
from .visual import VisualPriorNet

logger = logging.getLogger("pinfer")


class AblationMode(str, enum.Enum):
    FULL = "full"
    NO_RIGIDNESS = "no_rigidness"
    NO_REFINEMENT = "no_refinement"
    NO_PARAMS = "no_params"


@dataclass
class MetricsReport:
    task: str
    env: str
    header: list[str]
    rows: list[list] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
        return path

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {"task": self.task, "env": self.env, "seed": self.seed,
                "summary": self.summary, "config": self.config}
        path.write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
        return path


class PropertyEstimator(Protocol):
    def infer(self, proposals: ProposalSequence) -> InferredProperties: ...


@dataclass
class NetEstimator:
    nets: InferenceNets

    def infer(self, proposals: ProposalSequence) -> InferredProperties:
        return infer(self.nets, proposals)


@dataclass
class EvalSet:
    trajectories: list[Trajectory]
    stats: NormStats
    env: EnvConfig

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "EvalSet":
        trajs = list(manifest.trajectories("test"))
        if not trajs:
            raise ContractViolation(f"manifest under {manifest.root} has no test trajectories")
        return cls(trajs, manifest.stats(), manifest.env)

    @property
    def kind(self) -> EnvKind:
        return self.env.kind

    def object_names(self) -> tuple[str, ...]:
        m = self.trajectories[0].n_objects
        names = OBJECT_NAMES.get(self.kind, ())
        return tuple(names[j] if j < len(names) else f"object{j}" for j in range(m))


@dataclass(frozen=True)
class ProposalSource:
    noise: float = 0.01
    flip_rate: float = 0.02
    seed: int = 0
    visual: VisualPriorNet | None = None

    def sequences(self, test: EvalSet) -> list[ProposalSequence]:
        seeds = rng_stream(self.seed, "eval", "proposals").integers(0, 2 ** 63 - 1, size=len(test.trajectories))
        return [proposals_for(t, test.stats, noise=self.noise, flip_rate=self.flip_rate, seed=int(s),
                              visual=self.visual)
                for t, s in zip(test.trajectories, seeds)]


def _require_length(traj: Trajectory, needed: int) -> None:
    if traj.n_steps < needed:
        raise ContractViolation(f"test trajectory has {traj.n_steps} frames, task needs {needed}")


def eval_rigidness(estimator: PropertyEstimator, test: EvalSet, t_values: Sequence[int] = range(1, 21), *,
                   source: ProposalSource = ProposalSource(), start_frame: int = 0) -> MetricsReport:
    """Mean probability on the correct rigidness label per object and sequence length."""
    if test.kind is EnvKind.RIGIDFALL:
        raise ContractViolation("no rigidness task for rigidfall: every object is rigid")
    t_values = list(t_values)
    for traj in test.trajectories:
        _require_length(traj, start_frame + max(t_values))
    names = test.object_names()
    sequences = source.sequences(test)
    scores = np.zeros((len(t_values), len(test.trajectories), len(names)))
    for j, (traj, props) in enumerate(zip(test.trajectories, sequences)):
        truth = np.asarray(traj.rigidness, dtype=bool)
        for i, t_len in enumerate(t_values):
            q = estimator.infer(props.window(start_frame, t_len)).rigidness
            scores[i, j] = np.where(truth, q, 1.0 - q)
    report = MetricsReport("rigidness", test.kind.value, ["T", "object", "mean_prob"], seed=source.seed)
    for i, t_len in enumerate(t_values):
        for k, name in enumerate(names):
            report.rows.append([t_len, name, float(scores[i, :, k].mean())])
    report.summary = {
        name: {"mean": float(scores[:, :, k].mean()), "std": float(scores[:, :, k].std())}
        for k, name in enumerate(names)
    }
    report.summary["n_trajectories"] = len(test.trajectories)
    return report


def eval_refinement(estimator: PropertyEstimator, test: EvalSet, *, window: int = 10,
                    source: ProposalSource = ProposalSource(), start_frame: int = 0) -> MetricsReport:
    """MSE of the proposals and of the refined positions against truth, normalized space."""
    pre, post = [], []
    for traj, props in zip(test.trajectories, source.sequences(test)):
        _require_length(traj, start_frame + window)
        win = props.window(start_frame, window)
        truth = normalize(traj.positions[start_frame:start_frame + window], test.stats)
        refined = estimator.infer(win).refined
        pre.append(float(np.mean((win.positions - truth) ** 2)))
        post.append(float(np.mean((refined - truth) ** 2)))
    report = MetricsReport("refinement", test.kind.value, ["env", "mse_pre", "mse_post"], seed=source.seed)
    report.rows.append([test.kind.value, float(np.mean(pre)), float(np.mean(post))])
    report.summary = {
        "mse_pre": {"mean": float(np.mean(pre)), "std": float(np.std(pre))},
        "mse_post": {"mean": float(np.mean(post)), "std": float(np.std(post))},
        "n_trajectories": len(pre),
    }
    return report


def param_baselines(param_range: tuple[float, float], draws: int, seed: int) -> tuple[float, float]:
    """Monte Carlo MAE% of predicting the range midpoint and of a uniform random guess."""
    lo, hi = param_range
    rng = rng_stream(seed, "eval", "param_baselines")
    targets = rng.uniform(lo, hi, size=draws)
    guesses = rng.uniform(lo, hi, size=draws)
    mid = 100.0 * np.mean(np.abs(0.5 * (lo + hi) - targets)) / (hi - lo)
    rand = 100.0 * np.mean(np.abs(guesses - targets)) / (hi - lo)
    return float(mid), float(rand)


def eval_params(estimator: PropertyEstimator, test: EvalSet, *, window: int = 10,
                source: ProposalSource = ProposalSource(), start_frame: int = 0,
                baseline_draws: int = 10000) -> MetricsReport:
    lo, hi = test.env.param_range
    errors = []
    for traj, props in zip(test.trajectories, source.sequences(test)):
        _require_length(traj, start_frame + window)
        est = estimator.infer(props.window(start_frame, window)).params
        errors.append(np.abs(np.asarray(est) - np.asarray(traj.params, dtype=np.float64)))
    errors = np.stack(errors)
    mid, rand = param_baselines((lo, hi), baseline_draws, source.seed)
    report = MetricsReport("params", test.kind.value,
                           ["param", "mae_pct", "baseline_mid_pct", "baseline_rand_pct"], seed=source.seed)
    pct = 100.0 * errors / (hi - lo)
    for k in range(errors.shape[1]):
        report.rows.append([PARAM_NAMES[test.kind], float(pct[:, k].mean()), mid, rand])
    report.summary = {
        "mae_pct": {"mean": float(pct.mean()), "std": float(pct.std())},
        "baseline_mid_pct": mid,
        "baseline_rand_pct": rand,
        "n_trajectories": len(errors),
    }
    return report


def _rollout_inputs(mode: AblationMode, traj: Trajectory, props: InferredProperties | None,
                    win: ProposalSequence | None, test: EvalSet, k: int, rng: np.random.Generator,
                    end: int, rigid_threshold: float = 0.5):
    """History window (physical), grouping, rigidness and params fed to the prior."""
    if props is None:
        window = np.asarray(traj.positions[end - k:end], dtype=np.float64)
        return window, np.asarray(traj.grouping, dtype=np.int64), \
            np.asarray(traj.rigidness, dtype=np.float64), np.asarray(traj.params, dtype=np.float64)
    seed_frames = win.positions[-k:] if mode is AblationMode.NO_REFINEMENT else props.refined[-k:]
    rigid = props.rigid_labels(rigid_threshold)
    if mode is AblationMode.NO_RIGIDNESS:
        rigid = np.zeros_like(rigid)
    params = props.params
    if mode is AblationMode.NO_PARAMS:
        lo, hi = test.env.param_range
        params = rng.uniform(lo, hi, size=np.shape(params))
    return denormalize(seed_frames, test.stats), props.grouping, rigid, params


def eval_rollout(estimator: PropertyEstimator | None, dynamics: DynamicsNet, test: EvalSet,
                 horizons: Sequence[int] = (1, 5, 10, 20), mode: AblationMode = AblationMode.FULL, *,
                 window: int = 10, source: ProposalSource = ProposalSource(), start_frame: int = 0,
                 oracle: bool = False, rigid_threshold: float = 0.5) -> MetricsReport:
    """Rollout error in physical units after each horizon, seeded from inferred properties.

    With ``oracle`` the true positions, labels and parameters seed the rollout and
    no estimator is used.
    Objects whose inferred rigid probability exceeds ``rigid_threshold`` roll out rigid.
    """
    mode = AblationMode(mode)
    if estimator is None and not oracle:
        raise ContractViolation("eval_rollout needs inference nets unless oracle=True")
    horizons = sorted(set(int(h) for h in horizons))
    k = dynamics.history
    end = start_frame + window
    if window < k:
        raise ContractViolation(f"inference window {window} shorter than dynamics history {k}")
    rng = rng_stream(source.seed, "eval", "rollout", mode.value)
    sequences = [None] * len(test.trajectories) if oracle else source.sequences(test)
    sq = {h: [] for h in horizons}
    ab = {h: [] for h in horizons}
    copy = {h: [] for h in horizons}
    for traj, seq in zip(test.trajectories, sequences):
        _require_length(traj, end + horizons[-1])
        win = None if seq is None else seq.window(start_frame, window)
        props = None if oracle else estimator.infer(win)
        hist, grouping, rigid, params = _rollout_inputs(mode, traj, props, win, test, k, rng, end,
                                                       rigid_threshold)
        result = rollout(dynamics, hist, grouping, rigid, params, horizons[-1], norm_stats=test.stats)
        truth = np.asarray(traj.positions, dtype=np.float64)
        for h in horizons:
            diff = result.positions[h - 1] - truth[end - 1 + h]
            sq[h].append(float(np.mean(diff ** 2)))
            ab[h].append(float(np.mean(np.abs(diff))))
            copy[h].append(float(np.mean((truth[end - 1] - truth[end - 1 + h]) ** 2)))
    label = "oracle" if oracle else mode.value
    report = MetricsReport("rollout", test.kind.value, ["mode", "horizon", "mse", "l1", "copy_last_mse"],
                           seed=source.seed)
    for h in horizons:
        report.rows.append([label, h, float(np.mean(sq[h])), float(np.mean(ab[h])), float(np.mean(copy[h]))])
        report.summary[str(h)] = {"mse_mean": float(np.mean(sq[h])), "mse_std": float(np.std(sq[h]))}
    report.summary["n_trajectories"] = len(test.trajectories)
    logger.info("eval_rollout env=%s mode=%s mse=%s", test.kind.value, label,
                {h: round(float(np.mean(sq[h])), 6) for h in horizons})
    return report
