"""Desk-scale training runs checked against the target metrics.

Each environment is generated, trained and evaluated once per module; every
test reads one metric from those runs. Skipped unless PINFER_SLOW is set.
"""
from pathlib import Path

import numpy as np
import pytest

from pinfer.config import load_config
from pinfer.dataset import generate_dataset
from pinfer.dynamics import dp_train, dynamics_from_store
from pinfer.evaluate import (
    AblationMode,
    EvalSet,
    NetEstimator,
    ProposalSource,
    eval_params,
    eval_refinement,
    eval_rigidness,
    eval_rollout,
)
from pinfer.inference import InferenceNets, inf_train, inference_from_store
from pinfer.sim import EnvConfig
from pinfer.visual import vp_train

pytestmark = pytest.mark.slow

DESK_INI = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
SEED = 7


def _config(env):
    cfg = load_config(DESK_INI)
    cfg.override("env", kind=env)
    return cfg


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    cache = {}

    def _get(env):
        if env not in cache:
            cfg = _config(env)
            preset = EnvConfig.preset(env, cfg.env.scale, steps=cfg.env.steps, dt=cfg.env.dt)
            manifest = generate_dataset(preset, cfg.env.n_sims, SEED, tmp_path_factory.mktemp(env))
            dp = dp_train(manifest, cfg, SEED)
            nets = InferenceNets(
                inference_from_store(inf_train(manifest, dp, cfg, "refine_rigid", SEED)),
                inference_from_store(inf_train(manifest, dp, cfg, "params", SEED)),
            )
            ev = cfg.eval
            source = ProposalSource(ev.proposal_noise, ev.flip_rate, SEED)
            cache[env] = (cfg, manifest, dp, NetEstimator(nets), EvalSet.from_manifest(manifest), source)
        return cache[env]

    return _get


def test_dynamics_beats_copy_last_by_half(runs):
    _, _, dp, _, _, _ = runs("rigidfall")
    assert dp.metadata["test_mse"] < 0.5 * dp.metadata["copy_last_mse"]


def test_rigidness_is_recognized_on_the_rope(runs):
    cfg, _, _, estimator, test, source = runs("massrope")
    report = eval_rigidness(estimator, test, range(1, cfg.eval.t_max + 1), source=source,
                            start_frame=cfg.eval.start_frame)
    at = {(row[0], row[1]): row[2] for row in report.rows}
    for name in test.object_names():
        assert at[(10, name)] >= 0.9
        assert at[(20, name)] >= at[(2, name)] - 0.05


@pytest.mark.parametrize("env", ["rigidfall", "massrope", "fluidcube"])
def test_refinement_lowers_proposal_error(runs, env):
    cfg, _, _, estimator, test, source = runs(env)
    report = eval_refinement(estimator, test, window=cfg.eval.window, source=source,
                             start_frame=cfg.eval.start_frame)
    _, pre, post = report.rows[0]
    assert post < pre
    if env == "massrope":
        assert 2.0 * post <= pre


def test_gravity_estimate_beats_baselines(runs):
    cfg, _, _, estimator, test, source = runs("rigidfall")
    report = eval_params(estimator, test, window=cfg.eval.window, source=source,
                         start_frame=cfg.eval.start_frame, baseline_draws=cfg.eval.baseline_draws)
    _, mae, mid, rand = report.rows[0]
    assert mae < 15.0
    assert mae < mid < rand


def test_full_rollout_beats_every_ablation(runs):
    cfg, _, dp, estimator, test, source = runs("rigidfall")
    dyn = dynamics_from_store(dp)

    def mse_at_20(mode):
        report = eval_rollout(estimator, dyn, test, (1, 5, 10, 20), mode, window=cfg.eval.window,
                              source=source, start_frame=cfg.eval.start_frame,
                              rigid_threshold=cfg.eval.rigid_threshold)
        assert [row[1] for row in report.rows] == [1, 5, 10, 20]
        return report.rows[-1][2]

    full = mse_at_20(AblationMode.FULL)
    for mode in (AblationMode.NO_RIGIDNESS, AblationMode.NO_REFINEMENT, AblationMode.NO_PARAMS):
        assert full < mse_at_20(mode), mode.value


def test_visual_prior_loss_halves(runs, tmp_path):
    cfg, manifest, _, _, _, _ = runs("massrope")
    vp_train(manifest, cfg, SEED, metrics_path=tmp_path / "vp.csv")
    losses = [float(line.split(",")[1]) for line in (tmp_path / "vp.csv").read_text().splitlines()[1:]]
    head = max(1, len(losses) // 10)
    assert np.mean(losses[-head:]) <= 0.5 * np.mean(losses[:head])
