import csv
import json

import pytest

from pinfer.checkpoint import load_checkpoint
from pinfer.cli import cli_main

TINY_INI = """
[env]
steps = 12
n_sims = 3

[model]
hidden = 6
edge_radius = 1.5
vp_window = 2
vp_hidden = 8
vp_channels = 2, 4
grid_size = 8
gru_layers = 1
inference_window = 4
rollout_train_steps = 1

[train]
vp_iterations = 2
vp_batch = 2
dp_epochs = 1
dp_window_stride = 4
inf_epochs = 1
inf_window_stride = 4
log_every = 1

[eval]
horizons = 1, 2
t_max = 4
window = 4
baseline_draws = 500
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)

    def _run(*argv):
        return cli_main(["--config", str(ini), "--log-level", "WARNING", *[str(a) for a in argv]])

    _run.root = root
    return _run


@pytest.fixture(scope="module")
def pipeline(run):
    root = run.root
    data = root / "data"
    assert run("gen", "--env", "massrope", "--seed", 0, "--out", data) == 0
    assert run("train-dynamics", "--data", data, "--seed", 0, "--out", root / "dp.ckpt",
               "--metrics", root / "dp.csv") == 0
    for target in ("refine_rigid", "params"):
        assert run("train-inference", "--data", data, "--dynamics", root / "dp.ckpt", "--target", target,
                   "--seed", 0, "--out", root / f"{target}.ckpt") == 0
    return root


def test_usage_errors_exit_one(run, capsys):
    assert run() == 1
    assert run("gen", "--env", "nowhere", "--seed", 0) == 1
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(run):
    assert run("--help") == 0


def test_missing_checkpoint_exits_two(run, pipeline, capsys):
    code = run("eval", "--task", "params", "--data", pipeline / "data", "--refine", pipeline / "nope.ckpt",
               "--params", pipeline / "params.ckpt", "--out", pipeline / "eval")
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_bad_config_exits_two(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[model]\nhiddenn = 4\n")
    assert cli_main(["--config", str(ini), "stats", "--data", str(tmp_path)]) == 2


def test_unreadable_inputs_exit_two(tmp_path, capsys, caplog):
    blocker = tmp_path / "taken"
    blocker.write_text("")
    assert cli_main(["gen", "--env", "massrope", "--seed", "0", "--n-sims", "1",
                     "--out", str(blocker)]) == 2
    (tmp_path / "manifest.json").write_text("{truncated")
    assert cli_main(["stats", "--data", str(tmp_path)]) == 2
    ini = tmp_path / "headless.ini"
    ini.write_text("hidden = 4\n")
    assert cli_main(["--config", str(ini), "stats", "--data", str(tmp_path)]) == 2
    assert capsys.readouterr().err.count("pinfer: error:") == 3
    assert "Traceback" not in caplog.text


def test_gen_writes_dataset(pipeline):
    data = pipeline / "data"
    assert len(list(data.glob("traj_*.vgpl"))) == 3
    manifest = json.loads((data / "manifest.json").read_text())
    assert [e["split"] for e in manifest["files"]] == ["test", "train", "train"]
    assert set(json.loads((data / "stats.json").read_text())) >= {"mean", "std"}


def test_stats_rewrites_same_stats(run, pipeline):
    before = (pipeline / "data" / "stats.json").read_text()
    assert run("stats", "--data", pipeline / "data") == 0
    assert json.loads((pipeline / "data" / "stats.json").read_text()) == json.loads(before)


def test_training_writes_checkpoints(pipeline):
    meta = load_checkpoint(pipeline / "dp.ckpt").metadata
    assert meta["kind"] == "dynamics" and meta["env"] == "massrope"
    assert load_checkpoint(pipeline / "params.ckpt").metadata["role"] == "params"
    assert (pipeline / "dp.csv").read_text().startswith("iteration,loss")


def test_train_visual(run, pipeline):
    out = pipeline / "vp.ckpt"
    assert run("train-visual", "--data", pipeline / "data", "--seed", 0, "--out", out) == 0
    assert load_checkpoint(out).metadata["kind"] == "visual"


def _nets(root):
    return ["--refine", root / "refine_rigid.ckpt", "--params", root / "params.ckpt"]


def test_eval_params(run, pipeline):
    out = pipeline / "eval"
    assert run("eval", "--task", "params", "--data", pipeline / "data", *_nets(pipeline), "--out", out) == 0
    with (out / "params.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["param", "mae_pct", "baseline_mid_pct", "baseline_rand_pct"]
    assert rows[1][0] == "stiffness"
    summary = json.loads((out / "params.json").read_text())
    assert summary["config"]["model"]["hidden"] == 6


def test_eval_rigidness(run, pipeline):
    out = pipeline / "eval"
    assert run("eval", "--task", "rigidness", "--data", pipeline / "data", *_nets(pipeline), "--out", out) == 0
    lines = (out / "rigidness.csv").read_text().splitlines()
    assert lines[0] == "T,object,mean_prob"
    assert len(lines) == 1 + 4 * 2


def test_eval_rollout_oracle(run, pipeline):
    out = pipeline / "eval"
    assert run("eval", "--task", "rollout", "--oracle", "--data", pipeline / "data",
               "--dynamics", pipeline / "dp.ckpt", "--out", out) == 0
    lines = (out / "rollout_oracle.csv").read_text().splitlines()
    assert lines[0] == "mode,horizon,mse,l1,copy_last_mse"
    assert [line.split(",")[1] for line in lines[1:]] == ["1", "2"]


def test_eval_rejects_wrong_env(run, pipeline):
    assert run("eval", "--task", "params", "--env", "fluidcube", "--data", pipeline / "data",
               *_nets(pipeline), "--out", pipeline / "eval") == 2


def test_infer_and_predict(run, pipeline):
    out = pipeline / "props.json"
    assert run("infer", "--data", pipeline / "data", *_nets(pipeline), "--out", out) == 0
    props = json.loads(out.read_text())
    assert [o["name"] for o in props["objects"]] == ["rope", "mass"]
    pred = pipeline / "pred.csv"
    assert run("predict", "--data", pipeline / "data", *_nets(pipeline), "--dynamics", pipeline / "dp.ckpt",
               "--horizon", 3, "--out", pred) == 0
    lines = pred.read_text().splitlines()
    assert lines[0] == "step,particle,x,y,z"
    assert len(lines) == 1 + 3 * 41
    assert pred.with_suffix(".json").exists()
