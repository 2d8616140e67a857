import logging
import struct

import numpy as np
import pytest

from pinfer.dataset import (
    HEADER_BYTES,
    MAGIC,
    NormStats,
    ProposalSequence,
    compute_norm_stats,
    corrupt_proposals,
    decode_trajectory,
    denormalize,
    encode_trajectory,
    generate_dataset,
    load_manifest,
    norm_stats_from_arrays,
    normalize,
    rasterize,
    read_trajectory,
    smoothed_one_hot,
    split_for,
    training_windows,
    trajectory_nbytes,
    write_trajectory,
)
from pinfer.errors import (
    BadMagicError,
    ContractViolation,
    TrajectoryParseError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from pinfer.sim import EnvConfig, EnvKind, Trajectory

UNIT = NormStats(np.zeros(3), np.ones(3))


@pytest.fixture()
def traj():
    rng = np.random.default_rng(0)
    t, n = 6, 10
    return Trajectory(
        env_kind=EnvKind.MASSROPE,
        params=np.array([0.7], dtype=np.float32),
        grouping=np.array([0] * 4 + [1] * 6, dtype=np.uint32),
        rigidness=np.array([False, True]),
        positions=rng.normal(size=(t, n, 3)).astype(np.float32),
        actuation=rng.normal(size=(t, 3)).astype(np.float32),
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("rf")
    cfg = EnvConfig.preset("rigidfall", steps=6)
    return generate_dataset(cfg, 12, seed=7, out_dir=root)


# -- trajectory files ----------------------------------------------------------------------

def test_round_trip_is_byte_identical(traj, tmp_path):
    path = write_trajectory(traj, tmp_path / "t.vgpl")
    back = read_trajectory(path)
    assert encode_trajectory(back) == path.read_bytes()
    np.testing.assert_array_equal(back.positions, traj.positions)
    np.testing.assert_array_equal(back.grouping, traj.grouping)
    assert back.env_kind is EnvKind.MASSROPE


def test_file_size_formula(traj):
    blob = encode_trajectory(traj)
    assert HEADER_BYTES == 28
    assert len(blob) == trajectory_nbytes(1, 10, 6, 2) == 28 + 4 + 40 + 2 + 12 * 6 * 10 + 12 * 6


def test_bad_magic_names_offset_zero(traj):
    blob = b"XXXX" + encode_trajectory(traj)[4:]
    with pytest.raises(BadMagicError) as e:
        decode_trajectory(blob)
    assert e.value.offset == 0


def test_truncated_payload(traj):
    blob = encode_trajectory(traj)
    with pytest.raises(TruncatedPayloadError) as e:
        decode_trajectory(blob[:-1])
    assert e.value.offset == len(blob) - 1
    with pytest.raises(TruncatedPayloadError):
        decode_trajectory(blob[:10])


def test_version_and_env_checked(traj):
    blob = bytearray(encode_trajectory(traj))
    struct.pack_into("<I", blob, 4, 9)
    with pytest.raises(VersionMismatchError) as e:
        decode_trajectory(bytes(blob))
    assert e.value.offset == 4
    blob = bytearray(encode_trajectory(traj))
    struct.pack_into("<I", blob, 8, 42)
    with pytest.raises(TrajectoryParseError) as e:
        decode_trajectory(bytes(blob))
    assert e.value.offset == 8
    assert bytes(blob[:4]) == MAGIC


def test_trailing_bytes_rejected(traj):
    blob = encode_trajectory(traj)
    with pytest.raises(TrajectoryParseError) as e:
        decode_trajectory(blob + b"\x00\x00")
    assert e.value.offset == len(blob)


# -- normalization --------------------------------------------------------------------------

def test_constant_positions_floor_std():
    stats = norm_stats_from_arrays([np.full((5, 3), 2.5)])
    np.testing.assert_allclose(stats.mean, 2.5)
    np.testing.assert_allclose(stats.std, 1e-6)


def test_two_points_on_x():
    stats = norm_stats_from_arrays([np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])])
    assert stats.mean[0] == pytest.approx(1.0)
    assert stats.std[0] == pytest.approx(1.0)


def test_streaming_matches_concatenated():
    rng = np.random.default_rng(1)
    chunks = [rng.normal(loc=3.0, size=(k, 3)) for k in (5, 17, 9)]
    stats = norm_stats_from_arrays(source=lambda: iter(chunks))
    allx = np.concatenate(chunks)
    np.testing.assert_allclose(stats.mean, allx.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(stats.std, allx.std(axis=0), atol=1e-12)


def test_normalize_round_trip():
    stats = NormStats(np.array([0.1, 0.5, -0.2]), np.array([0.3, 0.2, 0.05]))
    x = np.random.default_rng(2).normal(size=(4, 7, 3))
    np.testing.assert_allclose(denormalize(normalize(x, stats), stats), x, atol=1e-12)


def test_empty_stats_rejected():
    with pytest.raises(ContractViolation):
        norm_stats_from_arrays([])


# -- manifests ---------------------------------------------------------------------------------

def test_split_rule():
    assert [split_for(i) for i in range(11)] == ["test"] + ["train"] * 9 + ["test"]


def test_generated_dataset(dataset):
    m = load_manifest(dataset.root)
    assert len(m.files) == 12
    assert len(m.paths("test")) == 2
    assert all(p.exists() for p in m.paths())
    lo, hi = m.env.param_range
    assert all(lo <= e["params"][0] <= hi for e in m.files)
    assert m.stats().matches(compute_norm_stats(m))


def test_stats_come_from_train_split_only(dataset, caplog):
    with caplog.at_level(logging.DEBUG, logger="pinfer"):
        compute_norm_stats(load_manifest(dataset.root))
    read = [r.getMessage() for r in caplog.records if "dataset read" in r.getMessage()]
    assert read
    assert not any("traj_00000" in msg or "traj_00010" in msg for msg in read)


def test_malformed_manifest_rejected(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ContractViolation):
        load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(ContractViolation):
        load_manifest(tmp_path)


def test_manifest_refuses_missing_file(dataset):
    m = load_manifest(dataset.root)
    m.files.append({"path": "nope.vgpl", "split": "train", "params": [-10.0], "seed": 0})
    with pytest.raises(ContractViolation):
        m.save()


def test_generation_is_deterministic(dataset, tmp_path):
    again = generate_dataset(dataset.env, 12, seed=7, out_dir=tmp_path)
    for a, b in zip(dataset.paths(), again.paths()):
        assert a.read_bytes() == b.read_bytes()


def test_training_windows():
    assert training_windows(10, 5, 2) == [0, 2, 4]
    assert training_windows(3, 5) == []
    with pytest.raises(ContractViolation):
        training_windows(10, 0)


# -- observations -----------------------------------------------------------------------------

def test_rasterize_single_particle_at_center():
    grid = rasterize(np.array([[0.01, 0.01, 0.0]]), UNIT, 32)
    assert grid.shape == (2, 32, 32)
    assert np.unravel_index(np.argmax(grid[0]), (32, 32)) == (16, 16)
    assert grid[1, 16, 16] == pytest.approx(0.5)


def test_rasterize_empty():
    grid = rasterize(np.zeros((0, 3)), UNIT, 16)
    np.testing.assert_array_equal(grid[0], 0.0)
    np.testing.assert_array_equal(grid[1], 1.0)


def test_rasterize_whole_cell_shift():
    cell = 5.0 / 32
    x = np.array([[-0.3, 0.2, 0.1], [0.1, -0.4, 0.0]])
    a = rasterize(x, UNIT, 32)
    b = rasterize(x + np.array([cell, 0.0, 0.0]), UNIT, 32)
    np.testing.assert_allclose(b[0][4:-4, 5:-4], a[0][4:-4, 4:-5], atol=1e-12)


def test_rasterize_ranges():
    x = np.random.default_rng(3).normal(size=(50, 3))
    grid = rasterize(x, UNIT, 32)
    assert grid.min() >= 0.0 and grid.max() <= 1.0


# -- proposals ---------------------------------------------------------------------------------

def test_smoothed_one_hot_rows():
    g = smoothed_one_hot(np.array([0, 2, 1]), 3)
    np.testing.assert_allclose(g.sum(axis=-1), 1.0)
    assert g[1, 2] == pytest.approx(0.9)


def test_clean_proposals_equal_truth(traj):
    props = corrupt_proposals(traj, 0.0, 0.0, seed=1, norm_stats=UNIT)
    np.testing.assert_allclose(props.positions, traj.positions.astype(np.float64))
    np.testing.assert_array_equal(props.hard_grouping(), traj.grouping)


def test_proposal_noise_level():
    rng = np.random.default_rng(4)
    traj = Trajectory(EnvKind.RIGIDFALL, np.array([-10.0], dtype=np.float32), np.zeros(500, dtype=np.uint32),
                      np.array([True]), rng.normal(size=(20, 500, 3)).astype(np.float32),
                      np.zeros((20, 3), dtype=np.float32))
    props = corrupt_proposals(traj, 0.05, 0.0, seed=2, norm_stats=UNIT)
    err = np.mean((props.positions - traj.positions.astype(np.float64)) ** 2)
    assert err == pytest.approx(0.05 ** 2, rel=0.1)


def test_flipped_labels_persist_over_time(traj):
    props = corrupt_proposals(traj, 0.0, 0.5, seed=3, norm_stats=UNIT)
    labels = props.grouping.argmax(axis=-1)
    assert np.all(labels == labels[0])
    np.testing.assert_allclose(props.grouping.sum(axis=-1), 1.0)


def test_proposal_sequence_validates_rows():
    with pytest.raises(ContractViolation):
        ProposalSequence(np.zeros((2, 3, 3)), np.full((2, 3, 2), 0.7))
    seq = ProposalSequence(np.zeros((5, 3, 3)), np.full((5, 3, 2), 0.5))
    assert seq.window(1, 3).n_steps == 3
