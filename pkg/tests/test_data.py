import json
import struct

import numpy as np
import pytest

from lcnn.checkpoint import CheckpointError, load_checkpoint, manifest_and_blob, save_checkpoint
from lcnn.data import (
    Dataset,
    IDXFormatError,
    digits,
    load_idx,
    moon_arcs,
    moons_split,
    train_test_split,
    two_moons,
    write_idx,
)
from lcnn.model import ArchOptions, cnn_small, mlp_small
from lcnn.training import TrainConfig, train


# -- two moons -------------------------------------------------------------------------------


def test_noise_free_moons_lie_on_arcs():
    ds = two_moons(200, noise_std=0.0, seed=3)
    upper, lower = ds.inputs[ds.labels == 0], ds.inputs[ds.labels == 1]
    assert len(upper) == len(lower) == 100
    assert np.max(np.abs(np.hypot(upper[:, 0], upper[:, 1]) - 1.0)) < 1e-12
    assert np.max(np.abs(np.hypot(lower[:, 0] - 0.5, lower[:, 1] + 0.25) - 1.0)) < 1e-12
    assert np.all(upper[:, 1] >= -1e-12) and np.all(lower[:, 1] <= -0.25 + 1e-12)


def test_moon_arcs_endpoints():
    up, lo = moon_arcs(np.array([0.0, np.pi]))
    np.testing.assert_allclose(up, [[1, 0], [-1, 0]], atol=1e-15)
    np.testing.assert_allclose(lo, [[1.5, -0.25], [-0.5, -0.25]], atol=1e-15)


def test_moons_deterministic_and_seeded():
    a, b = two_moons(100, seed=1), two_moons(100, seed=1)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, two_moons(100, seed=2).inputs)
    train_set, test_set = moons_split(50, 50, seed=0)
    assert not np.array_equal(train_set.inputs, test_set.inputs)


@pytest.mark.parametrize("n", [0, -4, 7])
def test_moons_rejects_bad_size(n):
    with pytest.raises(ValueError):
        two_moons(n)


def test_moons_learnable_by_small_mlp():
    train_set, test_set = moons_split(2000, 500, 0.1, seed=0)
    mean, std = train_set.inputs.mean(0), train_set.inputs.std(0)
    train_set, test_set = train_set.standardized(mean, std), test_set.standardized(mean, std)
    m = mlp_small(2, 2, ArchOptions(spectral=False, gamma_bn=False), hidden=(32, 32), seed=0)
    train(m, train_set, test_set, TrainConfig(epochs=5, batch_size=64))
    assert m.accuracy(train_set.inputs, train_set.labels) > 0.95


# -- datasets --------------------------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), np.zeros(0, int), "train", 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2, int), "train", 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), "train", 2)


def test_batches_cover_everything_once():
    ds = Dataset(np.arange(10.0)[:, None], np.zeros(10, int), "train", 1)
    seen = np.concatenate([x[:, 0] for x, _ in ds.batches(3, np.random.default_rng(0))])
    assert sorted(seen) == list(range(10))


def test_split_is_disjoint_and_complete():
    ds = Dataset(np.arange(30.0)[:, None], np.arange(30) % 3, "all", 3)
    a, b = train_test_split(ds, 1 / 3, seed=0)
    assert len(b) == 10 and len(a) == 20
    assert sorted(np.concatenate([a.inputs[:, 0], b.inputs[:, 0]])) == list(range(30))


def test_digits_shape_and_range():
    train_set, test_set = digits()
    assert train_set.input_shape == (1, 8, 8) and train_set.num_classes == 10
    assert len(train_set) + len(test_set) == 1797
    assert train_set.inputs.min() >= 0 and train_set.inputs.max() <= 1


# -- IDX -------------------------------------------------------------------------------------


def _idx_pair(tmp_path):
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(img, lab, np.array([[[0, 255], [51, 102]], [[255, 0], [0, 0]]]), np.array([3, 1]))
    return img, lab


def test_idx_fixture_reads_back(tmp_path):
    img, lab = _idx_pair(tmp_path)
    raw = img.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03" and struct.unpack(">3I", raw[4:16]) == (2, 2, 2)
    ds = load_idx(img, lab, num_classes=10)
    assert ds.inputs.shape == (2, 1, 2, 2)
    np.testing.assert_allclose(ds.inputs[0, 0], [[0.0, 1.0], [0.2, 0.4]], atol=1e-15)
    assert ds.labels.tolist() == [3, 1]


def test_idx_wrong_magic(tmp_path):
    img, lab = _idx_pair(tmp_path)
    with pytest.raises(IDXFormatError, match="magic"):
        load_idx(lab, img)


def test_idx_truncated_and_empty(tmp_path):
    img, lab = _idx_pair(tmp_path)
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(IDXFormatError, match="truncated"):
        load_idx(img, lab)
    img.write_bytes(b"")
    with pytest.raises(IDXFormatError):
        load_idx(img, lab)
    img.write_bytes(img.read_bytes() + b"\x00\x00")
    with pytest.raises(IDXFormatError):
        load_idx(img, lab)


def test_idx_trailing_bytes(tmp_path):
    img, lab = _idx_pair(tmp_path)
    lab.write_bytes(lab.read_bytes() + b"\x00")
    with pytest.raises(IDXFormatError, match="trailing"):
        load_idx(img, lab)


def test_idx_count_mismatch(tmp_path):
    _, lab = _idx_pair(tmp_path)
    write_idx(tmp_path / "x", tmp_path / "y", np.zeros((1, 2, 2)), np.array([3, 1]))
    with pytest.raises(IDXFormatError, match="labels"):
        load_idx(tmp_path / "x", lab)


# -- checkpoints -----------------------------------------------------------------------------


def _trained_cnn():
    train_set, test_set = digits()
    m = cnn_small((1, 8, 8), 10, ArchOptions(beta=5.0, gamma=1.0), channels=(4, 4), seed=0)
    small = train_set.subset(np.arange(128))
    train(m, small, None, TrainConfig(epochs=1, batch_size=32, lambda_beta=1e-4,
                                      lambda_gamma=1e-5), refine_steps=10)
    return m, test_set.inputs[:20]


def test_checkpoint_round_trip(tmp_path):
    m, x = _trained_cnn()
    save_checkpoint(m, tmp_path / "a", {"variant": "lcnn"})
    m2, meta = load_checkpoint(tmp_path / "a.json")
    assert meta == {"variant": "lcnn"}
    save_checkpoint(m2, tmp_path / "b", {"variant": "lcnn"})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    out1, out2 = m(x, training=False).data, m2(x, training=False).data
    assert np.max(np.abs(out1 - out2)) <= 1e-6 * max(1.0, np.max(np.abs(out1)))
    assert m2.betas() == m.betas() and m2.gammas() == m.gammas()


def test_checkpoint_truncated_blob(tmp_path):
    m = mlp_small(2, 2, hidden=(4,), seed=0)
    save_checkpoint(m, tmp_path / "c")
    blob = tmp_path / "c.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_shape_mismatch(tmp_path):
    m = mlp_small(2, 2, hidden=(4,), seed=0)
    save_checkpoint(m, tmp_path / "c")
    man = json.loads((tmp_path / "c.json").read_text())
    man["tensors"][0]["shape"] = [2, 4]
    (tmp_path / "c.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_version_mismatch(tmp_path):
    m = mlp_small(2, 2, hidden=(4,), seed=0)
    save_checkpoint(m, tmp_path / "c")
    man = json.loads((tmp_path / "c.json").read_text())
    man["format_version"] = 99
    (tmp_path / "c.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_missing_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
    m = mlp_small(2, 2, hidden=(4,), seed=0)
    save_checkpoint(m, tmp_path / "c")
    (tmp_path / "c.bin").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_manifest_is_deterministic():
    m = mlp_small(2, 3, hidden=(4,), seed=0)
    assert manifest_and_blob(m) == manifest_and_blob(m)
