import numpy as np
import pytest
from scipy.spatial.distance import pdist

from pointpeft.data import (CLASSES, PointCloud, augment, manifest_checksum, read_dataset, read_xyz,
                            synth_dataset, write_dataset, write_xyz)


def test_same_seed_is_bitwise_identical():
    a = synth_dataset(2, 64, seed=3)
    b = synth_dataset(2, 64, seed=3)
    assert [p.id for p in a] == [p.id for p in b]
    assert all(x.coords.tobytes() == y.coords.tobytes() for x, y in zip(a, b))
    c = synth_dataset(2, 64, seed=4)
    assert any(x.coords.tobytes() != y.coords.tobytes() for x, y in zip(a, c))


def test_splits_differ_and_labels_cover_classes():
    tr, te = synth_dataset(2, 32, 0, "train"), synth_dataset(2, 32, 0, "test")
    assert tr[0].coords.tobytes() != te[0].coords.tobytes()
    assert sorted({p.label for p in tr}) == list(range(len(CLASSES)))
    assert len(tr) == 2 * len(CLASSES)


def test_every_sample_is_unit_sphere_normalised():
    for pc in synth_dataset(3, 128, seed=1):
        assert pc.coords.shape == (128, 3)
        np.testing.assert_allclose(pc.coords.mean(axis=0), 0.0, atol=1e-12)
        assert np.linalg.norm(pc.coords, axis=1).max() == pytest.approx(1.0, abs=1e-12)


def test_sphere_radii_are_one():
    for pc in synth_dataset(3, 101, seed=2, classes=1):
        np.testing.assert_allclose(np.linalg.norm(pc.coords, axis=1), 1.0, atol=1e-5)


def test_nearest_centroid_floor_is_below_perfect():
    # trivial classifier on raw sorted radii; records that the task is not degenerate
    tr, te = synth_dataset(20, 128, 0, "train"), synth_dataset(10, 128, 0, "test")

    def feat(pc):
        return np.sort(np.linalg.norm(pc.coords, axis=1))

    Xtr = np.stack([feat(p) for p in tr])
    ytr = np.array([p.label for p in tr])
    cents = np.stack([Xtr[ytr == c].mean(axis=0) for c in range(len(CLASSES))])
    Xte = np.stack([feat(p) for p in te])
    pred = ((Xte[:, None] - cents[None]) ** 2).sum(-1).argmin(1)
    acc = (pred == np.array([p.label for p in te])).mean()
    assert 1.0 / len(CLASSES) < acc < 1.0

    # raw coordinates carry no rotation-invariant signal at all
    Xtr_raw = np.stack([p.coords.ravel() for p in tr])
    cents_raw = np.stack([Xtr_raw[ytr == c].mean(axis=0) for c in range(len(CLASSES))])
    pred_raw = ((np.stack([p.coords.ravel() for p in te])[:, None] - cents_raw[None]) ** 2).sum(-1).argmin(1)
    assert (pred_raw == np.array([p.label for p in te])).mean() < 1.0


def test_augment_identity_and_label():
    pc = synth_dataset(1, 32, 0)[0]
    assert augment(pc, "none", np.random.default_rng(0)) is pc
    out = augment(pc, "default", np.random.default_rng(0))
    assert out.label == pc.label and out.id == pc.id
    rng = np.random.default_rng(0)
    s, t = rng.uniform(0.8, 1.2), rng.uniform(-0.1, 0.1, size=3)
    np.testing.assert_allclose(out.coords, pc.coords * s + t)
    with pytest.raises(ValueError):
        augment(pc, "wild", rng)


def test_augment_default_bounds():
    pc = synth_dataset(1, 32, 0)[0]
    rng = np.random.default_rng(1)
    for _ in range(50):
        out = augment(pc, "default", rng).coords
        ratio = pdist(out) / pdist(pc.coords)
        assert np.allclose(ratio, ratio[0]) and 0.8 <= ratio[0] <= 1.2
        shift = out.mean(0) - pc.coords.mean(0) * ratio[0]
        assert np.abs(shift).max() <= 0.1 + 1e-12


def test_strong_rotation_preserves_shape():
    pc = synth_dataset(1, 64, 0)[0]
    out = augment(pc, "strong", np.random.default_rng(5)).coords
    ratio = pdist(out) / pdist(pc.coords)
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-5)


def test_xyz_round_trip(tmp_path):
    coords = np.array([[0.1234567, -1.0, 2.5], [0.0, 0.0, 0.0]])
    write_xyz(tmp_path / "a.xyz", coords)
    assert (tmp_path / "a.xyz").read_text() == "0.123457 -1.000000 2.500000\n0.000000 0.000000 0.000000\n"
    np.testing.assert_allclose(read_xyz(tmp_path / "a.xyz"), coords, atol=5e-7)


def test_dataset_round_trip_and_manifest(tmp_path):
    tr, te = synth_dataset(1, 16, 0, "train", classes=2), synth_dataset(1, 16, 0, "test", classes=2)
    root = write_dataset(tmp_path / "d", tr, te)
    lines = (root / "manifest.tsv").read_text().splitlines()
    assert lines[0] == "path\tlabel\tsplit" and len(lines) == 5
    back = read_dataset(root)
    assert [p.label for p in back["train"]] == [p.label for p in tr]
    assert [p.id for p in back["test"]] == [p.id for p in te]
    np.testing.assert_allclose(back["train"][0].coords, tr[0].coords, atol=5e-7)
    digest = manifest_checksum(root)
    assert len(digest) == 64
    root2 = write_dataset(tmp_path / "e", tr, te)
    assert manifest_checksum(root2) == digest


def test_write_refuses_non_empty_directory(tmp_path):
    (tmp_path / "junk").write_text("x")
    pcs = [PointCloud(np.zeros((2, 3)), 0, "train/x")]
    with pytest.raises(FileExistsError):
        write_dataset(tmp_path, pcs, [])
    write_dataset(tmp_path, pcs, [], force=True)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)
