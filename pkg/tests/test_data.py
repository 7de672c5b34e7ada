import hashlib
import struct

import numpy as np
import pytest
import torch

from irisinvert.data import checkpoint as ck
from irisinvert.data.manifest import DatasetManifest, Record, SplitPolicy, load_image, save_image, split_train_test
from irisinvert.data.store import StoreFormatError, TemplateStore, load_store, save_store
from irisinvert.data.synthetic import SyntheticIrisSpec, eye_of, generate_synthetic_dataset, render_sample


# synthetic data

def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticIrisSpec(n_classes=1)
    with pytest.raises(ValueError):
        SyntheticIrisSpec(samples_per_class=1)
    with pytest.raises(ValueError):
        SyntheticIrisSpec(image_mode="polar")


def test_dataset_counts_and_determinism(tmp_path):
    spec = SyntheticIrisSpec(n_classes=4, samples_per_class=3)
    a = generate_synthetic_dataset(spec, tmp_path / "a")
    b = generate_synthetic_dataset(spec, tmp_path / "b")
    assert len(a) == 12 and len(list((tmp_path / "a" / "images").iterdir())) == 12
    for ra, rb in zip(a, b):
        assert (tmp_path / "a" / ra.path).read_bytes() == (tmp_path / "b" / rb.path).read_bytes()
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()


def test_twenty_by_ten_counts(tmp_path):
    m = generate_synthetic_dataset(SyntheticIrisSpec(n_classes=20, samples_per_class=10, shape=(32, 32)), tmp_path)
    assert len(m) == 200
    assert len(DatasetManifest.load(tmp_path / "manifest.csv")) == 200


def test_eye_assignment_alternates():
    assert [eye_of(c) for c in range(4)] == ["L", "R", "L", "R"]


def test_segmented_render_background_and_range():
    spec = SyntheticIrisSpec()
    img, geom = render_sample(spec, 0, 0)
    assert img.shape == (64, 64) and 0.0 <= img.min() and img.max() <= 1.0
    yy, xx = np.mgrid[0:64, 0:64]
    r = np.hypot(xx - geom.iris_x, yy - geom.iris_y)
    assert np.all(img[r > geom.iris_radius + 1.5] == 0.0)
    assert np.all(img[r < geom.pupil_radius - 1.5] == 0.0)
    assert np.all(img[(r > geom.pupil_radius + 1) & (r < geom.iris_radius - 1)] > 0.0)
    # 8-bit quantized
    np.testing.assert_array_equal(np.round(img * 255), img * 255)


def test_normalized_render_has_no_geometry():
    img, geom = render_sample(SyntheticIrisSpec(image_mode="normalized", shape=(32, 128)), 3, 1)
    assert geom is None and img.shape == (32, 128) and img.min() > 0


def test_classes_differ_more_than_samples():
    spec = SyntheticIrisSpec()
    a0, _ = render_sample(spec, 0, 0)
    a1, _ = render_sample(spec, 0, 1)
    b0, _ = render_sample(spec, 2, 0)
    assert np.abs(a0 - a1).mean() < np.abs(a0 - b0).mean()


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    with pytest.raises(OSError):
        generate_synthetic_dataset(SyntheticIrisSpec(n_classes=2, samples_per_class=2), blocker / "x")


# manifest and images

def test_image_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).random((9, 7)) * 255) / 255
    save_image(img, tmp_path / "sub" / "x.png")
    np.testing.assert_array_equal(load_image(tmp_path / "sub" / "x.png"), img)


def test_manifest_missing_path(tmp_path):
    m = generate_synthetic_dataset(SyntheticIrisSpec(n_classes=2, samples_per_class=2), tmp_path)
    (tmp_path / m.records[0].path).unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "manifest.csv")


def test_manifest_geometry_round_trip(tmp_path):
    m = generate_synthetic_dataset(SyntheticIrisSpec(n_classes=2, samples_per_class=2), tmp_path)
    back = DatasetManifest.load(tmp_path / "manifest.csv")
    assert [r.geometry for r in back] == [r.geometry for r in m]


# split

def fake_manifest(n_subjects, per_class):
    recs = []
    for s in range(n_subjects):
        for eye, cid in (("L", 2 * s), ("R", 2 * s + 1)):
            recs.extend(Record(f"{cid}_{i}.png", cid, eye, i) for i in range(per_class))
    return DatasetManifest(".", recs)


def test_split_arithmetic_k5():
    s = split_train_test(fake_manifest(3, 10), SplitPolicy(extractor_per_class=5))
    assert len(s.extractor) == 15 and len(s.inversion) == 15 and len(s.test) == 6
    for c in {r.class_id for r in s.extractor}:
        assert [r.sample_id for r in s.extractor if r.class_id == c] == [0, 1, 2, 3, 4]
    assert all(r.eye == "R" for r in s.test)


def test_split_partition_and_disjointness():
    m = fake_manifest(4, 12)
    s = split_train_test(m, SplitPolicy())
    keys = [r.key for part in (s.extractor, s.inversion, s.test) for r in part]
    assert len(keys) == len(set(keys))
    inv_classes = {(r.class_id, r.eye) for r in s.inversion}
    test_classes = {(r.class_id, r.eye) for r in s.test}
    assert not inv_classes & test_classes
    # desk split: 6 + 6 left images, round(0.2 * 12) = 2 right images
    assert len(s.inversion) == 4 * 6 and len(s.test) == 4 * 2


def test_split_insufficient_images():
    with pytest.raises(ValueError, match="needs more"):
        split_train_test(fake_manifest(2, 6), SplitPolicy(extractor_per_class=6))
    with pytest.raises(ValueError):
        split_train_test(fake_manifest(2, 2), SplitPolicy(extractor_per_class=1, test_fraction=0.2))


def test_split_tags_round_trip(tmp_path):
    m = generate_synthetic_dataset(SyntheticIrisSpec(n_classes=4, samples_per_class=8), tmp_path / "d")
    s = split_train_test(m, SplitPolicy(extractor_per_class=3))
    DatasetManifest(m.root, s.tagged()).save(tmp_path / "split.csv")
    from irisinvert.data.manifest import load_split
    back = load_split(tmp_path / "split.csv", tmp_path / "d")
    assert [r.key for r in back.test] == [r.key for r in s.test]
    assert [r.key for r in back.inversion] == [r.key for r in s.inversion]


# template store

def bit_store(n=5, dim=37):
    rng = np.random.default_rng(0)
    return TemplateStore(rng.integers(0, 2, (n, dim)), [(i, "LR"[i % 2], i * 3) for i in range(n)], "bit",
                         "hamming", False, "gabor", (1, 1, 1))


def f32_store(n=4, dim=8, pipeline="deep-segmented"):
    v = np.random.default_rng(1).normal(size=(n, dim)).astype(np.float32)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TemplateStore(v, [(i, "R", i) for i in range(n)], "f32", "cosine", True, pipeline)


@pytest.mark.parametrize("make", [bit_store, f32_store, lambda: f32_store(pipeline="deep-normalized"),
                                  lambda: f32_store(n=0)])
def test_store_round_trip(tmp_path, make):
    s = make()
    save_store(s, tmp_path / "s.rsts")
    back = load_store(tmp_path / "s.rsts")
    assert back.equals(s)
    save_store(back, tmp_path / "t.rsts")
    assert (tmp_path / "s.rsts").read_bytes() == (tmp_path / "t.rsts").read_bytes()


def test_store_header_layout(tmp_path):
    save_store(bit_store(3, 9), tmp_path / "s.rsts")
    raw = (tmp_path / "s.rsts").read_bytes()
    assert raw[:4] == b"RSTS"
    version, dtype, dim, count, dist, norm = struct.unpack("<HBIIBB", raw[4:17])
    assert (version, dtype, dim, count, dist, norm) == (1, 0, 9, 3, 1, 0)


def test_store_truncation_names_offset(tmp_path):
    save_store(bit_store(), tmp_path / "s.rsts")
    raw = (tmp_path / "s.rsts").read_bytes()
    (tmp_path / "t.rsts").write_bytes(raw[:30])
    with pytest.raises(StoreFormatError, match="byte offset 30"):
        load_store(tmp_path / "t.rsts")


@pytest.mark.parametrize("pos,msg", [(0, "magic"), (4, "version"), (6, "dtype"), (20, "checksum")])
def test_store_corruption_rejected(tmp_path, pos, msg):
    save_store(f32_store(), tmp_path / "s.rsts")
    raw = bytearray((tmp_path / "s.rsts").read_bytes())
    raw[pos] ^= 0x5A
    (tmp_path / "c.rsts").write_bytes(bytes(raw))
    with pytest.raises(StoreFormatError, match=msg):
        load_store(tmp_path / "c.rsts")


def test_store_invariants():
    with pytest.raises(ValueError, match="duplicate"):
        TemplateStore(np.zeros((2, 3)), [(0, "L", 0), (0, "L", 0)])
    with pytest.raises(ValueError):
        TemplateStore(np.full((1, 3), 2), [(0, "L", 0)], "bit", "hamming")
    with pytest.raises(ValueError):
        TemplateStore(np.zeros((2, 3)), [(0, "L", 0)])


def test_store_subset_and_float_view():
    s = bit_store()
    sub = s.subset([s.keys[3], s.keys[1]])
    assert sub.keys == [s.keys[3], s.keys[1]]
    assert sub.as_float().dtype == np.float32 and set(np.unique(sub.as_float())) <= {0.0, 1.0}


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "d": np.array([1.5, -2.0]),
               "n": np.array([3, 4], dtype=np.int64), "i": np.array([7], dtype=np.int32),
               "flag": np.array([True, False]), "t": torch.ones(2, 2)}
    cfg = {"a": 1, "b": [1, 2]}
    ck.save_checkpoint(tmp_path / "c.rstc", "generator", cfg, tensors)
    back = ck.load_checkpoint(tmp_path / "c.rstc", "generator", cfg)
    assert back.module_id == "generator" and back.config == cfg
    for k, v in tensors.items():
        v = v.numpy() if isinstance(v, torch.Tensor) else v
        np.testing.assert_array_equal(back.tensors[k], v.astype(np.uint8) if v.dtype == bool else v)
        if v.dtype != bool:
            assert back.tensors[k].dtype == v.dtype
    assert back.config_hash == hashlib.sha256(ck.canonical_json(cfg)).digest()


def test_checkpoint_module_round_trip(tmp_path):
    net = torch.nn.Sequential(torch.nn.Linear(3, 2), torch.nn.BatchNorm1d(2))
    net(torch.randn(4, 3))
    ck.save_module(tmp_path / "m.rstc", "m", {}, net)
    other = torch.nn.Sequential(torch.nn.Linear(3, 2), torch.nn.BatchNorm1d(2))
    ck.load_into(other, ck.load_checkpoint(tmp_path / "m.rstc"))
    for (k, a), (_, b) in zip(net.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_config_mismatch(tmp_path):
    ck.save_checkpoint(tmp_path / "c.rstc", "g", {"w": 1}, {"x": np.zeros(2)})
    with pytest.raises(ck.CheckpointError, match="config hash mismatch"):
        ck.load_checkpoint(tmp_path / "c.rstc", config={"w": 2})
    assert ck.load_checkpoint(tmp_path / "c.rstc", config={"w": 2}, allow_config_mismatch=True).config == {"w": 1}
    with pytest.raises(ck.CheckpointError, match="expected"):
        ck.load_checkpoint(tmp_path / "c.rstc", module_id="d")


@pytest.mark.parametrize("pos", [0, 5, 12, 60, -1])
def test_checkpoint_corruption_rejected(tmp_path, pos):
    ck.save_checkpoint(tmp_path / "c.rstc", "g", {"w": 1}, {"x": np.arange(4.0)})
    raw = bytearray((tmp_path / "c.rstc").read_bytes())
    raw[pos] ^= 0x01
    (tmp_path / "bad.rstc").write_bytes(bytes(raw))
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(tmp_path / "bad.rstc")


def test_checkpoint_truncated(tmp_path):
    ck.save_checkpoint(tmp_path / "c.rstc", "g", {}, {"x": np.arange(4.0)})
    raw = (tmp_path / "c.rstc").read_bytes()
    (tmp_path / "t.rstc").write_bytes(raw[:20])
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.load_checkpoint(tmp_path / "t.rstc")


def test_checkpoint_unsupported_dtype(tmp_path):
    with pytest.raises(ck.CheckpointError):
        ck.save_checkpoint(tmp_path / "c.rstc", "g", {}, {"x": np.zeros(2, dtype=np.complex64)})
