"""Image formats, checkpoint round-trips, and generator determinism."""

import hashlib
import os

import numpy as np
import pytest

from anchornet import netpbm, synth, weights
from anchornet.model import (
    ArchSpec,
    DownLayerSpec,
    StageSpec,
    build_anchornet,
    build_downstream,
)
from anchornet.weights import WeightFormatError

SMALL_SPEC = ArchSpec(
    (StageSpec("conv", 4, 2, 3), StageSpec("mbconv", 4, 1, 3, 1.5)),
    head_channels=8,
    num_classes=3,
)


class TestNetpbm:
    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(81)
        pixels = rng.integers(0, 256, size=(13, 17, 3), dtype=np.uint8)
        path = str(tmp_path / "img.ppm")
        netpbm.write_ppm(path, pixels)
        np.testing.assert_array_equal(netpbm.read_ppm(path), pixels)

    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(82)
        pixels = rng.integers(0, 256, size=(9, 6), dtype=np.uint8)
        path = str(tmp_path / "img.pgm")
        netpbm.write_pgm(path, pixels)
        np.testing.assert_array_equal(netpbm.read_pgm(path), pixels)

    def test_header_conforms(self, tmp_path):
        path = str(tmp_path / "img.ppm")
        netpbm.write_ppm(path, np.zeros((2, 3, 3), dtype=np.uint8))
        with open(path, "rb") as fh:
            data = fh.read()
        assert data.startswith(b"P6\n3 2\n255\n")
        assert len(data) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3

    def test_reader_accepts_comments_and_whitespace(self, tmp_path):
        path = str(tmp_path / "odd.pgm")
        payload = bytes(range(6))
        with open(path, "wb") as fh:
            fh.write(b"P5\n# a comment\n 3\t2 # trailing\n255\n" + payload)
        out = netpbm.read_pgm(path)
        np.testing.assert_array_equal(out, np.frombuffer(payload, np.uint8).reshape(2, 3))

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.ppm")
        with open(path, "wb") as fh:
            fh.write(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(netpbm.NetpbmError):
            netpbm.read_ppm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = str(tmp_path / "short.pgm")
        with open(path, "wb") as fh:
            fh.write(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(netpbm.NetpbmError):
            netpbm.read_pgm(path)

    def test_float_conversion_roundtrip(self):
        rng = np.random.default_rng(83)
        img = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        back = netpbm.chw_float_to_hwc_u8(netpbm.hwc_u8_to_chw_float(img))
        np.testing.assert_array_equal(back, img)


class TestWeightFiles:
    @pytest.mark.parametrize("kind", ["anchornet", "downstream"])
    def test_roundtrip_bit_exact(self, tmp_path, kind):
        if kind == "anchornet":
            m = build_anchornet(SMALL_SPEC, seed=31)
        else:
            m = build_downstream(3, seed=31, variant="local",
                                 layers=(DownLayerSpec(4, 2), DownLayerSpec(4, 1)))
        # give running stats non-trivial values
        for _, bn in m.batchnorms():
            bn.running_mean += 0.25
            bn.running_var *= 1.5
        path = str(tmp_path / "m.anet")
        weights.save_model(m, path)
        loaded = weights.load_model(path)
        assert loaded.trained
        for (na, pa, _), (nb, pb, _) in zip(m.parameters(), loaded.parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        for (na, a), (nb, b) in zip(m.batchnorms(), loaded.batchnorms()):
            np.testing.assert_array_equal(a.running_mean, b.running_mean)
            np.testing.assert_array_equal(a.running_var, b.running_var)
        if kind == "downstream":
            assert loaded.variant == "local"

    def test_save_load_save_identical_bytes(self, tmp_path):
        m = build_anchornet(SMALL_SPEC, seed=32)
        p1, p2 = str(tmp_path / "a.anet"), str(tmp_path / "b.anet")
        weights.save_model(m, p1)
        weights.save_model(weights.load_model(p1), p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            assert f1.read() == f2.read()

    def test_unknown_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bogus.anet")
        with open(path, "wb") as fh:
            fh.write(b"NOTME\n" + b"\x00" * 64)
        with pytest.raises(WeightFormatError):
            weights.load_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        m = build_anchornet(SMALL_SPEC, seed=33)
        path = str(tmp_path / "m.anet")
        weights.save_model(m, path)
        with open(path, "rb") as fh:
            data = fh.read()
        with open(path, "wb") as fh:
            fh.write(data[: len(data) - 40])
        with pytest.raises(WeightFormatError):
            weights.load_model(path)


def tree_digest(root):
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


class TestSyntheticGenerator:
    def test_same_seed_byte_identical_trees(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        synth.generate_synthetic(4, 3, seed=7, out_dir=a)
        synth.generate_synthetic(4, 3, seed=7, out_dir=b)
        assert tree_digest(a) == tree_digest(b)

    def test_different_seed_differs(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        synth.generate_synthetic(4, 2, seed=7, out_dir=a)
        synth.generate_synthetic(4, 2, seed=8, out_dir=b)
        assert tree_digest(a) != tree_digest(b)

    def test_boxes_fit_in_proposal_window(self):
        ds = synth.make_dataset(4, 6, seed=9)
        for box in ds.boxes:
            assert box.height <= 95 and box.width <= 95
            assert box.bottom <= 224 and box.right <= 224

    def test_balanced_labels(self):
        ds = synth.make_dataset(4, 5, seed=10)
        assert np.bincount(ds.labels).tolist() == [5, 5, 5, 5]

    def test_class_conditional_statistics_differ(self):
        # Orientation pairs separate by gradient direction, period pairs by
        # gradient magnitude along the stripe axis.
        ds = synth.make_dataset(4, 12, seed=11)
        stats = {c: [] for c in range(4)}
        for i in range(len(ds)):
            box = ds.boxes[i]
            img = ds.batch_float([i])[0][0]
            obj = img[box.top : box.bottom, box.left : box.right]
            gx = np.abs(np.diff(obj, axis=1)).mean()
            gy = np.abs(np.diff(obj, axis=0)).mean()
            stats[int(ds.labels[i])].append((gx, gy))
        mean = {c: np.mean(stats[c], axis=0) for c in range(4)}
        assert mean[0][0] > 2.0 * mean[0][1]  # vertical stripes: gx dominates
        assert mean[2][1] > 2.0 * mean[2][0]  # horizontal stripes: gy dominates
        assert mean[0][0] > 1.15 * mean[1][0]  # finer period, larger gradient
        assert mean[2][1] > 1.15 * mean[3][1]

    def test_disk_roundtrip_equals_memory(self, tmp_path):
        out = str(tmp_path / "ds")
        ds = synth.generate_synthetic(3, 2, seed=12, out_dir=out)
        loaded = synth.load_dataset(out)
        np.testing.assert_array_equal(loaded.images, ds.images)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.boxes == ds.boxes

    def test_num_classes_validated(self):
        with pytest.raises(ValueError):
            synth.make_sample(1, 0, 0)
        with pytest.raises(ValueError):
            synth.make_sample(99, 0, 0)
