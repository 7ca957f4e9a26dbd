import struct

import numpy as np
import pytest

from coretokens import data
from coretokens.errors import ContractError, FormatError


def _idx_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    data.write_idx(ip, images)
    data.write_idx(lp, labels)
    return ip, lp


class TestIdx:
    def test_header_and_count(self, tmp_path):
        imgs = np.arange(2 * 28 * 28, dtype=np.uint64).reshape(2, 28, 28).astype(np.uint8)
        ip, lp = _idx_pair(tmp_path, imgs, np.array([3, 7], dtype=np.uint8))
        raw = ip.read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x00000803, 2, 28, 28)
        ds = data.load_idx(ip, lp)
        assert ds.images.shape == (2, 28, 28)
        np.testing.assert_array_equal(ds.images, imgs / 255.0)
        assert ds.labels.tolist() == [3, 7]

    def test_all_zero_image(self, tmp_path):
        ip, lp = _idx_pair(tmp_path, np.zeros((1, 28, 28), np.uint8), np.zeros(1, np.uint8))
        assert not data.load_idx(ip, lp).images.any()

    def test_scaled_to_unit_interval(self, tmp_path):
        ip, lp = _idx_pair(tmp_path, np.full((1, 4, 4), 255, np.uint8), np.zeros(1, np.uint8))
        assert data.load_idx(ip, lp).images.max() == 1.0

    def test_truncated_payload(self, tmp_path):
        ip, lp = _idx_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8))
        ip.write_bytes(ip.read_bytes()[:-10])
        with pytest.raises(FormatError, match="expected 1568 bytes.*found 1558"):
            data.load_idx(ip, lp)

    def test_bad_magic(self, tmp_path):
        ip, lp = _idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
        with pytest.raises(FormatError, match="magic"):
            data.load_idx(lp, ip)

    def test_count_mismatch(self, tmp_path):
        ip, lp = _idx_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
        with pytest.raises(FormatError, match="3 images but 2 labels"):
            data.load_idx(ip, lp)

    def test_gzip(self, tmp_path):
        import gzip
        ip, lp = _idx_pair(tmp_path, np.ones((1, 2, 2), np.uint8), np.ones(1, np.uint8))
        gz = tmp_path / "img.idx.gz"
        gz.write_bytes(gzip.compress(ip.read_bytes()))
        assert data.load_idx(gz, lp).images.shape == (1, 2, 2)

    def test_writer_rejects_floats(self, tmp_path):
        with pytest.raises(ContractError):
            data.write_idx(tmp_path / "x", np.zeros((1, 2, 2)))

    def test_cache_round_trip(self, tmp_path):
        ds = data.gen_synthetic(3, 4, 0)
        data.save_cache(tmp_path / "c.npz", ds)
        back = data.load_cache(tmp_path / "c.npz")
        assert back.images.tobytes() == ds.images.tobytes()
        np.testing.assert_array_equal(back.support, ds.support)

    def test_cache_garbage(self, tmp_path):
        (tmp_path / "c.npz").write_bytes(b"nope")
        with pytest.raises(FormatError):
            data.load_cache(tmp_path / "c.npz")


class TestSynthetic:
    def test_same_seed(self):
        a, b = data.gen_synthetic(4, 5, 11), data.gen_synthetic(4, 5, 11)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tolist() == b.labels.tolist()

    def test_balanced_labels(self):
        ds = data.gen_synthetic(10, 7, 0)
        assert np.bincount(ds.labels).tolist() == [7] * 10

    def test_glyphs_distinct(self):
        flat = {g.tobytes() for g in data.GLYPHS}
        assert len(flat) == len(data.GLYPHS) == 10

    def test_shape_covers_minority_of_patches(self):
        ds = data.gen_synthetic(10, 30, 1)
        frac = data.patch_support(ds.support).mean(axis=1)
        assert frac.max() < 0.3

    def test_noise_level(self):
        ds = data.gen_synthetic(2, 200, 2)
        background = ds.images[~ds.support]
        assert abs(background.std() - 0.1) < 0.005
        assert abs(background.mean()) < 0.005

    def test_noiseless_linear_probe_separates(self):
        # a least-squares probe on pixels plus position-invariant row/column sums
        ds = data.gen_synthetic(2, 60, 3, noise=0.0)
        feats = np.concatenate([ds.images.sum(axis=1), ds.images.sum(axis=2)], axis=1)
        feats = np.concatenate([np.sort(feats[:, :28], axis=1), np.sort(feats[:, 28:], axis=1),
                                np.ones((len(ds), 1))], axis=1)
        target = 2.0 * ds.labels - 1
        w, *_ = np.linalg.lstsq(feats, target, rcond=None)
        assert np.all(np.sign(feats @ w) == target)

    def test_patches(self):
        ds = data.gen_synthetic(2, 3, 0)
        assert ds.patches().shape == (6, 16, 49)

    @pytest.mark.parametrize("k", [1, 11])
    def test_class_range(self, k):
        with pytest.raises(ContractError):
            data.gen_synthetic(k, 5, 0)

    def test_each_copy_fills_one_patch(self):
        ds = data.gen_synthetic(10, 20, 4, noise=0.0)
        p = ds.patches()
        on = data.patch_support(ds.support)
        assert np.all(on.sum(axis=1) == 4)
        for x, flags, lab in zip(p, on, ds.labels):
            motif = data.MOTIFS[lab]
            for tok in x[flags]:
                # the patch holds one whole motif, shifted by at most one pixel
                img = tok.reshape(7, 7)
                assert img.sum() == motif.sum()

    def test_patterns_avoid_glyphs(self):
        ds = data.gen_patterns(5, 4, 0)
        assert np.bincount(ds.labels).tolist() == [4] * 5
        assert data.patch_support(ds.support).sum(axis=1).max() <= 4
