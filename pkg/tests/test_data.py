import struct

import numpy as np
import pytest

from metauap import data as D


def write_idx_pair(tmp_path, images_u8, labels_u8):
    n, h, w = images_u8.shape
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images_u8.tobytes())
    lbl_path.write_bytes(struct.pack(">II", 0x801, n) + labels_u8.tobytes())
    return img_path, lbl_path


class TestIdx:
    def test_two_image_fixture(self, tmp_path):
        imgs = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
        img_p, lbl_p = write_idx_pair(tmp_path, imgs, np.array([3, 7], dtype=np.uint8))
        out = D.load_idx(img_p, lbl_p)
        assert out.images.shape == (2, 1, 28, 28)
        assert list(out.labels) == [3, 7]

    def test_pixel_scaling(self, tmp_path):
        imgs = np.zeros((1, 2, 2), dtype=np.uint8)
        imgs[0, 0, 0] = 255
        img_p, lbl_p = write_idx_pair(tmp_path, imgs, np.array([0], dtype=np.uint8))
        out = D.load_idx(img_p, lbl_p)
        assert out.images[0, 0, 0, 0] == 1.0
        assert out.images[0, 0, 1, 1] == 0.0

    def test_count_mismatch(self, tmp_path):
        imgs = np.zeros((2, 4, 4), dtype=np.uint8)
        img_p, lbl_p = write_idx_pair(tmp_path, imgs, np.array([0, 1], dtype=np.uint8))
        lbl_p.write_bytes(struct.pack(">II", 0x801, 3) + b"\x00\x01\x02")
        with pytest.raises(D.DataFormatError, match="label count"):
            D.load_idx(img_p, lbl_p)

    def test_bad_magic(self, tmp_path):
        imgs = np.zeros((1, 2, 2), dtype=np.uint8)
        img_p, lbl_p = write_idx_pair(tmp_path, imgs, np.array([0], dtype=np.uint8))
        img_p.write_bytes(b"\x00\x00\x08\x04" + img_p.read_bytes()[4:])
        with pytest.raises(D.DataFormatError, match="magic"):
            D.load_idx(img_p, lbl_p)

    def test_truncated_payload(self, tmp_path):
        imgs = np.zeros((2, 4, 4), dtype=np.uint8)
        img_p, lbl_p = write_idx_pair(tmp_path, imgs, np.array([0, 1], dtype=np.uint8))
        img_p.write_bytes(img_p.read_bytes()[:-5])
        with pytest.raises(D.DataFormatError, match="truncated"):
            D.load_idx(img_p, lbl_p)

    def test_order_preserved(self, tmp_path):
        imgs = np.stack([np.full((4, 4), v, dtype=np.uint8) for v in (10, 20, 30)])
        img_p, lbl_p = write_idx_pair(tmp_path, imgs, np.array([0, 1, 2], dtype=np.uint8))
        out = D.load_idx(img_p, lbl_p)
        np.testing.assert_allclose(out.images[:, 0, 0, 0], [10 / 255, 20 / 255, 30 / 255])


class TestCifar:
    def make_record(self, label, value):
        return bytes([label]) + bytes([value] * 3072)

    def test_two_record_fixture(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(self.make_record(1, 5) + self.make_record(9, 200))
        out = D.load_cifar10_bin(path)
        assert out.images.shape == (2, 3, 32, 32)
        assert list(out.labels) == [1, 9]

    def test_invalid_label(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(self.make_record(11, 0))
        with pytest.raises(D.DataFormatError, match="label byte 11"):
            D.load_cifar10_bin(path)

    def test_bad_length(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(self.make_record(0, 0)[:-1])
        with pytest.raises(D.DataFormatError, match="multiple"):
            D.load_cifar10_bin(path)

    def test_pixel_roundtrip(self, tmp_path):
        path = tmp_path / "batch.bin"
        rec = bytearray(self.make_record(4, 0))
        rec[1] = 77  # red channel, pixel (0, 0)
        path.write_bytes(bytes(rec))
        out = D.load_cifar10_bin(path)
        assert out.images[0, 0, 0, 0] == np.float32(77 / 255)


class TestSynth:
    def test_construction_balanced(self):
        out = D.synth_source((1, 28, 28), 2, 10, seed=0)
        assert len(out) == 20
        assert (out.labels == 0).sum() == 10 and (out.labels == 1).sum() == 10
        assert out.images.min() >= 0.0 and out.images.max() <= 1.0

    def test_deterministic(self):
        a = D.synth_source((3, 16, 16), 3, 5, seed=42)
        b = D.synth_source((3, 16, 16), 3, 5, seed=42)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_linear_separability_oracle(self):
        pool = D.synth_source((1, 28, 28), 10, 20, seed=7)
        assert D.linear_probe_accuracy(pool) >= 0.95

    def test_mlp_trains_to_95(self):
        from metauap.victims import VictimArch, train_victim
        # style variation off: the plainest linearly separable instance
        pool = D.synth_source((1, 12, 12), 2, 60, seed=3,
                              phase_jitter=0.0, noise_smoothing=0)
        assert D.linear_probe_accuracy(pool) >= 0.95  # oracle first
        model = train_victim(VictimArch("mlp_tiny", (1, 12, 12), 2), pool,
                             epochs=5, seed=1)
        assert model.train_accuracy >= 0.95

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            D.synth_source((1, 8, 8), 1, 4, seed=0)


def test_labeled_images_validation():
    with pytest.raises(D.DataFormatError, match="labels"):
        D.LabeledImages(np.zeros((2, 1, 2, 2), dtype=np.float32),
                        np.array([0]), source_id="x")
    with pytest.raises(D.DataFormatError, match=r"\[0, 1\]"):
        D.LabeledImages(np.full((1, 1, 2, 2), 1.5, dtype=np.float32),
                        np.array([0]), source_id="x")
