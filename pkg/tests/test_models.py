import struct

import numpy as np
import pytest

from spurscope import tensor as T
from spurscope.checkpoint import MAGIC, ArchitectureError, FormatError, read_checkpoint, write_checkpoint
from spurscope.models import (
    ConfigError,
    SmallCnnConfig,
    SmallVitConfig,
    build_model,
    checkpoint_io,
    encode,
    forward_with_trace,
    load_model,
    save_model,
)
from spurscope.tensor import DimensionError, Tape, Tensor


@pytest.fixture(scope="module")
def cnn():
    return build_model(SmallCnnConfig(), seed=0)


@pytest.fixture(scope="module")
def vit():
    return build_model(SmallVitConfig(), seed=0)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(0, 1, (5, 3, 32, 32)).astype(np.float32)


def cnn_param_count(cfg: SmallCnnConfig) -> int:
    total, c_in = 0, cfg.in_channels
    for c_out, k, _ in cfg.blocks:
        total += c_out * c_in * k * k + c_out
        c_in = c_out
    return total + c_in * cfg.num_classes + cfg.num_classes


class TestCheckpointFormat:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.float32(2.5), "b": np.zeros(0, np.float32)}
        write_checkpoint(tmp_path / "x.ckpt", {"k": 1}, arrays)
        header, back = read_checkpoint(tmp_path / "x.ckpt")
        assert header == {"k": 1}
        for k, v in arrays.items():
            assert back[k].tobytes() == np.asarray(v, np.float32).tobytes()

    def test_layout(self, tmp_path):
        write_checkpoint(tmp_path / "x.ckpt", {}, {"w": np.array([[1.0, 2.0]], np.float32)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        assert raw[:4] == MAGIC
        version, hlen = struct.unpack("<II", raw[4:12])
        assert version == 1 and raw[12 : 12 + hlen] == b"{}"
        rec = raw[12 + hlen :]
        assert struct.unpack("<I", rec[:4]) == (1,)
        assert rec[4:8] == struct.pack("<I", 1) and rec[8:9] == b"w"
        assert struct.unpack("<I2Q", rec[9:29]) == (2, 1, 2)
        assert np.frombuffer(rec[29:], "<f4").tolist() == [1.0, 2.0]

    def test_truncated(self, tmp_path):
        write_checkpoint(tmp_path / "x.ckpt", {}, {"w": np.ones(8, np.float32)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "t.ckpt")

    def test_bad_magic_and_version(self, tmp_path):
        write_checkpoint(tmp_path / "x.ckpt", {}, {})
        raw = bytearray((tmp_path / "x.ckpt").read_bytes())
        (tmp_path / "m.ckpt").write_bytes(b"XXXX" + raw[4:])
        raw[4:8] = struct.pack("<I", 2)
        (tmp_path / "v.ckpt").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_checkpoint(tmp_path / "m.ckpt")
        with pytest.raises(FormatError, match="version"):
            read_checkpoint(tmp_path / "v.ckpt")


class TestBuildModel:
    def test_cnn_parameter_count(self, cnn):
        # 3*16*9+16, 16*32*9+32, 32*64*9+64, 64*2+2
        assert cnn_param_count(SmallCnnConfig()) == 448 + 4640 + 18496 + 130 == 23714
        assert cnn.num_parameters() == 23714

    def test_same_seed_bit_identical(self):
        for cfg in (SmallCnnConfig(), SmallVitConfig()):
            a, b = build_model(cfg, seed=3), build_model(cfg, seed=3)
            assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            build_model(SmallVitConfig(heads=3), seed=0)

    def test_initialisation(self, cnn, vit):
        w = cnn.params["conv1.weight"].data
        assert np.abs(w).max() <= np.sqrt(6 / (16 * 9)) + 1e-7
        assert not cnn.params["conv1.bias"].data.any()
        assert vit.params["pos_embed"].data.std() == pytest.approx(0.02, rel=0.15)
        np.testing.assert_array_equal(vit.params["norm.weight"].data, 1.0)

    def test_dims(self, cnn, vit):
        assert cnn.dim == 64 and vit.dim == 64
        assert vit.config.num_patches == 64


class TestForward:
    def test_cnn_z_is_spatial_mean(self, cnn, images):
        _, tr = cnn.forward_with_trace(images)
        np.testing.assert_allclose(tr.z.data, tr.feature_maps.data.mean(axis=(2, 3)), rtol=1e-5, atol=1e-6)
        assert tr.feature_maps.shape == (5, 64, 8, 8)

    def test_attention_rows_sum_to_one(self, vit, images):
        _, tr = vit.forward_with_trace(images)
        assert len(tr.attention) == 4
        for a in tr.attention:
            assert a.shape == (5, 4, 65, 65)
            np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-5)

    def test_zero_head_gives_uniform_softmax(self, images):
        m = build_model(SmallCnnConfig(), seed=1)
        m.params["head.weight"].data[:] = 0
        logits, _ = m.forward_with_trace(images)
        np.testing.assert_array_equal(logits.data[:, 0], logits.data[:, 1])

    def test_single_image_shapes(self, cnn, vit, images):
        for m in (cnn, vit):
            logits, tr = m.forward_with_trace(images[0])
            assert logits.shape == (2,) and tr.z.shape == (64,)

    def test_shape_mismatch(self, cnn, vit):
        for m in (cnn, vit):
            with pytest.raises(DimensionError):
                m.forward_with_trace(np.zeros((3, 16, 16), np.float32))

    def test_input_gradient_finite(self, cnn, vit, images):
        for m in (cnn, vit):
            x = Tensor(images[:2], requires_grad=True)
            with Tape() as tape:
                logits, _ = m.forward_with_trace(x)
                root = T.sum(logits)
            (g,) = tape.grad(root, [x])
            assert np.isfinite(g).all() and np.abs(g).sum() > 0

    def test_patch_shift_changes_maps_not_shapes(self, cnn, images):
        a = images[0].copy()
        b = images[0].copy()
        a[:, 1:5, 1:5] = [[[0.95]], [[0.1]], [[0.1]]]
        b[:, 3:7, 3:7] = [[[0.95]], [[0.1]], [[0.1]]]
        fa = cnn.forward_with_trace(a)[1].feature_maps
        fb = cnn.forward_with_trace(b)[1].feature_maps
        assert fa.shape == fb.shape
        assert not np.array_equal(fa.data, fb.data)


class TestEncode:
    def test_matches_trace_bitwise(self, cnn, vit, images):
        for m in (cnn, vit):
            np.testing.assert_array_equal(encode(m, images), forward_with_trace(m, images)[1].z.data)

    def test_batch_rows_independent(self, cnn, vit, images):
        perm = np.array([3, 0, 4, 1, 2])
        for m in (cnn, vit):
            z = encode(m, images)
            np.testing.assert_allclose(encode(m, images[perm]), z[perm], rtol=1e-5, atol=1e-6)
            np.testing.assert_allclose(encode(m, images[2]), z[2], rtol=1e-5, atol=1e-6)
            assert z.shape == (5, m.config.dim)


class TestCheckpointIO:
    def test_round_trip_logits_bitwise(self, tmp_path, cnn, vit, images):
        for m in (cnn, vit):
            p = tmp_path / f"{m.family}.ckpt"
            checkpoint_io(m, p, "save")
            back = checkpoint_io(None, p, "load")
            assert back.forward_with_trace(images)[0].data.tobytes() == m.forward_with_trace(images)[0].data.tobytes()

    def test_masks_survive(self, tmp_path, images):
        m = build_model(SmallCnnConfig(), seed=2)
        m.masks = {"conv2.weight": (np.random.default_rng(0).random(m.params["conv2.weight"].shape) > 0.3).astype(np.float32)}
        save_model(m, tmp_path / "m.ckpt")
        back = load_model(tmp_path / "m.ckpt")
        np.testing.assert_array_equal(back.predict_logits(images), m.predict_logits(images))

    def test_truncated_file(self, tmp_path, cnn):
        save_model(cnn, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_model(tmp_path / "t.ckpt")

    def test_cnn_into_vit(self, tmp_path, cnn):
        save_model(cnn, tmp_path / "m.ckpt")
        with pytest.raises(ArchitectureError):
            load_model(tmp_path / "m.ckpt", expect=SmallVitConfig())


class TestFullNetGradients:
    @pytest.mark.parametrize("cfg", [SmallCnnConfig(), SmallVitConfig()], ids=["cnn", "vit"])
    def test_loss_gradient(self, cfg, images):
        m = build_model(cfg, seed=0)
        y = np.array([0, 1, 1, 0, 1])
        rep = T.finite_diff_check(
            lambda: T.softmax_cross_entropy(m.forward_with_trace(images)[0], y), list(m.params.values()), eps=1e-5, n_coords=20
        )
        assert rep.max_rel_err < 1e-2

    def test_tiny_vit_on_8x8(self):
        cfg = SmallVitConfig(image_size=8, patch_size=4, dim=8, heads=2, layers=1, mlp_dim=16)
        m = build_model(cfg, seed=0)
        x = np.random.default_rng(1).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
        rep = T.finite_diff_check(lambda: T.softmax_cross_entropy(m.forward_with_trace(x)[0], [0, 1]), list(m.params.values()), eps=1e-4)
        assert rep.max_rel_err < 1e-2
