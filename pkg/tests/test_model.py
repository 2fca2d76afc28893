import numpy as np
import pytest

from contrastlab import model as M
from contrastlab import tensor as T
from contrastlab.loss import loss_on_tape

TINY = M.EncoderConfig(widths=(3, 4), embed_dim=6, input_size=8)


def batch(n=4, size=32, seed=0):
    return T.Tensor(np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32))


class TestConfig:
    def test_zero_width(self):
        with pytest.raises(M.ConfigError):
            M.EncoderConfig(widths=(16, 0))

    def test_unknown_architecture(self):
        with pytest.raises(M.ConfigError):
            M.EncoderConfig(architecture="resnet18")

    def test_input_too_small_for_pooling(self):
        with pytest.raises(M.ConfigError):
            M.EncoderConfig(widths=(4, 4, 4, 4), input_size=8)


class TestInit:
    def test_same_seed_same_parameters(self):
        a, b = M.init_encoder(M.EncoderConfig(), 3), M.init_encoder(M.EncoderConfig(), 3)
        assert a.checksum() == b.checksum()
        assert a.checksum() != M.init_encoder(M.EncoderConfig(), 4).checksum()

    def test_he_variance(self):
        cfg = M.EncoderConfig(widths=(64, 128))
        state = M.init_encoder(cfg, 0)
        kernel = state.params["conv1.kernel"].data  # 128 * 64 * 9 = 73728 samples
        fan_in = 64 * 9
        assert kernel.size >= 10_000
        assert abs(kernel.var() / (2 / fan_in) - 1) < 0.2
        dense = state.params["out.weight"].data  # (128, 128)
        assert abs(dense.var() / (2 / 128) - 1) < 0.2

    def test_biases_start_at_zero(self):
        state = M.init_encoder(M.EncoderConfig(), 0)
        assert all(not p.data.any() for name, p in state.params.items() if name.endswith("bias"))


class TestEncode:
    def test_unit_norm_embeddings(self):
        state = M.init_encoder(M.EncoderConfig(), 0)
        feats, emb = M.encode(state, batch())
        assert feats.shape == (4, 64) and emb.shape == (4, 128)
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-5)

    def test_identical_inputs_identical_embeddings(self):
        state = M.init_encoder(M.EncoderConfig(), 1)
        x = batch(1).data
        _, emb = M.encode(state, T.Tensor(np.concatenate([x, x])))
        assert np.array_equal(emb.data[0], emb.data[1])

    @pytest.mark.parametrize("cfg", [M.EncoderConfig(architecture="mlp", widths=(32,), input_size=8),
                                     M.EncoderConfig(widths=(8, 8), projection_head=True, head_hidden=16,
                                                     embed_dim=12, input_size=8)])
    def test_variants(self, cfg):
        _, emb = M.encode(M.init_encoder(cfg, 0), batch(3, 8))
        assert emb.shape == (3, cfg.embed_dim)

    def test_wrong_input_shape(self):
        with pytest.raises(T.DimensionError):
            M.encode(M.init_encoder(M.EncoderConfig(), 0), batch(2, 16))

    def test_kernel_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 3, 8, 8))
        weights = rng.standard_normal((6, 6))
        state = M.init_encoder(TINY, 5, dtype=np.float64)

        def scalar(st):
            _, emb = M.encode(st, T.Tensor(x))
            return T.sum(T.mul_elementwise(emb, T.Tensor(weights)))

        with T.float64_mode():
            scalar(state).backward()
            for name in ("conv0.kernel", "conv1.kernel"):
                def f(v, name=name):
                    params = {k: T.Tensor(v if k == name else p.data) for k, p in state.params.items()}
                    return float(scalar(M.EncoderState(TINY, params)).data)
                numeric = T.finite_difference_gradient(f, state.params[name].data)
                assert T.relative_error(state.params[name].grad, numeric) <= 1e-4

    def test_siamese_gradients_accumulate_from_every_view(self):
        state = M.init_encoder(TINY, 6, dtype=np.float64)
        with T.float64_mode():
            _, emb = M.encode(state, T.Tensor(np.random.default_rng(3).standard_normal((9, 3, 8, 8))))
            loss, _ = loss_on_tape(emb[0:3], emb[3:6], emb[6:9], 0.5)
            loss.backward()
        assert all(p.grad is not None and np.isfinite(p.grad).all() for p in state.parameters())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        state = M.init_encoder(M.EncoderConfig(widths=(4, 8), embed_dim=16), 7)
        extra = {"channel_stats": np.arange(6.0).reshape(2, 3)}
        M.save_checkpoint(tmp_path / "c.ckpt", state, {"epoch": 3}, extra)
        back, meta, extras = M.load_checkpoint(tmp_path / "c.ckpt")
        assert back.checksum() == state.checksum()
        assert back.config == state.config
        assert meta["epoch"] == 3
        assert np.array_equal(extras["channel_stats"], extra["channel_stats"])

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="not a checkpoint"):
            M.load_checkpoint(tmp_path / "x.ckpt")

    def test_rejects_truncated_file(self, tmp_path):
        M.save_checkpoint(tmp_path / "c.ckpt", M.init_encoder(TINY, 0))
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:-10])
        with pytest.raises(ValueError, match="truncated"):
            M.load_checkpoint(tmp_path / "c.ckpt")

    def test_frozen_state_does_not_track(self):
        state = M.init_encoder(TINY, 0)
        _, emb = M.encode(state.frozen(), batch(2, 8))
        assert not emb.requires_grad
