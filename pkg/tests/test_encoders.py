import numpy as np
import pytest

from cookie_kit import encoders as E
from cookie_kit import tensor as T
from cookie_kit.errors import ConfigError, ContractError, DataError


def small_config(**kw):
    defaults = dict(image_size=16, patch_size=8, d_visual=12, d_text=8,
                    d_model=16, n_heads=2, d_ff=16, vocab_size=32, max_words=6,
                    text_heads=2)
    defaults.update(kw)
    return E.EncoderConfig(**defaults)


@pytest.fixture
def params64():
    return E.init_params(small_config(), seed=0).astype(np.float64)


class TestVisualBackbone:
    def test_zero_image_zero_bias(self, params64):
        out = E.toy_visual_backbone(np.zeros((1, 16, 16, 3)), params64)
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_locality(self, params64):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(1, 16, 16, 3))
        img2 = img.copy()
        img2[0, :8, 8:, :] += 0.1  # patch (0, 1) only
        a = E.toy_visual_backbone(img, params64).data
        b = E.toy_visual_backbone(img2, params64).data
        diff = np.abs(a - b).sum(axis=2)[0]
        assert diff[1] > 0
        assert np.all(diff[[0, 2, 3]] == 0)

    def test_patch_count(self):
        cfg = E.EncoderConfig()
        assert cfg.n_patches == 16
        p = E.init_params(cfg, seed=1)
        out = E.toy_visual_backbone(np.zeros((2, 32, 32, 3)), p)
        assert out.shape == (2, 16, cfg.d_visual)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ConfigError):
            E.EncoderConfig(image_size=30, patch_size=8)


class TestTextBackbone:
    def test_deterministic(self, params64):
        ids = np.array([[3, 4, 5, 0, 0, 0]])
        mask = np.array([[1, 1, 1, 0, 0, 0]])
        a = E.toy_text_backbone(ids, mask, params64).data
        b = E.toy_text_backbone(ids, mask, params64).data
        np.testing.assert_array_equal(a, b)

    def test_out_of_vocab_rejected(self, params64):
        with pytest.raises(DataError):
            E.toy_text_backbone(np.array([[99, 0, 0, 0, 0, 0]]),
                                np.ones((1, 6)), params64)

    def test_positional_sensitivity(self, params64):
        # learned positions are zero-initialized; give them some signal
        rng = np.random.default_rng(1)
        params64["tb.pos"].data[...] = rng.normal(size=params64["tb.pos"].shape)
        mask = np.ones((1, 6))
        a = E.toy_text_backbone(np.array([[3, 4, 5, 6, 7, 8]]), mask, params64).data
        b = E.toy_text_backbone(np.array([[4, 3, 5, 6, 7, 8]]), mask, params64).data
        assert np.abs(a - b).max() > 0


class TestProjections:
    def test_visual_positions_pass_through(self, params64):
        params64["pos_v"].data[...] = np.random.default_rng(2).normal(size=params64["pos_v"].shape)
        v = T.Tensor(np.zeros((1, 4, 12)))
        out = E.project_visual(v, params64)
        np.testing.assert_allclose(out.data[0], params64["pos_v"].data)

    def test_visual_identity_weights(self):
        cfg = small_config(d_visual=16)
        p = E.init_params(cfg, seed=0).astype(np.float64)
        p["proj_v.w"].data[...] = np.eye(16)
        p["proj_v.b"].data[...] = 0
        p["pos_v"].data[...] = 0
        v = np.random.default_rng(3).normal(size=(2, 4, 16))
        np.testing.assert_allclose(E.project_visual(T.Tensor(v), p).data, v)

    def test_visual_rowwise_oracle(self, params64):
        rng = np.random.default_rng(4)
        v = rng.normal(size=(2, 4, 12))
        out = E.project_visual(T.Tensor(v), params64).data
        for b in range(2):
            for i in range(4):
                expected = v[b, i] @ params64["proj_v.w"].data + \
                    params64["proj_v.b"].data + params64["pos_v"].data[i]
                np.testing.assert_allclose(out[b, i], expected, atol=1e-6)

    def test_textual_tag_everywhere(self, params64):
        params64["sem_t"].data[...] = np.random.default_rng(5).normal(size=16)
        t = T.Tensor(np.zeros((1, 6, 8)))
        out = E.project_textual(t, params64)
        np.testing.assert_allclose(out.data[0], np.tile(params64["sem_t"].data, (6, 1)))

    def test_textual_rowwise_oracle(self, params64):
        rng = np.random.default_rng(6)
        t = rng.normal(size=(2, 6, 8))
        out = E.project_textual(T.Tensor(t), params64).data
        for b in range(2):
            for i in range(6):
                expected = t[b, i] @ params64["proj_t.w"].data + \
                    params64["proj_t.b"].data + params64["sem_t"].data
                np.testing.assert_allclose(out[b, i], expected, atol=1e-6)


class TestTavEncode:
    def test_shape_preserved(self, params64):
        x = T.Tensor(np.random.default_rng(7).normal(size=(2, 4, 16)))
        assert E.tav_encode(x, params64).shape == (2, 4, 16)

    def test_zeroed_weights_identity_plus_tag(self, params64):
        E.zero_layer_weights(params64, "tav.l0")
        params64["sem_v"].data[...] = np.random.default_rng(8).normal(size=16)
        x = np.random.default_rng(9).normal(size=(1, 4, 16))
        out = E.tav_encode(T.Tensor(x), params64)
        np.testing.assert_allclose(out.data, x + params64["sem_v"].data, atol=1e-12)

    def test_gradient(self, params64):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 4, 16))
        tav = {k: v for k, v in params64.items() if k.startswith("tav.")}
        w = rng.normal(size=(1, 4, 16))

        def build():
            return T.tsum(E.tav_encode(T.Tensor(x), params64) * T.Tensor(w))

        assert T.grad_check(build, tav, max_coords=3) < 1e-4


class TestWsEncode:
    def test_weight_sharing_identity(self, params64):
        # same content through a "visual-shaped" and a "textual-shaped" call
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 6, 16))
        a = E.ws_encode(T.Tensor(x.copy()), None, params64).data
        b = E.ws_encode(T.Tensor(x.copy()), np.ones((1, 6)), params64).data
        np.testing.assert_array_equal(a, b)

    def test_permutation_equivariance_bitwise(self, params64):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 6, 16))
        mask = np.array([[1, 1, 1, 1, 1, 0]], dtype=float)
        perm = np.array([2, 0, 4, 1, 3, 5])
        a = E.ws_encode(T.Tensor(x), mask, params64).data
        b = E.ws_encode(T.Tensor(x[:, perm]), mask[:, perm], params64).data
        np.testing.assert_array_equal(a[:, perm], b)

    def test_all_masked_rejected(self, params64):
        with pytest.raises(ContractError):
            E.ws_encode(T.Tensor(np.zeros((1, 6, 16))), np.zeros((1, 6)), params64)

    def test_gradient(self, params64):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(1, 4, 16))
        mask = np.array([[1, 1, 1, 0]], dtype=float)
        ws = params64.ws_parameters()
        w = rng.normal(size=(1, 4, 16)) * mask[..., None]

        def build():
            return T.tsum(E.ws_encode(T.Tensor(x), mask, params64) * T.Tensor(w))

        assert T.grad_check(build, ws, max_coords=2) < 1e-4


class TestPool:
    def test_single_row(self):
        x = T.Tensor(np.array([[[1.0, 5.0], [9.0, 9.0]]]))
        mask = np.array([[1.0, 0.0]])
        for strategy in ("max", "mean"):
            np.testing.assert_allclose(E.pool(x, mask, strategy).data, [[1.0, 5.0]])

    def test_two_rows(self):
        x = T.Tensor(np.array([[[1.0, 5.0], [3.0, 2.0]]]))
        np.testing.assert_allclose(E.pool(x, None, "max").data, [[3.0, 5.0]])
        np.testing.assert_allclose(E.pool(x, None, "mean").data, [[2.0, 3.5]])

    def test_masked_huge_values_ignored(self):
        x = T.Tensor(np.array([[[1.0, 5.0], [1e6, 1e6]]]))
        mask = np.array([[1.0, 0.0]])
        np.testing.assert_allclose(E.pool(x, mask, "max").data, [[1.0, 5.0]])
        np.testing.assert_allclose(E.pool(x, mask, "mean").data, [[1.0, 5.0]])

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            E.pool(T.Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2)), "max")


class TestFullPipelines:
    def test_encode_image_deterministic(self, params64):
        img = np.random.default_rng(14).uniform(size=(16, 16, 3))
        a = E.encode_image(img, params64)
        b = E.encode_image(img, params64)
        np.testing.assert_array_equal(a.data, b.data)
        assert np.all(np.isfinite(a.data))

    def test_shared_parameter_objects(self, params64):
        # both encode paths must read the exact same ws Parameter objects
        before = {k: id(v) for k, v in params64.ws_parameters().items()}
        E.encode_images(np.zeros((1, 16, 16, 3)), params64)
        E.encode_texts(np.array([[3, 4, 0, 0, 0, 0]]), np.array([[1, 1, 1, 0, 0, 0]]), params64)
        after = {k: id(v) for k, v in params64.ws_parameters().items()}
        assert before == after and len(before) > 0

    def test_end_to_end_gradient(self, params64):
        rng = np.random.default_rng(15)
        img = rng.uniform(size=(1, 16, 16, 3))
        ids = np.array([[3, 4, 5, 0, 0, 0]])
        mask = np.array([[1, 1, 1, 0, 0, 0]], dtype=float)
        subset = {k: params64[k] for k in
                  ["vb.w", "proj_v.w", "pos_v", "sem_v", "tb.emb", "proj_t.w", "sem_t",
                   "ws.l0.wq", "ws.l1.w2", "tav.l0.wv", "tb.l0.wo"]}

        def build():
            iv = E.encode_images(img, params64)
            tv = E.encode_texts(ids, mask, params64)
            return T.tsum(iv * tv)

        assert T.grad_check(build, subset, max_coords=2) < 1e-4

    def test_ws_gradient_accumulates_across_paths(self, params64):
        rng = np.random.default_rng(16)
        img = rng.uniform(size=(2, 16, 16, 3))
        ids = np.array([[3, 4, 5, 0, 0, 0], [6, 7, 0, 0, 0, 0]])
        mask = np.array([[1, 1, 1, 0, 0, 0], [1, 1, 0, 0, 0, 0]], dtype=float)
        ws = params64.ws_parameters()

        def img_loss():
            return T.tsum(T.square(E.encode_images(img, params64)))

        def txt_loss():
            return T.tsum(T.square(E.encode_texts(ids, mask, params64)))

        T.zero_grad(ws)
        combined = T.backward(img_loss() + txt_loss(), ws)
        T.zero_grad(ws)
        gi = T.backward(img_loss(), ws)
        T.zero_grad(ws)
        gt = T.backward(txt_loss(), ws)
        for k in ws:
            np.testing.assert_allclose(combined[k], gi[k] + gt[k], rtol=1e-9, atol=1e-12)
