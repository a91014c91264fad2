import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vilstm import tensor as T
from vilstm.backbone import (ConvKind, PatchSequence, Pooling, ViLConfig, VisionLSTM, add_positional,
                             bicubic_matrix, count_params, drop_path, extract_patches, interpolate_positional,
                             pool, preset)
from vilstm.errors import ConfigError, DimensionError, NumericError
from vilstm.tensor import Tensor, no_grad
from vilstm.traversal import CF, RB, RF

PINNED_PARAMS = {"tiny": 6_999_016, "small": 26_383_144, "base": 102_310_312}


def micro(**kw):
    base = dict(image_size=16, patch_size=8, dim=8, depth=2, num_classes=3)
    base.update(kw)
    return ViLConfig(**base)


def images(n, size=16, seed=0):
    return np.random.default_rng(seed).standard_normal((n, size, size, 3)).astype(np.float32)


@pytest.mark.parametrize("stride,tokens", [(16, 196), (8, 729)])
def test_token_counts(stride, tokens):
    cfg = ViLConfig(patch_size=16, patch_stride=stride)
    assert cfg.num_patches == tokens
    flat, grid = extract_patches(np.zeros((1, 224, 224, 3), np.float32), 16, stride)
    assert flat.shape == (1, tokens, 768) and grid[0] * grid[1] == tokens


def test_patch_contents_and_order():
    img = np.arange(2 * 6 * 4 * 2, dtype=np.float64).reshape(2, 6, 4, 2)
    flat, grid = extract_patches(img, 2, 2)
    assert grid == (3, 2)
    for b in range(2):
        for t in range(6):
            r, c = divmod(t, 2)
            np.testing.assert_array_equal(flat[b, t], img[b, 2 * r:2 * r + 2, 2 * c:2 * c + 2].reshape(-1))


def test_patch_geometry_errors():
    with pytest.raises(ConfigError):
        extract_patches(np.zeros((1, 30, 30, 3)), 16, 16)
    with pytest.raises(ConfigError):
        ViLConfig(image_size=30, patch_size=16)
    with pytest.raises(DimensionError):
        extract_patches(np.zeros((30, 30, 3)), 16, 16)


def test_config_validation():
    with pytest.raises(ConfigError):
        micro(heads=3)
    with pytest.raises(ConfigError):
        micro(drop_path_rate=1.0)
    with pytest.raises(ConfigError):
        micro(block_design="diagonal")
    with pytest.raises(ConfigError):
        micro(mlstm_mode="chunkwise")
    with pytest.raises(ConfigError):
        micro(image_size=24, pooling="MiddleCLS")  # 9 patches
    cfg = micro(block_design="quad", pooling="AVG", conv_kind="Causal1D")
    assert ViLConfig.from_dict(cfg.to_dict()) == cfg


def test_presets_pinned_and_within_band():
    table = {"tiny": 6e6, "small": 23e6, "base": 89e6}
    for name, n in PINNED_PARAMS.items():
        cfg = preset(name)
        assert count_params(cfg) == n
        assert abs(n / table[name] - 1) <= 0.30


def test_shared_quad_matches_uni_count():
    assert count_params(preset("tiny", block_design="quad-shared")) == count_params(preset("tiny",
                                                                                             block_design="uni"))
    assert count_params(preset("tiny", block_design="quad")) > count_params(preset("tiny"))


@pytest.mark.parametrize("design", ["uni", "bi", "bi-shared", "alt-bi", "quad", "quad-shared", "alt-quad"])
@pytest.mark.parametrize("pooling", list(Pooling))
def test_instantiated_count_matches_analytic(design, pooling):
    for use_bias, conv in ((True, "Conv2D3x3"), (False, "Causal1D")):
        cfg = micro(block_design=design, pooling=pooling, use_bias=use_bias, conv_kind=conv)
        assert VisionLSTM(cfg).num_params() == count_params(cfg)


def test_feature_dims_of_pooling():
    dims = {p: preset("tiny", pooling=p).feature_dim for p in Pooling}
    assert dims[Pooling.BILATERAL_CONCAT] == 384
    assert all(v == 192 for p, v in dims.items() if p is not Pooling.BILATERAL_CONCAT)


@pytest.mark.parametrize("pooling", list(Pooling))
@pytest.mark.parametrize("design", ["uni", "alt-quad", "bi"])
def test_forward_and_backward(pooling, design):
    m = VisionLSTM(micro(pooling=pooling, block_design=design))
    out = m(images(2))
    assert out.shape == (2, 3) and np.all(np.isfinite(out.data))
    T.cross_entropy(out, [0, 2]).backward()
    assert all(p.grad is not None for p in m.parameters())


def test_modes_give_same_logits():
    x = images(2, 32)
    outs = []
    for mode, chunk in (("parallel", None), ("recurrent", None), ("chunkwise", 3)):
        m = VisionLSTM(micro(image_size=32, mlstm_mode=mode, mlstm_chunk=chunk), dtype=np.float64)
        with no_grad():
            outs.append(m(x).data)
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], rtol=1e-10, atol=1e-12)


def test_pool_modes_on_known_tokens():
    tok = Tensor(np.arange(2 * 4 * 3, dtype=np.float64).reshape(2, 4, 3))
    seq = PatchSequence(tok, (2, 2))
    np.testing.assert_array_equal(pool(seq, "AVG").data, tok.data.mean(1))
    np.testing.assert_array_equal(pool(seq, "MiddlePatch").data, tok.data[:, 2])
    np.testing.assert_array_equal(pool(seq, "BilateralAvg").data, (tok.data[:, 0] + tok.data[:, 3]) / 2)
    np.testing.assert_array_equal(pool(seq, "BilateralConcat").data,
                                  np.concatenate([tok.data[:, 0], tok.data[:, 3]], -1))
    with pytest.raises(ConfigError):
        pool(seq, "MiddleCLS")
    cls_seq = PatchSequence(Tensor(np.zeros((1, 5, 3))), (2, 2), cls_position=2)
    assert pool(cls_seq, "MiddleCLS").shape == (1, 3)


def test_cls_token_sits_in_the_middle():
    m = VisionLSTM(micro(image_size=32, pooling="MiddleCLS"))
    seq = m.embed(images(1, 32))
    assert seq.cls_position == 8 and seq.length == 17
    np.testing.assert_array_equal(seq.tokens.data[0, 8], m.params["cls_token"].data)


def test_positional_shape_check():
    seq = PatchSequence(Tensor(np.zeros((1, 4, 3))), (2, 2))
    with pytest.raises(DimensionError):
        add_positional(seq, Tensor(np.zeros((5, 3))))


def test_interpolation_identity_and_partition_of_unity():
    pos = Tensor(np.random.default_rng(0).normal(size=(12, 5)))
    assert interpolate_positional(pos, (3, 4), (3, 4)) is pos
    for a, b in ((4, 7), (7, 4), (14, 27), (1, 3)):
        np.testing.assert_allclose(bicubic_matrix(a, b).sum(1), 1.0, rtol=1e-12)


@given(st.integers(2, 8), st.integers(2, 8), st.integers(1, 12), st.integers(1, 12),
       st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_interpolation_reproduces_linear_fields(h, w, nh, nw, a, b, c):
    # pixel centres map to (i + 0.5) * h / nh - 0.5 in source coordinates
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = Tensor((a * ys + b * xs + c).reshape(-1, 1))
    out = interpolate_positional(pos, (h, w), (nh, nw)).data.reshape(nh, nw)
    sy = (np.arange(nh) + 0.5) * h / nh - 0.5
    sx = (np.arange(nw) + 0.5) * w / nw - 0.5
    np.testing.assert_allclose(out, a * sy[:, None] + b * sx[None, :] + c, atol=1e-9)


def test_interpolation_gradient_and_errors():
    pos = Tensor(np.random.default_rng(1).normal(size=(6, 2)), requires_grad=True)
    W = Tensor(np.random.default_rng(2).normal(size=(20, 2)))
    (interpolate_positional(pos, (2, 3), (4, 5)) * W).sum().backward()
    R = np.kron(bicubic_matrix(2, 4), bicubic_matrix(3, 5))
    np.testing.assert_allclose(pos.grad, R.T @ W.data, rtol=1e-10)
    with pytest.raises(ConfigError):
        interpolate_positional(pos, (2, 3), (0, 5))
    with pytest.raises(DimensionError):
        interpolate_positional(pos, (2, 2), (4, 4))


def test_forward_at_new_resolution():
    m = VisionLSTM(micro())
    assert m(images(1, 32)).shape == (1, 3)


def test_block_hook_sees_round_trip_permutations():
    m = VisionLSTM(micro(image_size=32, block_design="alt-quad", depth=4))
    seen = []
    m.block_hook = lambda i, d, perm, inv: seen.append((i, d, perm, inv))
    m(images(1, 32))
    assert [d for _, d, _, _ in seen] == [RF, RB, CF, m.schedule[3][0]]
    for _, _, perm, inv in seen:
        np.testing.assert_array_equal(perm[inv], np.arange(16))


def test_column_block_is_row_block_on_transposed_image():
    # a CF-only model on an image equals an RF-only model on the transposed image
    x = images(2, 32)
    cfg_r = micro(image_size=32, block_design="uni", depth=1, pooling="AVG")
    m_r = VisionLSTM(cfg_r, dtype=np.float64)
    from vilstm.traversal import BlockDesign
    m_c = VisionLSTM(cfg_r.replace(block_design=BlockDesign((CF,))), dtype=np.float64)
    for k in m_r.params:
        m_c.params[k].data = m_r.params[k].data.copy()
    # transposing the image permutes patch rows and columns; make the positional table follow it
    pos = m_r.params["pos_embed"].data.reshape(4, 4, -1)
    m_c.params["pos_embed"].data = pos.transpose(1, 0, 2).reshape(16, -1).copy()
    # patch contents are transposed too; permute the embedding rows to match
    W = m_r.params["patch_embed.weight"].data.reshape(8, 8, 3, -1)
    m_c.params["patch_embed.weight"].data = W.transpose(1, 0, 2, 3).reshape(192, -1).copy()
    with no_grad():
        a = m_r(x).data
        b = m_c(x.transpose(0, 2, 1, 3)).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_drop_path_statistics():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((10_000, 1, 1)))
    calls = []

    def branch(t):
        calls.append(t.shape[0])
        return t * 1.0

    y = drop_path(x, branch, 0.3, True, rng)
    kept = calls[0]
    assert abs((1 - kept / 10_000) - 0.3) < 0.01
    vals = np.unique(y.data)
    np.testing.assert_allclose(sorted(vals), [1.0, 1.0 + 1 / 0.7])
    assert np.sum(y.data > 1.5) == kept


def test_drop_path_eval_and_errors():
    x = Tensor(np.ones((4, 2)))
    np.testing.assert_array_equal(drop_path(x, lambda t: t * 2.0, 0.5, False, None).data, 3.0)
    with pytest.raises(ConfigError):
        drop_path(x, lambda t: t, 1.0, True, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        drop_path(x, lambda t: t, 0.5, True, None)


def test_drop_path_schedule():
    assert micro(depth=5, drop_path_rate=0.2).drop_rates() == pytest.approx([0, 0.05, 0.1, 0.15, 0.2])
    assert micro(depth=3, drop_path_rate=0.2, drop_path_schedule="constant").drop_rates() == [0.2] * 3


def test_dropped_samples_skip_compute():
    m = VisionLSTM(micro(depth=4, drop_path_rate=0.5, drop_path_schedule="constant"))
    x = images(64)
    with no_grad(), T.count_macs() as full:
        m(x)
    with no_grad(), T.count_macs() as dropped:
        m(x, training=True, rng=np.random.default_rng(0))
    assert dropped.total < 0.75 * full.total


def test_seeded_init_is_deterministic_and_astype():
    a, b = VisionLSTM(micro(), seed=5), VisionLSTM(micro(), seed=5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    a.astype(np.float64)
    assert all(p.dtype == np.float64 for p in a.parameters())
    assert a(images(1)).dtype == np.float64


def test_init_values():
    m = VisionLSTM(micro(heads=4))
    np.testing.assert_allclose(m.params["blocks.0.0.fgate.bias"].data, [3, 4, 5, 6])
    assert np.all(m.params["blocks.0.0.igate.weight"].data == 0)
    assert np.all(m.params["blocks.1.0.skip"].data == 1)
    assert np.abs(m.params["pos_embed"].data).max() <= 0.04 + 1e-7


def test_non_finite_input_names_the_block():
    m = VisionLSTM(micro())
    m.params["blocks.1.0.fgate.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match="block 1"):
        m(images(1))
