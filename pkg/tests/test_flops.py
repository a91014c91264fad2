import numpy as np
import pytest
from hypothesis import given, strategies as st

from vilstm import tensor as T
from vilstm.backbone import ViLConfig, VisionLSTM, preset
from vilstm.errors import ConfigError
from vilstm.flops import (FlopsReport, chunk_sweep, estimate_model_flops, expected_flops_with_droppath,
                          flops_mlstm, mlstm_terms, optimal_chunk, survival_probabilities, unmasked_score_value)

PINNED_FLOPS = {"tiny": 1_552_101_888, "small": 5_531_919_360, "base": 20_774_701_056}
TABLE_FLOPS = {"tiny": 1.5e9, "small": 5.1e9, "base": 18.6e9}

dims = st.integers(1, 96)


@given(st.integers(1, 300), dims, dims)
def test_chunking_degenerates_to_both_ends(L, dq, dv):
    assert flops_mlstm(L, dq, dv, "chunkwise", L) == flops_mlstm(L, dq, dv, "parallel")
    assert flops_mlstm(L, dq, dv, "chunkwise", 1) == flops_mlstm(L, dq, dv, "recurrent")


def test_causal_half_of_score_value():
    terms = mlstm_terms(196, 192, 192, "parallel")
    assert 2 * terms["score_value"] == unmasked_score_value(196, 192, 192)
    assert terms["readout"] == terms["state_update"] == terms["state_decay"] == 0


def test_recurrent_terms():
    t = mlstm_terms(10, 4, 3, "recurrent")
    assert t == {"score_value": 10 * (7 // 2), "readout": 9 * 16, "state_update": 9 * 16, "state_decay": 9 * 16,
                 "normalize": 30}


@given(st.integers(1, 200), dims, dims, st.integers(1, 64))
def test_monotone_in_length_and_dims(L, dq, dv, c):
    for mode in ("parallel", "recurrent"):
        base = flops_mlstm(L, dq, dv, mode)
        assert flops_mlstm(L + 1, dq, dv, mode) >= base
        assert flops_mlstm(L, dq + 1, dv, mode) >= base
        assert flops_mlstm(L, dq, dv + 1, mode) >= base
    c = min(c, L)
    base = flops_mlstm(L, dq, dv, "chunkwise", c)
    assert flops_mlstm(L + 1, dq, dv, "chunkwise", c) >= base
    assert flops_mlstm(L, dq + 1, dv, "chunkwise", c) >= base


def test_chunk_sweep_minimum_by_exhaustive_scan():
    sweep = chunk_sweep(256, 16, 16)
    assert [c for c, _ in sweep] == list(range(1, 257))
    best = optimal_chunk(256, 16, 16)
    assert all(n >= dict(sweep)[best] for _, n in sweep)
    assert 1 < best < 256  # an interior crossover for small heads


def test_invalid_chunks():
    for bad in (0, 11, None):
        with pytest.raises(ConfigError):
            flops_mlstm(10, 4, 4, "chunkwise", bad)
    with pytest.raises(ConfigError):
        flops_mlstm(0, 4, 4)
    with pytest.raises(ConfigError):
        flops_mlstm(4, 4, 4, "diagonal")


def test_preset_totals_pinned_and_within_band():
    for name, pinned in PINNED_FLOPS.items():
        rep = estimate_model_flops(preset(name))
        assert rep.total == pinned
        assert abs(rep.total / TABLE_FLOPS[name] - 1) <= 0.30


def test_report_invariants():
    rep = estimate_model_flops(preset("tiny"))
    assert rep.total == sum(rep.components.values())
    assert all(isinstance(v, int) and v >= 0 for v in rep.components.values())
    assert rep.components["patch_embed"] == 196 * 16 * 16 * 3 * 192
    assert rep.components["head"] == 384 * 1000
    with pytest.raises(ConfigError):
        FlopsReport({"x": -1}, "parallel", 1, 1, 1)


def test_doubling_resolution_scales_core_by_about_16():
    cfg = preset("tiny")
    a = estimate_model_flops(cfg, 224).components["blocks.mlstm_core"]
    b = estimate_model_flops(cfg, 448).components["blocks.mlstm_core"]
    assert 15.5 < b / a <= 16.0


def test_chunkwise_report_records_chunk():
    rep = estimate_model_flops(preset("tiny"), mode="chunkwise", chunk=14)
    assert rep.chunk == 14 and "C=14" in rep.to_text()
    with pytest.raises(ConfigError):
        estimate_model_flops(preset("tiny"), resolution=230)


def test_csv_and_text():
    rep = estimate_model_flops(preset("tiny"))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "component,count"
    assert lines[-1] == f"total,{rep.total}"
    assert len(lines) == len(rep.components) + 2
    assert "blocks.mlstm_core" in rep.to_text()


@pytest.mark.parametrize("design,pooling,dim", [("alt-bi", "BilateralConcat", 64), ("quad", "AVG", 64),
                                                ("bi", "MiddleCLS", 64), ("uni", "MiddlePatch", 64)])
def test_counted_macs_agree_with_analytic(design, pooling, dim):
    cfg = ViLConfig(image_size=32, patch_size=8, dim=dim, depth=2, num_classes=10, block_design=design,
                    pooling=pooling)
    with T.no_grad(), T.count_macs() as c:
        VisionLSTM(cfg)(np.zeros((1, 32, 32, 3), np.float32))
    assert abs(estimate_model_flops(cfg).total / c.total - 1) < 0.05


def test_droppath_expectation():
    rep = estimate_model_flops(preset("small"))
    assert expected_flops_with_droppath(rep, 0.0) == rep.total
    half = expected_flops_with_droppath(rep, 0.5, "constant")
    assert half == pytest.approx(rep.total - rep.block_total / 2)
    lin = expected_flops_with_droppath(rep, 0.2, "linear")
    assert lin == pytest.approx(rep.total - rep.block_total * 0.1)
    with pytest.raises(ConfigError):
        expected_flops_with_droppath(rep, 1.0)


def test_droppath_monte_carlo():
    rep = estimate_model_flops(preset("base"))
    keep = survival_probabilities(rep.depth, 0.2, "linear")
    rng = np.random.default_rng(0)
    per_block = rep.block_total / rep.depth
    draws = rep.total - rep.block_total + per_block * (rng.random((10_000, rep.depth)) < keep).sum(1)
    assert abs(draws.mean() / expected_flops_with_droppath(rep, 0.2, "linear") - 1) < 0.01
