import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depth_introspect.data import DEPTH_FLOOR, DepthRaster, SceneConfig, generate_scene
from depth_introspect.decn import (
    CorrectionConfig,
    correct_iterative,
    correct_once,
    model_detector,
    oracle_detector,
)
from depth_introspect.dedn import DednConfig, DednModel, infer
from depth_introspect.evaluation import depth_metrics
from depth_introspect.labeling import CORRECT, OVER, UNDER, ErrorProbabilityMap

CFG = CorrectionConfig()


def _raster(values):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return DepthRaster(values, values > 0)


def _probs_at(shape, cls, p):
    """Probability ``p`` on class ``cls`` everywhere, the rest split evenly."""
    probs = np.full((3,) + shape, (1 - p) / 2)
    probs[cls] = p
    return ErrorProbabilityMap(probs)


def _scene(seed=3, size=24):
    return generate_scene(SceneConfig(width=size, height=size), seed)


# ---------------------------------------------------------------------- correct_once


def test_uniform_probabilities_leave_depth_unchanged(rng):
    pred = _raster(rng.uniform(1, 5, size=(6, 7)))
    out = correct_once(pred, ErrorProbabilityMap(np.full((3, 6, 7), 1 / 3)), CFG)
    assert np.array_equal(out.depth, pred.depth)


def test_confident_under_raises_by_one_step():
    out = correct_once(_raster([[2.0]]), _probs_at((1, 1), UNDER, 0.9), CFG)
    assert out.depth[0, 0] == pytest.approx(2.01, abs=1e-12)


def test_confident_over_lowers_by_one_step():
    out = correct_once(_raster([[2.0]]), _probs_at((1, 1), OVER, 0.9), CFG)
    assert out.depth[0, 0] == pytest.approx(1.99, abs=1e-12)


def test_over_at_floor_stays_at_floor():
    out = correct_once(_raster([[DEPTH_FLOOR]]), _probs_at((1, 1), OVER, 0.8), CFG)
    assert out.depth[0, 0] == DEPTH_FLOOR


def test_over_just_above_floor_clamps_to_floor():
    out = correct_once(_raster([[DEPTH_FLOOR + 0.004]]), _probs_at((1, 1), OVER, 0.8), CFG)
    assert out.depth[0, 0] == DEPTH_FLOOR


def test_threshold_is_strict():
    out = correct_once(_raster([[2.0]]), _probs_at((1, 1), UNDER, 0.7), CFG)
    assert out.depth[0, 0] == 2.0


def test_invalid_pixels_untouched():
    pred = DepthRaster(np.array([[2.0, 0.0]]), np.array([[True, False]]))
    out = correct_once(pred, _probs_at((1, 2), UNDER, 0.95), CFG)
    assert out.depth.tolist() == [[2.01, 0.0]]
    assert out.valid.tolist() == [[True, False]]


def test_tie_under_sigmoid_head_applies_neither(caplog):
    probs = np.zeros((3, 1, 2))
    probs[UNDER] = 0.9
    probs[OVER] = [[0.9, 0.1]]
    with caplog.at_level(logging.INFO, logger="depth_introspect.decn"):
        out = correct_once(_raster([[2.0, 3.0]]), ErrorProbabilityMap(probs), CFG)
    assert out.depth[0, 0] == 2.0
    assert out.depth[0, 1] == pytest.approx(3.01)
    assert "(0, 0)" in caplog.text


def test_input_not_mutated():
    pred = _raster([[2.0, 3.0]])
    correct_once(pred, _probs_at((1, 2), UNDER, 0.9), CFG)
    assert pred.depth.tolist() == [[2.0, 3.0]]


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="differ"):
        correct_once(_raster([[2.0, 3.0]]), _probs_at((2, 2), UNDER, 0.9), CFG)


@pytest.mark.parametrize(
    "kw",
    [dict(confidence_threshold=0.5), dict(confidence_threshold=1.0), dict(step=0.0), dict(iterations=0),
     dict(iterations=1.5), dict(depth_floor=0.0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        CorrectionConfig(**kw)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    threshold=st.floats(0.51, 0.99),
    step=st.floats(1e-3, 0.2),
)
def test_changes_bounded_by_step_and_gated_by_threshold(seed, threshold, step):
    rng = np.random.default_rng(seed)
    pred = _raster(rng.uniform(0.02, 4, size=(5, 5)))
    raw = rng.dirichlet([0.3, 0.3, 0.3], size=(5, 5)).transpose(2, 0, 1)
    cfg = CorrectionConfig(confidence_threshold=threshold, step=step)
    out = correct_once(pred, ErrorProbabilityMap(raw), cfg)
    delta = np.abs(out.depth - pred.depth)
    assert (delta <= step + 1e-12).all()
    confident = np.maximum(raw[UNDER], raw[OVER]) > threshold
    assert not delta[~confident].any()
    assert (out.depth[pred.valid] > 0).all()


# ---------------------------------------------------------------------- oracle loop


def test_oracle_rmse_non_increasing_and_converges():
    sample = _scene()
    t = 0.1
    res = correct_iterative(sample.pred_depth, sample.views(1), oracle_detector(sample.gt_depth, t),
                            CorrectionConfig(iterations=500), gt=sample.gt_depth)
    rmse = [row["rmse"] for row in res.trace]
    assert rmse[0] > rmse[-1]
    assert all(b <= a for a, b in zip(rmse, rmse[1:]))
    assert res.converged
    m = sample.gt_depth.valid & res.depth.valid
    assert (np.abs(res.depth.depth - sample.gt_depth.depth)[m] <= t).all()


def test_oracle_strict_while_outside_band():
    sample = _scene(seed=7)
    t = 0.1
    gt = sample.gt_depth
    depth = sample.pred_depth
    detect = oracle_detector(gt, t)
    cfg = CorrectionConfig(iterations=1)
    rgb = sample.views(1)[0][0]
    for _ in range(300):
        err = np.abs(depth.depth - gt.depth)[depth.valid & gt.valid]
        if not (err > t).any():
            break
        new = correct_once(depth, detect([(rgb, depth)]), cfg)
        assert depth_metrics(new, gt).rmse < depth_metrics(depth, gt).rmse
        depth = new
    else:
        pytest.fail("oracle correction did not converge")


def test_fixed_point_is_idempotent():
    sample = _scene()
    detect = oracle_detector(sample.gt_depth, 0.1)
    first = correct_iterative(sample.pred_depth, sample.views(1), detect, CorrectionConfig(iterations=500))
    again = correct_iterative(first.depth, sample.views(1), detect, CorrectionConfig(iterations=7))
    assert np.array_equal(again.depth.depth, first.depth.depth)
    assert again.converged and again.iterations_run == 1


def test_trace_layout():
    sample = _scene()
    res = correct_iterative(sample.pred_depth, sample.views(1), oracle_detector(sample.gt_depth, 0.1),
                            CorrectionConfig(iterations=3), gt=sample.gt_depth)
    assert [row["iteration"] for row in res.trace] == [0, 1, 2, 3]
    assert res.trace[0]["rmse"] == pytest.approx(depth_metrics(sample.pred_depth, sample.gt_depth).rmse)
    assert res.trace_lines()[1].startswith("iteration=1 changed=")
    blind = correct_iterative(sample.pred_depth, sample.views(1), oracle_detector(sample.gt_depth, 0.1),
                              CorrectionConfig(iterations=3))
    assert set(blind.trace[0]) == {"iteration", "changed"}


def test_feeds_updated_depth_back():
    seen = []

    def detector(views):
        seen.append(views[0][1].depth.copy())
        return _probs_at(views[0][1].depth.shape, UNDER, 0.9)

    sample = _scene(size=8)
    res = correct_iterative(sample.pred_depth, sample.views(1), detector, CorrectionConfig(iterations=3))
    assert len(seen) == 3
    v = sample.pred_depth.valid
    np.testing.assert_allclose(seen[2][v], sample.pred_depth.depth[v] + 0.02)
    np.testing.assert_allclose(res.depth.depth[v], sample.pred_depth.depth[v] + 0.03)


def test_single_iteration_equals_correct_once_after_infer():
    sample = _scene(size=8)
    model = DednModel(DednConfig(height=8, width=8, stem_channels=2, stage_channels=(3, 4), blocks_per_stage=1))
    for layer in model.head.layers:
        for p in layer.parameters():
            p.data *= 40  # sharpen the softmax so some pixels cross the threshold
    cfg = CorrectionConfig(iterations=1)
    res = correct_iterative(sample.pred_depth, sample.views(1), model, cfg)
    direct = correct_once(sample.pred_depth, infer(model, sample.views(1)), cfg)
    assert res.trace[1]["changed"] > 0
    assert np.array_equal(res.depth.depth, direct.depth)


def test_model_view_count_checked():
    sample = _scene(size=8)
    model = DednModel(DednConfig(height=8, width=8, stem_channels=2, stage_channels=(3, 4), blocks_per_stage=1, n_views=2))
    with pytest.raises(ValueError, match="view"):
        correct_iterative(sample.pred_depth, sample.views(1), model_detector(model), CFG)


def test_oracle_detector_is_one_hot():
    pred = _raster([[1.0, 2.0, 3.0]])
    gt = _raster([[1.5, 2.05, 2.5]])
    probs = oracle_detector(gt, 0.1)([(None, pred)])
    assert probs.labels().tolist() == [[UNDER, CORRECT, OVER]]
    assert set(np.unique(probs.probs)) == {0.0, 1.0}
