import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depth_introspect.data import SceneConfig, generate_scene
from depth_introspect.dedn import DednConfig, DednModel
from depth_introspect.labeling import (
    CORRECT,
    OVER,
    UNDER,
    ClassWeights,
    ErrorLabelMap,
    ErrorProbabilityMap,
    LabelerConfig,
)
from depth_introspect.nn import Tensor, precision
from depth_introspect.nn.optim import SGD
from depth_introspect.training import (
    LabeledCorpus,
    LossConfig,
    TrainConfig,
    TrainingError,
    build_corpus,
    pixel_accuracy,
    train,
    weighted_ce_arrays,
    weighted_ce_loss,
)

UNIT = ClassWeights(1.0, 1.0, 1.0)
LABELER = LabelerConfig(0.1)
SMALL = dict(height=16, width=16, stem_channels=8, stage_channels=(16, 16), blocks_per_stage=1)


def _random_case(rng, h=5, w=6, masked_frac=0.3):
    logits = rng.normal(size=(3, h, w))
    probs = np.exp(logits) / np.exp(logits).sum(axis=0)
    labels = rng.integers(0, 3, size=(h, w))
    mask = rng.random((h, w)) > masked_frac
    return ErrorProbabilityMap(probs), ErrorLabelMap(labels, mask)


def _samples(n, size=16, seed0=0):
    cfg = SceneConfig(width=size, height=size, multi_view=False)
    return [generate_scene(cfg, seed0 + i) for i in range(n)]


# ---------------------------------------------------------------------- loss examples


def test_single_under_pixel_with_weight_two():
    probs = ErrorProbabilityMap(np.array([0.5, 0.3, 0.2]).reshape(3, 1, 1))
    labels = ErrorLabelMap(np.full((1, 1), UNDER), np.ones((1, 1), bool))
    loss, grad = weighted_ce_loss(probs, labels, LossConfig(ClassWeights(2.0, 1.0, 1.0)))
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)
    assert grad[UNDER, 0, 0] == pytest.approx(-4.0)
    assert grad[CORRECT, 0, 0] == 0 and grad[OVER, 0, 0] == 0


def test_all_masked_gives_zero_loss_and_gradient(rng):
    probs, labels = _random_case(rng)
    labels = ErrorLabelMap(labels.label, np.zeros_like(labels.mask))
    loss, grad = weighted_ce_loss(probs, labels, LossConfig(UNIT))
    assert loss == 0.0
    assert not grad.any()


def test_perfect_one_hot_prediction(rng):
    labels = ErrorLabelMap(rng.integers(0, 3, size=(8, 8)), np.ones((8, 8), bool))
    probs = np.zeros((3, 8, 8))
    np.put_along_axis(probs, labels.label[None].astype(np.intp), 1.0, axis=0)
    loss, _ = weighted_ce_loss(ErrorProbabilityMap(probs), labels, LossConfig(UNIT))
    assert 0 <= loss <= 1e-6


def test_doubling_weights_doubles_loss(rng):
    probs, labels = _random_case(rng)
    w = ClassWeights(0.7, 1.3, 2.1)
    base, _ = weighted_ce_loss(probs, labels, LossConfig(w))
    doubled, _ = weighted_ce_loss(probs, labels, LossConfig(w.scaled(2.0)))
    assert doubled == pytest.approx(2 * base, rel=1e-9)


def test_normalizes_by_total_pixel_count():
    probs = ErrorProbabilityMap(np.full((3, 2, 2), 0.5))
    mask = np.array([[True, False], [False, False]])
    loss, _ = weighted_ce_loss(probs, ErrorLabelMap(np.zeros((2, 2)), mask), LossConfig(UNIT))
    assert loss == pytest.approx(math.log(2) / 4)


def test_clamp_kills_gradient_below_epsilon():
    probs = ErrorProbabilityMap(np.array([0.0, 0.5, 0.5]).reshape(3, 1, 1))
    labels = ErrorLabelMap(np.full((1, 1), UNDER), np.ones((1, 1), bool))
    loss, grad = weighted_ce_loss(probs, labels, LossConfig(UNIT, epsilon_log=1e-7))
    assert loss == pytest.approx(-math.log(1e-7))
    assert not grad.any()


def test_loss_errors():
    probs = ErrorProbabilityMap(np.full((3, 2, 2), 1 / 3))
    with pytest.raises(ValueError, match="differ"):
        weighted_ce_loss(probs, ErrorLabelMap(np.zeros((2, 3)), np.ones((2, 3), bool)), LossConfig(UNIT))
    bad = ErrorProbabilityMap(np.full((3, 2, 2), np.nan))
    with pytest.raises(ValueError, match="non-finite"):
        weighted_ce_loss(bad, ErrorLabelMap(np.zeros((2, 2)), np.ones((2, 2), bool)), LossConfig(UNIT))


@pytest.mark.parametrize("eps", [0.0, -1e-7, 2e-3])
def test_epsilon_range_enforced(eps):
    with pytest.raises(ValueError):
        LossConfig(UNIT, epsilon_log=eps)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossConfig(ClassWeights(-1.0, 1.0, 1.0))


# ---------------------------------------------------------------------- loss properties


def test_gradient_matches_finite_differences(rng):
    probs, labels = _random_case(rng)
    cfg = LossConfig(ClassWeights(0.8, 1.1, 1.7))
    _, grad = weighted_ce_loss(probs, labels, cfg)
    h = 1e-6
    numeric = np.zeros_like(grad)
    for idx in np.ndindex(*grad.shape):
        up, down = probs.probs.copy(), probs.probs.copy()
        up[idx] += h
        down[idx] -= h
        lu, _ = weighted_ce_loss(ErrorProbabilityMap(up), labels, cfg)
        ld, _ = weighted_ce_loss(ErrorProbabilityMap(down), labels, cfg)
        numeric[idx] = (lu - ld) / (2 * h)
    err = np.abs(grad - numeric).max() / max(np.abs(grad).max(), np.abs(numeric).max())
    assert err < 1e-3


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), w=st.tuples(*[st.floats(0, 5)] * 3))
def test_loss_nonnegative_and_zero_iff_confident(seed, w):
    rng = np.random.default_rng(seed)
    probs, labels = _random_case(rng)
    cfg = LossConfig(ClassWeights(*w))
    loss, _ = weighted_ce_loss(probs, labels, cfg)
    assert loss >= 0
    confident = probs.probs.copy()
    confident[:] = 0.0
    np.put_along_axis(confident, labels.label[None].astype(np.intp), 1.0, axis=0)
    perfect, _ = weighted_ce_loss(ErrorProbabilityMap(confident), labels, LossConfig(UNIT))
    assert perfect == 0.0
    if labels.mask.any():
        unit, _ = weighted_ce_loss(probs, labels, LossConfig(UNIT))
        assert unit > 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_masked_pixels_do_not_affect_loss(seed):
    rng = np.random.default_rng(seed)
    probs, labels = _random_case(rng, masked_frac=0.5)
    cfg = LossConfig(ClassWeights(1.0, 2.0, 3.0))
    loss, grad = weighted_ce_loss(probs, labels, cfg)
    perturbed = probs.probs.copy()
    noise = rng.random(perturbed.shape)
    perturbed[:, ~labels.mask] = (noise / noise.sum(axis=0))[:, ~labels.mask]
    loss2, _ = weighted_ce_loss(ErrorProbabilityMap(perturbed), labels, cfg)
    assert loss2 == loss
    assert not grad[:, ~labels.mask].any()


def test_batched_loss_equals_mean_of_images(rng):
    cases = [_random_case(rng) for _ in range(3)]
    w = np.array([1.0, 0.5, 2.0])
    probs = np.stack([p.probs for p, _ in cases])
    labels = np.stack([l.label for _, l in cases])
    masks = np.stack([l.mask for _, l in cases])
    batched, _ = weighted_ce_arrays(probs, labels, masks, w, 1e-7)
    single = [weighted_ce_loss(p, l, LossConfig(ClassWeights(*w)))[0] for p, l in cases]
    assert batched == pytest.approx(np.mean(single), rel=1e-12)


# ---------------------------------------------------------------------- training loop


def test_tiny_step_decreases_loss_on_fixed_batch():
    with precision(np.float64):
        model = DednModel(DednConfig(height=8, width=8, stem_channels=2, stage_channels=(3, 4), blocks_per_stage=1))
    corpus = build_corpus(_samples(2, size=8), LABELER, dtype=np.float64)
    weights = np.ones(3)
    views = [(Tensor(r, dtype=np.float64), Tensor(d, dtype=np.float64)) for r, d in corpus.views]

    def loss_and_grad():
        out = model(views)
        return out, *weighted_ce_arrays(out.data, corpus.labels, corpus.masks, weights, 1e-7)

    model.train()
    out, before, grad = loss_and_grad()
    opt = SGD(model.parameters(), lr=1e-4, momentum=0.0)
    opt.zero_grad()
    out.backward(grad)
    opt.step()
    _, after, _ = loss_and_grad()
    assert after < before


def test_zero_learning_rate_keeps_weights_bit_identical():
    model = DednModel(DednConfig(**SMALL))
    before = [p.data.copy() for p in model.parameters()]
    train(model, _samples(4), LABELER, TrainConfig(learning_rate=0.0, batch_size=2, epochs=2), log_line=lambda s: None)
    for b, p in zip(before, model.parameters()):
        assert np.array_equal(b, p.data)


def test_overfits_four_images():
    corpus = build_corpus(_samples(4), LABELER)
    model = DednModel(DednConfig(**SMALL))
    result = train(model, corpus, LABELER, TrainConfig(learning_rate=5e-2, batch_size=4, epochs=100),
                   log_line=lambda s: None)
    assert result.loss_curve[-1] < result.loss_curve[0]
    assert pixel_accuracy(model, corpus) >= 0.95


def test_same_seed_gives_identical_curves():
    corpus = build_corpus(_samples(6), LABELER)
    runs = []
    for _ in range(2):
        model = DednModel(DednConfig(**SMALL))
        res = train(model, corpus, LABELER, TrainConfig(batch_size=4, epochs=3, seed=5), log_line=lambda s: None)
        runs.append((res.loss_curve, [p.data.copy() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        assert np.array_equal(a, b)


def test_epoch_log_lines_and_checkpoints(tmp_path):
    lines = []
    model = DednModel(DednConfig(**SMALL))
    res = train(model, _samples(4), LABELER, TrainConfig(batch_size=2, epochs=3), log_line=lines.append,
                checkpoint_dir=tmp_path, checkpoint_every=2)
    assert len(lines) == 3 and lines[0].startswith("epoch=1 loss=")
    for key in ("under_precision", "under_recall", "over_precision", "over_recall"):
        assert key in lines[-1]
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch002.ckpt", "epoch003.ckpt"]
    assert len(res.history) == 3 and res.history[0].report.n_valid > 0


def test_empty_corpus_rejected():
    model = DednModel(DednConfig(**SMALL))
    with pytest.raises(ValueError, match="empty"):
        train(model, [], LABELER, TrainConfig(epochs=1))


def test_view_count_mismatch_rejected():
    model = DednModel(DednConfig(n_views=2, **SMALL))
    with pytest.raises(ValueError, match="view slot"):
        train(model, build_corpus(_samples(2), LABELER), LABELER, TrainConfig(epochs=1))


def test_nan_input_aborts_with_diagnostic():
    corpus = build_corpus(_samples(2), LABELER)
    rgb, d = corpus.views[0]
    d = d.copy()
    d[0, 0, 0, 0] = np.nan
    bad = LabeledCorpus([(rgb, d)], corpus.labels, corpus.masks)
    model = DednModel(DednConfig(**SMALL))
    with pytest.raises(TrainingError, match="epoch 1 batch 0"):
        train(model, bad, LABELER, TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_learning_rate_aborts():
    model = DednModel(DednConfig(**SMALL))
    with pytest.raises(TrainingError):
        train(model, _samples(4), LABELER, TrainConfig(learning_rate=1e12, momentum=0.0, batch_size=2, epochs=3),
              log_line=lambda s: None)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(learning_rate=-1.0), dict(momentum=1.0), dict(epochs=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
