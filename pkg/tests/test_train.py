import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrabox import tensor as T
from pyrabox.anchors import build_grid
from pyrabox.boxes import BoxPx, Detection, iou
from pyrabox.config import LrSchedule, full_config, toy_config
from pyrabox.data import ParseError, SampleRecord, resize_to_input, synthetic_dataset
from pyrabox.network import init_params
from pyrabox.train import (
    WEIGHT_DECAY,
    NumericError,
    TrainState,
    evaluate,
    infer,
    infer_batch,
    lr_at,
    read_detections,
    train,
    train_step,
    write_detections,
)


class TestSchedule:
    def test_full_scale(self):
        s = full_config().lr_schedule
        assert lr_at(0, s) == 1e-3
        assert lr_at(79_999, s) == 1e-3
        assert lr_at(80_000, s) == 1e-4
        assert lr_at(100_000, s) == 1e-5
        assert lr_at(999_999, s) == 1e-5

    def test_divisor_boundaries(self):
        s = LrSchedule.parse({"segments": [[80000, 1e-3], [20000, 1e-4], [20000, 1e-5]], "divisor": 100})
        assert s.boundaries()[:2] == [800, 1000]
        assert lr_at(799, s) == 1e-3 and lr_at(800, s) == 1e-4 and lr_at(1000, s) == 1e-5

    def test_toy_schedule(self):
        s = toy_config().lr_schedule
        assert lr_at(399, s) == 0.01 and lr_at(400, s) == 0.001 and lr_at(10_000, s) == 0.001


@pytest.fixture(scope="module")
def small_cfg():
    return toy_config(batch_size=1)


@pytest.fixture(scope="module")
def crop():
    return resize_to_input(synthetic_dataset(1, 3)[0], 160)


def _faceless(cfg):
    return resize_to_input(SampleRecord(np.full((160, 160, 3), 90, np.uint8), [], ""), cfg.input_size)


class TestStep:
    def test_zero_lr_bit_identical(self, small_cfg, crop):
        state = TrainState.create(small_cfg)
        before = {k: v.data.tobytes() for k, v in state.params.items()}
        state, br = train_step(state, [crop], lr=0.0)
        assert np.isfinite(br.value) and state.step == 1
        assert all(state.params[k].data.tobytes() == b for k, b in before.items())

    def test_weight_decay_only(self, small_cfg):
        # an image without faces has no sampled anchors, so the data gradient is exactly zero
        state = TrainState.create(small_cfg)
        w0 = state.params["conv1_1.w"].data.copy()
        b0 = state.params["head0.b"].data.copy()
        lr = 0.1
        for step in range(3):
            state, br = train_step(state, [_faceless(small_cfg)], lr=lr, momentum=0.0)
            assert br.value == 0.0
            np.testing.assert_allclose(state.params["conv1_1.w"].data, w0 * (1 - lr * WEIGHT_DECAY) ** (step + 1),
                                       rtol=1e-6)
        assert np.array_equal(state.params["head0.b"].data, b0)

    def test_non_finite_loss_aborts_naming_term(self, small_cfg, crop):
        state = TrainState.create(small_cfg)
        state.params["head0.w"].data[:] = np.nan
        with pytest.raises(NumericError, match=r"non-finite (cls|reg) loss in branch k="):
            train_step(state, [crop])

    def test_empty_batch(self, small_cfg):
        with pytest.raises(T.ContractError):
            train_step(TrainState.create(small_cfg), [])

    def test_momentum_shapes(self, small_cfg):
        s = TrainState.create(small_cfg)
        assert all(s.momentum[k].shape == p.shape for k, p in s.params.items())


@pytest.mark.slow
def test_overfit_single_image(small_cfg):
    rec = synthetic_dataset(1, 3)[0]
    crop = resize_to_input(rec, 160)
    state = TrainState.create(small_cfg)
    losses = []
    for _ in range(500):
        state, br = train_step(state, [crop])
        losses.append(br.value)
    assert losses[499] * 10 <= losses[9]
    dets = infer(state.params, small_cfg, rec.image, 0.3)
    assert dets and max(iou(d.box, f) for d in dets for f in rec.faces) > 0.5


class TestInference:
    def test_threshold_one_is_empty(self, small_cfg):
        params = init_params(small_cfg, seed=0)
        img = np.random.default_rng(0).integers(0, 256, (120, 200, 3), dtype=np.uint8)
        assert infer(params, small_cfg, img, score_threshold=1.0) == []

    def test_detection_count_bounded_and_inside_image(self, small_cfg):
        params = init_params(small_cfg, seed=1)
        img = np.random.default_rng(1).integers(0, 256, (100, 140, 3), dtype=np.uint8)
        dets = infer_batch(params, small_cfg, [img], score_threshold=0.0, nms_threshold=1.0, top_k=10 ** 6)[0]
        assert 0 < len(dets) <= len(build_grid(small_cfg))
        for d in dets:
            assert 0 <= d.box.x_min and d.box.x_max <= 140 + 1e-9 and d.box.y_max <= 100 + 1e-9
            assert 0 <= d.score <= 1 and d.class_id == 0

    def test_top_k_caps(self, small_cfg):
        params = init_params(small_cfg, seed=1)
        img = np.zeros((160, 160, 3), np.uint8)
        assert len(infer(params, small_cfg, img, 0.0, 1.0, top_k=5)) <= 5


def det(x, y, w, h, s):
    return Detection(BoxPx(x, y, w, h), s)


class TestEvaluate:
    gts = [[BoxPx(0, 0, 10, 10), BoxPx(50, 50, 10, 10)]]

    def test_perfect(self):
        r = evaluate([[det(*g.as_tuple(), 1.0) for g in self.gts[0]]], self.gts)
        assert r.ap == 1.0

    def test_no_detections(self):
        assert evaluate([[]], self.gts).ap == 0.0

    def test_five_sixths_fixture(self):
        dets = [[det(0, 0, 10, 10, 0.9), det(100, 100, 10, 10, 0.8), det(50, 50, 10, 10, 0.7)]]
        r = evaluate(dets, self.gts)
        assert r.recall == [0.5, 0.5, 1.0]
        assert r.precision == [1.0, 0.5, float(Fraction(2, 3))]
        assert r.ap == float(Fraction(5, 6))
        assert r.to_csv().splitlines()[-1] == "AP,0.833333"
        assert r.to_csv().splitlines()[0] == "recall,precision"

    def test_duplicate_is_false_positive(self):
        dets = [[det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]]
        r = evaluate(dets, [[BoxPx(0, 0, 10, 10)]])
        assert r.precision == [1.0, 0.5] and r.ap == 1.0

    def test_image_count_mismatch(self):
        with pytest.raises(T.ContractError):
            evaluate([[], []], self.gts)

    def test_buckets(self):
        gts = [[BoxPx(0, 0, 10, 10), BoxPx(100, 100, 50, 50), BoxPx(200, 0, 120, 120)]]
        dets = [[det(0, 0, 10, 10, 0.9), det(200, 0, 120, 120, 0.8)]]
        r = evaluate(dets, gts)
        assert r.bucket_ap == {"small": 1.0, "medium": 0.0, "large": 1.0}

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_score_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        gts = [[BoxPx(*rng.uniform(0, 100, 2), *rng.uniform(5, 30, 2)) for _ in range(3)] for _ in range(3)]
        dets = []
        for g in gts:
            ds = [det(*(np.array(b.as_tuple()) + rng.normal(0, 3, 4).clip(-4, 4)).tolist(), float(rng.random()))
                  for b in g if rng.random() < 0.8]
            ds = [d for d in ds if d.box.width > 0 and d.box.height > 0]
            ds += [det(*rng.uniform(0, 100, 2), 10, 10, float(rng.random())) for _ in range(2)]
            dets.append(ds)
        warped = [[Detection(d.box, math.exp(3 * d.score) - 7) for d in ds] for ds in dets]
        a, b = evaluate(dets, gts), evaluate(warped, gts)
        assert a.ap == b.ap
        assert all(x <= y for x, y in zip(a.recall, a.recall[1:]))


class TestDetectionsFile:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "d.txt"
        dets = [[det(1.25, 2.5, 10, 11.125, 0.93)], [], [det(0, 0, 3, 4, 0.5), det(5, 5, 6, 6, 0.25)]]
        write_detections(p, ["a.ppm", "b.ppm", "c.ppm"], dets)
        lines = p.read_text().splitlines()
        assert lines[0] == "a.ppm 1.250 2.500 10.000 11.125 0.930000"
        back = read_detections(p)
        assert back["a.ppm"] == dets[0] and back["c.ppm"] == dets[2] and "b.ppm" not in back

    @pytest.mark.parametrize("line", ["a 1 2 3 4", "a 1 2 x 4 0.5", "a 1 2 -3 4 0.5"])
    def test_malformed(self, tmp_path, line):
        p = tmp_path / "d.txt"
        p.write_text(line + "\n")
        with pytest.raises(ParseError, match="line 1"):
            read_detections(p)


def test_train_loop_reproducible():
    cfg = toy_config(batch_size=2)
    recs = synthetic_dataset(4, 9)
    a, la = train(cfg, recs, 3, seed=5)
    b, lb = train(cfg, recs, 3, seed=5)
    assert la.losses == lb.losses
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    c, lc = train(cfg, recs, 3, seed=6)
    assert lc.losses != la.losses
