import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrabox import tensor as T
from pyrabox.anchors import (
    ConfigError,
    PyramidAnchorConfig,
    build_grid,
    context_transform,
    decode_array,
    decode_box,
    default_context_params,
    encode_targets,
    encode_targets_array,
    label_pyramid,
    layer_specs,
    pyramid_label_literal,
    pyramid_label_scaled,
)
from pyrabox.boxes import BoxPx, iou, scale_box
from pyrabox.tensor import ContractError
from pyrabox.verify import context_oracle


class TestGrid:
    def test_layer_specs(self):
        specs = layer_specs()
        assert [s.stride for s in specs] == [4, 8, 16, 32, 64, 128]
        assert all(s.scale == 4 * s.stride == 2 ** (4 + s.index) for s in specs)

    def test_full_size_layers(self):
        g = build_grid(input_size=640)
        assert g.sizes[0] == (160, 160) and g.sizes[5] == (5, 5)
        assert np.all(g.boxes[g.layer_slice(0), 2] == 16)
        assert np.all(g.boxes[g.layer_slice(5), 2] == 512)
        assert len(g) == sum(r * c for r, c in g.sizes)

    def test_toy_64_first_center(self):
        g = build_grid(input_size=64)
        assert g.sizes[0] == (16, 16)
        x, y, w, h = g.boxes[0]
        assert (x + w / 2, y + h / 2) == (2.0, 2.0)

    def test_indivisible_size_rejected(self):
        with pytest.raises(ConfigError):
            build_grid(input_size=100)

    def test_records_are_row_major(self):
        recs = list(build_grid(input_size=64).records())
        assert recs[1] == {"layer": 0, "row": 0, "col": 1, "x_min": -2.0, "y_min": -6.0, "side": 16}
        assert len(recs) == len(build_grid(input_size=64))


class TestLabelRule:
    def test_downsampled_anchor_exact_overlap(self):
        anchor, face = BoxPx(0, 0, 256, 256), BoxPx(0, 0, 128, 128)
        assert scale_box(anchor, 0.5) == face
        assert pyramid_label_literal(anchor, face, 1, 2.0, 0.35) == 1

    def test_literal_equals_scaled_face_10k(self):
        rng = np.random.default_rng(0)
        agree = 0
        for _ in range(10_000):
            a = BoxPx(*rng.uniform(-50, 600, 2), *rng.uniform(1, 520, 2))
            f = BoxPx(*rng.uniform(0, 600, 2), *rng.uniform(1, 260, 2))
            k = int(rng.integers(0, 3))
            lit = pyramid_label_literal(a, f, k, 2.0, 0.35)
            agree += lit == pyramid_label_scaled(a, f, k, 2.0, 0.35)
        assert agree == 10_000

    @given(
        st.tuples(st.floats(0, 500), st.floats(0, 500), st.floats(1, 400), st.floats(1, 400)),
        st.tuples(st.floats(0, 500), st.floats(0, 500), st.floats(1, 400), st.floats(1, 400)),
        st.integers(0, 3),
    )
    @settings(max_examples=300, deadline=None)
    def test_literal_equals_scaled_face_property(self, a, f, k):
        a, f = BoxPx(*a), BoxPx(*f)
        assert iou(scale_box(a, 2.0 ** -k), f) == iou(a, scale_box(f, 2.0 ** k))


def _face_levels(face, input_size=640):
    g = build_grid(input_size=input_size)
    lab = label_pyramid(g, [face], PyramidAnchorConfig())
    layer = g.layer_of()
    return g, lab, [sorted(set(layer[lab.positives(k)].tolist())) for k in range(3)]


class TestPyramidLabels:
    @pytest.mark.parametrize("face,levels", [
        (BoxPx(16, 16, 128, 128), [3, 4, 5]),
        (BoxPx(2, 2, 16, 16), [0, 1, 2]),
    ])
    def test_face_head_body_on_consecutive_layers(self, face, levels):
        g, lab, found = _face_levels(face)
        for k, layer in enumerate(levels):
            assert layer in found[k]
            # an anchor at that layer covers the scaled region exactly
            best = max(iou(BoxPx(*g.boxes[a]), scale_box(face, 2.0 ** k)) for a in lab.positives(k))
            assert best == 1.0

    def test_context_level_anchor_scales_double(self):
        _, lab, found = _face_levels(BoxPx(40, 40, 64, 64))
        assert 2 in found[0] and 3 in found[1]

    def test_guarantee_rule_every_face_positive(self):
        rng = np.random.default_rng(1)
        g = build_grid(input_size=160)
        cfg = PyramidAnchorConfig()
        for _ in range(50):
            n = int(rng.integers(1, 5))
            faces = [BoxPx(*rng.uniform(0, 120, 2), *rng.uniform(8, 40, 2)) for _ in range(n)]
            lab = label_pyramid(g, faces, cfg)
            for f in range(n):
                assert np.any((lab.matched[0] == f) & (lab.labels[0] == 1))

    def test_guarantee_applies_to_face_level_only(self):
        # best face-level IoU is 81/256 < 0.35; the doubled region lies past every anchor
        g = build_grid(input_size=160)
        lab = label_pyramid(g, [BoxPx(100, 100, 9, 9)], PyramidAnchorConfig())
        assert len(lab.positives(0)) == 1
        assert len(lab.positives(1)) == 0

    def test_tiny_face_ignored(self):
        g = build_grid(input_size=160)
        lab = label_pyramid(g, [BoxPx(60, 60, 6, 6)], PyramidAnchorConfig(threshold=0.1))
        assert len(lab.positives(0)) == 0
        assert np.any(lab.labels[0] == -1)

    def test_ties_go_to_lower_face_index(self):
        g = build_grid(input_size=64)
        f = BoxPx(8, 8, 16, 16)
        lab = label_pyramid(g, [f, f], PyramidAnchorConfig())
        assert set(lab.matched[1][lab.positives(1)].tolist()) == {0}
        # the duplicate still receives exactly one guaranteed face-level anchor
        assert np.sum(lab.matched[0] == 1) == 1

    def test_targets_present_iff_positive_and_decode(self):
        g = build_grid(input_size=160)
        faces = [BoxPx(20, 30, 40, 36), BoxPx(90, 80, 50, 60)]
        lab = label_pyramid(g, faces, PyramidAnchorConfig())
        for k in range(3):
            assert np.all(lab.targets[k][lab.labels[k] != 1] == 0)
        pos = lab.positives(0)
        dec = decode_array(g.boxes[pos], lab.targets[0][pos])
        ref = np.array([faces[m].as_tuple() for m in lab.matched[0][pos]])
        np.testing.assert_allclose(dec, ref, atol=1e-6, rtol=1e-6)

    @given(st.floats(0.1, 0.8), st.floats(0.1, 0.8))
    @settings(max_examples=25, deadline=None)
    def test_threshold_monotone(self, t1, t2):
        lo, hi = sorted((t1, t2))
        g = build_grid(input_size=160)
        faces = [BoxPx(20, 30, 40, 36), BoxPx(90, 80, 50, 60), BoxPx(5, 100, 20, 22)]
        a = label_pyramid(g, faces, PyramidAnchorConfig(threshold=lo))
        b = label_pyramid(g, faces, PyramidAnchorConfig(threshold=hi))
        for k in range(3):
            assert set(b.positives(k)) <= set(a.positives(k))

    def test_no_faces(self):
        lab = label_pyramid(build_grid(input_size=64), [], PyramidAnchorConfig())
        assert not lab.labels.any()

    @pytest.mark.parametrize("kw", [dict(s_pa=1.0), dict(K=-1), dict(threshold=1.0), dict(lambda_k=[1, 1]),
                                    dict(lambda_cls_reg=0.0), dict(lambda_k=[1, -1, 1])])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            PyramidAnchorConfig(**kw)


class TestTargets:
    def test_default_context_params(self):
        p = default_context_params(2)
        assert p[0] == p[1] and p[0].s_w == 1 and p[0].dy_th == 0
        assert (p[2].s_w, p[2].s_h, p[2].dx, p[2].dy_th) == (7 / 8, 1.0, 0.0, 1.0)

    def test_context_transform_matches_closed_forms(self):
        rng = np.random.default_rng(3)
        params = default_context_params(2)
        for _ in range(500):
            t = tuple(rng.normal(0, 1, 4))
            for k in range(3):
                got = context_transform(np.array(t), k, 2.0, params[k])
                np.testing.assert_allclose(got, context_oracle(t, k), rtol=0, atol=1e-12)

    def test_encode_base_form(self):
        t = encode_targets(BoxPx(0, 0, 16, 16), BoxPx(4, 0, 32, 8), 0)
        np.testing.assert_allclose(t, [(20 - 8) / 16, (4 - 8) / 16, np.log(2), np.log(0.5)], atol=1e-15)

    def test_encode_rejects_empty_anchor(self):
        with pytest.raises(ContractError):
            encode_targets(BoxPx(0, 0, 0, 16), BoxPx(0, 0, 8, 8), 0)
        with pytest.raises(ContractError):
            encode_targets_array(np.array([[0, 0, 4, 0.0]]), np.array([[0, 0, 8, 8.0]]), 0, PyramidAnchorConfig())

    def test_decode_zero_and_shift(self):
        a = BoxPx(100, 100, 64, 64)
        assert decode_box(a, (0, 0, 0, 0)) == a
        d = decode_box(a, (0.5, 0, 0, 0))
        assert d.center == (a.center[0] + 32, a.center[1])

    def test_round_trip_1000(self):
        rng = np.random.default_rng(7)
        anchors = np.c_[rng.uniform(-100, 600, (1000, 2)), rng.uniform(4, 512, (1000, 2))]
        faces = np.c_[rng.uniform(0, 600, (1000, 2)), rng.uniform(1, 400, (1000, 2))]
        t = encode_targets_array(anchors, faces, 0, PyramidAnchorConfig())
        assert np.abs(decode_array(anchors, t) - faces).max() < 1e-6 * 640

    def test_decode_clamps_and_flags_in_checked_mode(self):
        a = BoxPx(0, 0, 16, 16)
        d = decode_box(a, (0, 0, 50, -50))
        assert np.isfinite(d.width) and d.width == pytest.approx(16 * np.exp(10))
        with T.checked_mode(), warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            decode_box(a, (0, 0, 50, 0))
        assert any("clamped" in str(x.message) for x in w)
