import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactnet import tensor_core as tc
from tactnet.models import (
    CheckpointError, Dense, FeatureSet, Flatten, ModelGraph, Residual,
    build_linear, build_tactnet, extract_features, load_checkpoint, parameter_count,
    save_checkpoint,
)

from conftest import rel_error


def closed_form_count(variant, rows=28, cols=50, cin=1, k=22):
    """Per-layer formula audit, independent of the graph's bookkeeping."""
    conv = lambda f, a, b: f * f * a * b + b
    bn = lambda c: 2 * c
    ceil2 = lambda v: -(-v // 2)
    stacks = {"tactnet4": [(5, 8), (3, 16), (3, 32)],
              "tactnet6": [(5, 8), (5, 16), (3, 32), (3, 64), (3, 128)]}
    total = 0
    r, c = rows, cols
    if variant in stacks:
        for f, cout in stacks[variant]:
            total += conv(f, cin, cout) + bn(cout)
            cin = cout
            r, c = ceil2(r), ceil2(c)
        return total + r * c * cin * k + k
    total += conv(3, cin, 16) + bn(16)
    r, c, cin = ceil2(r), ceil2(c), 16
    for cout, stride in [(32, 2), (64, 2), (128, 2), (128, 1)]:
        total += conv(3, cin, cout) + bn(cout) + conv(3, cout, cout) + bn(cout)
        if stride != 1 or cin != cout:
            total += conv(1, cin, cout)
        if stride == 2:
            r, c = ceil2(r), ceil2(c)
        cin = cout
    return total + r * c * cin * k + k


class TestBuild:
    def test_tactnet4_ladder(self):
        g = build_tactnet("tactnet4")
        pooled = [g.shapes[i + 1][:2] for i, l in enumerate(g.layers) if l.kind == "maxpool"]
        assert [g.input_shape[:2]] + pooled == [(28, 50), (14, 25), (7, 13), (4, 7)]
        head = g.layers[g.head_index]
        assert (head.in_dim, head.out_dim) == (896, 22)

    def test_tactnet6_final_map(self):
        g = build_tactnet("tactnet6")
        assert g.shapes[g.head_index - 1] == (1, 2, 128)
        assert g.layers[g.head_index].in_dim == 256

    @pytest.mark.parametrize("shape", [(7, 13), (10, 18), (14, 25), (20, 35)])
    def test_tactnet6_adjusts_to_sweep_grids(self, shape):
        g = build_tactnet("tactnet6", *shape)
        assert g.input_shape == (*shape, 1) and g.shapes[-1] == (22,)

    def test_too_small_rejected(self):
        with pytest.raises(tc.ShapeError, match="at least 7x7"):
            build_tactnet("tactnet4", 6, 13)

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown variant"):
            build_tactnet("tactnet5")

    def test_residual_projection_only_when_needed(self):
        g = build_tactnet("tactresnet")
        blocks = [l for l in g.layers if isinstance(l, Residual)]
        assert [b.proj is not None for b in blocks] == [True, True, True, False]

    def test_chain_mismatch_rejected(self):
        with pytest.raises(tc.ShapeError):
            ModelGraph([Dense("fc", 5, 22)], (4,))
        with pytest.raises(tc.ShapeError, match="logits"):
            ModelGraph([Dense("fc", 4, 10)], (4,))


class TestParameterCount:
    def test_single_fc(self):
        assert parameter_count(build_linear(37)) == 37 * 22 + 22

    @pytest.mark.parametrize("variant,expected", [("tactnet4", 25_862), ("tactnet6", 106_566)])
    def test_plain_counts(self, variant, expected):
        assert parameter_count(build_tactnet(variant)) == expected == closed_form_count(variant)

    def test_resnet_matches_oracle(self):
        assert parameter_count(build_tactnet("tactresnet")) == closed_form_count("tactresnet")

    @pytest.mark.parametrize("variant", ["tactnet4", "tactnet6", "tactresnet"])
    @pytest.mark.parametrize("shape", [(7, 13), (14, 25), (32, 56)])
    def test_oracle_off_native_grid(self, variant, shape):
        assert parameter_count(build_tactnet(variant, *shape)) == closed_form_count(variant, *shape)

    def test_running_stats_excluded(self):
        g = build_tactnet("tactnet4")
        assert all(name not in g.params for name in g.state_names())


class TestForward:
    def test_zero_input_finite(self):
        out = build_tactnet("tactnet4").forward(np.zeros((3, 28, 50)))
        assert out.shape == (3, 22) and np.all(np.isfinite(out))

    def test_single_image_infer(self, rng):
        out = build_tactnet("tactnet6").forward(rng.random((1, 28, 50, 1)), mode="infer")
        assert out.shape == (1, 22)

    def test_single_image_train_rejected(self, rng):
        with pytest.raises(tc.ShapeError):
            build_tactnet("tactnet4").forward(rng.random((1, 28, 50)), mode="train")

    @pytest.mark.parametrize("variant", ["tactnet4", "tactnet6", "tactresnet"])
    def test_duplicated_rows_identical(self, variant, rng):
        x = rng.random((2, 28, 50))
        out = build_tactnet(variant).forward(x[[0, 1, 0, 1]])
        np.testing.assert_array_equal(out[0], out[2])
        np.testing.assert_array_equal(out[1], out[3])

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(tc.ShapeError, match="does not match"):
            build_tactnet("tactnet4").forward(rng.random((2, 14, 25)))

    def test_deterministic_build(self):
        assert build_tactnet("tactnet6", seed=3).checksum() == build_tactnet("tactnet6", seed=3).checksum()
        assert build_tactnet("tactnet6", seed=3).checksum() != build_tactnet("tactnet6", seed=4).checksum()


class TestFeatures:
    def test_tactnet6_dim(self, rng):
        fs = extract_features(build_tactnet("tactnet6"), rng.random((5, 28, 50)), np.arange(5))
        assert fs.features.shape == (5, 256) and fs.dim == 256

    def test_duplicated_frames(self, rng):
        x = rng.random((1, 28, 50)).repeat(3, axis=0)
        f = extract_features(build_tactnet("tactnet4"), x).features
        np.testing.assert_array_equal(f[0], f[1])
        np.testing.assert_array_equal(f[0], f[2])

    def test_row_counts_follow_batch(self, rng):
        g = build_tactnet("tactnet4")
        for n in (0, 1, 7, 300):
            assert len(extract_features(g, rng.random((n, 28, 50)))) == n

    def test_cut_beyond_head_rejected(self, rng):
        g = build_tactnet("tactnet4")
        with pytest.raises(ValueError, match="beyond"):
            extract_features(g, rng.random((2, 28, 50)), cut=len(g.layers))

    def test_named_cut(self, rng):
        fs = extract_features(build_tactnet("tactnet4"), rng.random((2, 28, 50)), cut="pool2")
        assert fs.dim == 7 * 13 * 16

    def test_featureset_validation(self):
        with pytest.raises(ValueError, match="labels"):
            FeatureSet(np.zeros((3, 2)), [0, 1])
        with pytest.raises(ValueError, match="labels must lie"):
            FeatureSet(np.zeros((2, 2)), [0, 22])


def _sampled_grad_check(graph, x, y, per_param=4, h=1e-5, seed=0):
    """Max relative error between backprop and central differences on sampled entries."""
    rng = np.random.default_rng(seed)

    def loss():
        return tc.softmax_cross_entropy(graph.run(x, "train")[0], y)[0]

    logits, tape = graph.run(x, "train", record=True)
    _, dlogits, _ = tc.softmax_cross_entropy(logits, y)
    _, grads = graph.backward(dlogits, tape)
    worst = 0.0
    for name in graph.param_names():
        p = graph.params[name]
        for flat in rng.choice(p.size, size=min(per_param, p.size), replace=False):
            i = np.unravel_index(flat, p.shape)
            old = p[i]
            p[i] = old + h
            fp = loss()
            p[i] = old - h
            fm = loss()
            p[i] = old
            num = (fp - fm) / (2 * h)
            # biases ahead of train-mode BN have an exactly zero gradient, so
            # the floor must sit above finite-difference roundoff (~1e-10)
            worst = max(worst, rel_error(np.array(grads[name][i]), np.array(num), floor=1e-6))
    return worst


class TestGradients:
    @pytest.mark.parametrize("variant", ["tactnet4", "tactnet6", "tactresnet"])
    def test_end_to_end(self, variant):
        g = build_tactnet(variant, seed=1, dtype=np.float64)
        x = np.random.default_rng(2).random((2, 28, 50))
        assert _sampled_grad_check(g, x, np.array([3, 17])) < 1e-3

    def test_input_gradient_skipped_on_request(self, rng):
        g = build_tactnet("tactnet4", dtype=np.float64)
        logits, tape = g.run(rng.random((2, 28, 50)), "train", record=True)
        dx, grads = g.backward(np.ones_like(logits), tape, need_input_grad=False)
        assert dx is None and set(grads) == set(g.param_names())


class TestResidual:
    def test_zero_second_conv_is_identity(self, rng):
        block = Residual("r", 8, 8, 1)
        g = ModelGraph([block, *_head(6 * 9 * 8)], (6, 9, 8), dtype=np.float64)
        g.params["r.conv_b.w"][:] = 0
        x = np.maximum(rng.normal(size=(3, 6, 9, 8)), 0)
        for mode in ("train", "infer"):
            out, _ = block.forward(x, g.params, g.state, mode)
            np.testing.assert_allclose(out, x, atol=1e-12)

    def test_projection_shape(self, rng):
        block = Residual("r", 4, 8, 2)
        assert block.out_shape((7, 13, 4)) == (4, 7, 8)


def _head(dim):
    return [Flatten("flat"), Dense("fc", dim, 22)]


class TestSerialization:
    @pytest.mark.parametrize("variant", ["tactnet4", "tactresnet"])
    def test_spec_round_trip(self, variant, rng):
        g = build_tactnet(variant, 14, 25, seed=5)
        h = ModelGraph.from_spec(g.to_spec(), g.params, g.state)
        x = rng.random((2, 14, 25))
        assert parameter_count(h) == parameter_count(g)
        np.testing.assert_array_equal(h.forward(x), g.forward(x))

    def test_checkpoint_round_trip(self, tmp_path, rng):
        g = build_tactnet("tactnet6", seed=2)
        x = rng.random((3, 28, 50))
        g.run(x, "train")  # move running stats off their initial values
        save_checkpoint(g, tmp_path / "m.tnet")
        h = load_checkpoint(tmp_path / "m.tnet")
        assert h.checksum() == g.checksum() and h.to_spec() == g.to_spec()
        np.testing.assert_array_equal(h.forward(x), g.forward(x))
        assert (tmp_path / "m.tnet").read_bytes()[:4] == b"TNET"

    def test_checkpoint_errors(self, tmp_path):
        g = build_linear(4)
        path = tmp_path / "m.tnet"
        save_checkpoint(g, path)
        data = path.read_bytes()
        for bad, msg in [(b"XXXX" + data[4:], "not a TNET"), (data[:4] + b"\x09\x00" + data[6:], "version"),
                         (data[:-3], "truncated"), (data + b"\x00", "trailing")]:
            path.write_bytes(bad)
            with pytest.raises(CheckpointError, match=msg):
                load_checkpoint(path)

    def test_copy_is_independent(self):
        g = build_linear(4)
        h = g.copy(np.float64)
        h.params["fc.w"][:] = 0
        assert h.dtype == np.float64 and np.any(g.params["fc.w"] != 0)


@settings(max_examples=15, deadline=None)
@given(rows=st.integers(7, 40), cols=st.integers(7, 60), variant=st.sampled_from(["tactnet4", "tactnet6", "tactresnet"]))
def test_heads_always_emit_22_logits(rows, cols, variant):
    g = build_tactnet(variant, rows, cols)
    assert g.shapes[-1] == (22,)
    assert parameter_count(g) == closed_form_count(variant, rows, cols)
