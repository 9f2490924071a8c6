import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcascade import engine as E
from qcascade import model as M
from qcascade import quantizer as Q

from conftest import make_tiny_graph, make_tiny_eval


def fmt(wl, fb):
    return Q.FixedPointFormat(wl, fb)


class TestQuantizeTensor:
    def test_exactly_representable(self):
        q = Q.quantize_tensor(np.array([0.75]), fmt(4, 2))
        assert q.values[0] == 3
        assert Q.dequantize(q)[0] == 0.75

    def test_saturation(self):
        q = Q.quantize_tensor(np.array([10.0]), fmt(4, 2))
        assert q.values[0] == 7
        assert q.saturated == 1
        assert Q.dequantize(q)[0] == 1.75

    def test_round_trip_bound_brute_force(self):
        # oracle: the bound |x - dq(q(x))| <= 2**(-f-1) checked value by value
        rng = np.random.default_rng(42)
        f = fmt(8, 4)
        xs = rng.uniform(f.min_value, f.max_value, 1000)
        err = np.abs(xs - Q.dequantize(Q.quantize_tensor(xs, f)))
        assert err.max() <= 2.0 ** (-f.frac_bits - 1) + 1e-15

    def test_out_of_range_clamps_to_endpoint(self):
        f = fmt(6, 3)
        q = Q.quantize_tensor(np.array([1e6, -1e6]), f)
        assert Q.dequantize(q)[0] == f.max_value
        assert Q.dequantize(q)[1] == f.min_value

    def test_round_half_to_even(self):
        # 0.5 scale steps: 1.5*2 = 3 -> rounds to even? values at exact ties
        f = fmt(8, 1)
        q = Q.quantize_tensor(np.array([0.25, 0.75, -0.25, -0.75]), f)
        # ties 0.5, 1.5, -0.5, -1.5 -> 0, 2, 0, -2
        assert q.values.tolist() == [0, 2, 0, -2]

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(2, 16),
        st.integers(-8, 12),
        st.floats(-100, 100, allow_nan=False),
        st.floats(-100, 100, allow_nan=False),
    )
    def test_monotone(self, wl, fb, x, y):
        f = fmt(wl, fb)
        qx = Q.quantize_tensor(np.array([x]), f).values[0]
        qy = Q.quantize_tensor(np.array([y]), f).values[0]
        if x <= y:
            assert qx <= qy


class TestDequantize:
    def test_zero(self):
        assert Q.dequantize(Q.QuantizedTensor(np.array([0]), fmt(4, 2)))[0] == 0.0

    def test_negative_full_scale(self):
        assert Q.dequantize(Q.QuantizedTensor(np.array([-8]), fmt(4, 2)))[0] == -2.0

    def test_quantize_dequantize_identity(self):
        f = fmt(6, 2)
        vals = np.arange(f.qmin, f.qmax + 1)
        q = Q.QuantizedTensor(vals, f)
        q2 = Q.quantize_tensor(Q.dequantize(q), f)
        np.testing.assert_array_equal(q.values, q2.values)


class TestRescale:
    def test_left_shift_exact(self):
        np.testing.assert_array_equal(
            Q.rescale_int(np.array([3, -5]), 2), np.array([12, -20])
        )

    def test_right_shift_half_even(self):
        vals = np.array([-3, -1, 1, 3, 5])
        # /2: -1.5, -0.5, 0.5, 1.5, 2.5 -> -2, 0, 0, 2, 2
        np.testing.assert_array_equal(
            Q.rescale_int(vals, -1), np.array([-2, 0, 0, 2, 2])
        )

    @settings(max_examples=200, deadline=None)
    @given(st.integers(-(2**20), 2**20), st.integers(1, 12))
    def test_right_shift_matches_float_rounding(self, v, s):
        got = Q.rescale_int(np.array([v]), -s)[0]
        want = round(v / (2**s))  # python's round is half-to-even
        assert got == want


class TestDeriveLpuWeights:
    def test_spec_example(self):
        h = Q.QuantizedTensor(np.array([127]), fmt(8, 6))
        lp = Q.derive_lpu_weights(h, fmt(4, 2))
        assert lp.values[0] == 7  # round(127/16) = 8, saturates to 7

    def test_identity_when_formats_match(self):
        h = Q.QuantizedTensor(np.array([-3, 0, 5]), fmt(8, 4))
        np.testing.assert_array_equal(Q.derive_lpu_weights(h, fmt(8, 4)).values, h.values)

    def test_all_zero(self):
        h = Q.QuantizedTensor(np.zeros(10, np.int64), fmt(8, 6))
        assert not Q.derive_lpu_weights(h, fmt(4, 2)).values.any()

    def test_wordlength_must_not_grow(self):
        h = Q.QuantizedTensor(np.array([1]), fmt(4, 2))
        with pytest.raises(M.ValidationError):
            Q.derive_lpu_weights(h, fmt(8, 2))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**16), st.integers(2, 8), st.integers(-2, 8))
    def test_within_one_ulp_of_direct_quantisation(self, seed, lwl, lfb):
        # double rounding can differ from direct quantisation by at most 1 ulp
        rng = np.random.default_rng(seed)
        hfmt, lfmt = fmt(8, 6), fmt(lwl, lfb)
        x = rng.uniform(-2.5, 2.5, 32)
        h = Q.quantize_tensor(x, hfmt)
        via_hpu = Q.derive_lpu_weights(h, lfmt)
        direct = Q.quantize_tensor(Q.dequantize(h), lfmt)
        assert np.abs(via_hpu.values - direct.values).max() <= 1
        # saturation agrees at the endpoints
        sat = (direct.values == lfmt.qmax) | (direct.values == lfmt.qmin)
        np.testing.assert_array_equal(via_hpu.values[sat], direct.values[sat])


class TestFitFracBits:
    def test_all_zero_defaults(self):
        assert Q.fit_frac_bits(0.0, 8) == 7

    def test_fits_without_saturation(self):
        for max_abs in (0.3, 1.0, 7.9, 100.0):
            for wl in (3, 8, 16):
                f = Q.fit_frac_bits(max_abs, wl)
                qmax = (1 << (wl - 1)) - 1
                assert max_abs * 2.0**f <= qmax
                assert max_abs * 2.0 ** (f + 1) > qmax


class TestProfile:
    def test_weight_maxima_bounded(self):
        g = make_tiny_graph()
        ev = make_tiny_eval(g)
        stats = Q.profile_layer_ranges(g, ev)
        for layer in g.layers:
            if M.has_weights(layer):
                assert stats.weight_max_abs[layer.name] == pytest.approx(
                    float(np.abs(g.weights[layer.name][0]).max())
                )

    def test_all_zero_weights_default_frac(self):
        g = make_tiny_graph()
        g.weights["fc"] = (
            np.zeros_like(g.weights["fc"][0]),
            np.zeros_like(g.weights["fc"][1]),
        )
        ev = make_tiny_eval(g)
        stats = Q.profile_layer_ranges(g, ev)
        assert stats.weight_max_abs["fc"] == 0.0
        scheme = Q.initial_scheme(g, stats, 8)
        assert scheme.layers["fc"].weight.frac_bits == 7

    def test_activation_maxima_match_naive_forward(self):
        # oracle: direct convolution loops, nothing shared with the engine
        g = make_tiny_graph()
        ev = make_tiny_eval(g, n=6)
        stats = Q.profile_layer_ranges(g, ev)
        maxima = {layer.name: 0.0 for layer in g.layers}
        for s in ev.samples.astype(np.float64):
            x = s
            for layer in g.layers:
                maxima[layer.name] = max(maxima[layer.name], float(np.abs(x).max()))
                x = _naive_layer(g, layer, x)
        for name, got in stats.activation_max_abs.items():
            assert got == pytest.approx(maxima[name], rel=1e-12)

    def test_empty_eval_rejected(self):
        g = make_tiny_graph()
        ev = make_tiny_eval(g, n=2)
        ev.samples = ev.samples[:0]
        ev.labels = ev.labels[:0]
        with pytest.raises(M.ValidationError):
            Q.profile_layer_ranges(g, ev)


def _naive_layer(g, layer, x):
    if isinstance(layer, M.Conv):
        w, b = g.weights[layer.name]
        c, h, wd = x.shape
        oh = (h + 2 * layer.pad - layer.kernel_h) // layer.stride + 1
        ow = (wd + 2 * layer.pad - layer.kernel_w) // layer.stride + 1
        xp = np.pad(x, ((0, 0), (layer.pad, layer.pad), (layer.pad, layer.pad)))
        out = np.zeros((layer.out_ch, oh, ow))
        for o in range(layer.out_ch):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[
                        :,
                        i * layer.stride : i * layer.stride + layer.kernel_h,
                        j * layer.stride : j * layer.stride + layer.kernel_w,
                    ]
                    out[o, i, j] = (patch * w[o]).sum() + b[o]
        return out
    if isinstance(layer, M.FullyConnected):
        w, b = g.weights[layer.name]
        return x.reshape(-1) @ w.astype(np.float64).T + b
    if isinstance(layer, M.ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, M.MaxPool):
        c, h, wd = x.shape
        oh, ow = (h - layer.size) // layer.stride + 1, (wd - layer.size) // layer.stride + 1
        out = np.zeros((c, oh, ow))
        for i in range(oh):
            for j in range(ow):
                out[:, i, j] = x[
                    :,
                    i * layer.stride : i * layer.stride + layer.size,
                    j * layer.stride : j * layer.stride + layer.size,
                ].max(axis=(1, 2))
        return out
    if isinstance(layer, M.Softmax):
        z = x - x.max()
        e = np.exp(z)
        return e / e.sum()
    raise AssertionError(layer)


class TestSearch:
    def test_wordlength_16_matches_full_precision(self, fixture_model, fixture_eval, sweep_points):
        ref = E.forward_float(fixture_model, fixture_eval.samples)
        ref_err = E.error_rate(ref, fixture_eval.labels, "top1")
        pt16 = next(p for p in sweep_points if p.wordlength == 16)
        assert pt16.error == pytest.approx(ref_err, abs=1e-12)

    def test_sweep_monotone_with_slack(self, sweep_points):
        errs = {p.wordlength: p.error for p in sweep_points}
        for wl in range(2, 16):
            assert errs[wl + 1] <= errs[wl] + 0.02

    def test_search_dominates_range_only_seed(self):
        g = make_tiny_graph(seed=5)
        ev = make_tiny_eval(g, n=24, seed=6)
        stats = Q.profile_layer_ranges(g, ev)
        seed_scheme = Q.initial_scheme(g, stats, 5)
        seed_err = E.evaluate_accuracy(E.QuantizedModel.from_master(g, seed_scheme), ev)
        found = Q.search_scaling_factors(g, ev, 5, stats=stats)
        found_err = E.evaluate_accuracy(E.QuantizedModel.from_master(g, found), ev)
        assert found_err <= seed_err

    def test_deterministic(self):
        g = make_tiny_graph(seed=5)
        ev = make_tiny_eval(g, n=16, seed=6)
        a = Q.search_scaling_factors(g, ev, 6)
        b = Q.search_scaling_factors(g, ev, 6)
        assert a.to_json() == b.to_json()


class TestSelectWordlengths:
    def test_tolerance_zero_hpu_at_most_8(self, fixture_model, fixture_eval, sweep_points):
        sel = Q.select_wordlengths(
            fixture_model, fixture_eval, 0.0, sweep=sweep_points
        )
        assert sel.hpu.wordlength <= 8

    def test_hpu_meets_tolerance_always(self, fixture_model, fixture_eval, sweep_points):
        for tol in (0.0, 0.01, 0.05):
            sel = Q.select_wordlengths(
                fixture_model, fixture_eval, tol, sweep=sweep_points
            )
            hpu_err = next(
                p.error for p in sweep_points if p.wordlength == sel.hpu.wordlength
            )
            assert hpu_err - sel.reference_error <= tol + 1e-12

    def test_paper_shaped_outcome(self, fixture_model, fixture_eval, sweep_points):
        # 4-bit degrades sharply, 8-bit complies: LPU < HPU <= 8 at 1% tolerance
        sel = Q.select_wordlengths(
            fixture_model, fixture_eval, 0.01, sweep=sweep_points
        )
        errs = {p.wordlength: p.error for p in sweep_points}
        assert errs[4] - sel.reference_error > 0.05
        assert sel.hpu.wordlength <= 8
        assert sel.lpu.wordlength < sel.hpu.wordlength

    def test_full_tolerance_degenerates_to_smallest(self, fixture_model, fixture_eval, sweep_points):
        sel = Q.select_wordlengths(
            fixture_model, fixture_eval, 1.0, sweep=sweep_points
        )
        assert sel.lpu.wordlength == min(p.wordlength for p in sweep_points)

    def test_scheme_json_round_trip(self, sweep_points):
        scheme = sweep_points[0].scheme
        back = Q.QuantScheme.from_json(scheme.to_json())
        assert back.to_json() == scheme.to_json()
