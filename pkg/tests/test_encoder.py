"""RWKV encoder: token shift, wkv in both modes, sub-layers, blocks, stream state."""
import numpy as np
import pytest

from rwkv_asr import numerics as nx
from rwkv_asr.encoder import (RWKV_LARGE, RWKV_SMALL, EncoderConfig, LayerState, StreamState, WkvState,
                              channel_mixing, clamp_mix_factors, encode, encode_step, encode_stream,
                              init_layer, rwkv_block, time_mixing, token_shift, wkv_parallel, wkv_step)
from rwkv_asr.verify import random_layers, wkv_direct, wkv_naive_recurrence

CFG = EncoderConfig(d_io=16, d_att=12, d_linear=32, num_blocks=2, dropout_rate=0.0)


def _wkv_inputs(rng, t, d):
    return (rng.normal(size=(t, d)), rng.normal(size=(t, d)),
            np.exp(rng.normal(size=d)), rng.normal(size=d))


def _recurrent_wkv(k, v, w, u):
    st = WkvState.fresh(k.shape[1], k.dtype)
    out = []
    for kt, vt in zip(k, v):
        o, st = wkv_step(st, kt, vt, w, u)
        out.append(o)
    return np.array(out), st


def _zero(layer):
    for p in list(vars(layer.time_mix).values()) + list(vars(layer.channel_mix).values()):
        p.data[...] = 0.0
    return layer


class TestTokenShift:
    def test_examples(self):
        x, xp = np.array([1.0, -2.0]), np.array([7.0, 9.0])
        np.testing.assert_array_equal(token_shift(x, xp, np.ones(2)), x)
        np.testing.assert_array_equal(token_shift(x, xp, np.zeros(2)), xp)
        assert token_shift(np.array([2.0]), np.array([4.0]), np.array([0.5]))[0] == 3.0


class TestWkv:
    def test_single_frame_returns_v(self, rng):
        k, u, w = rng.normal(size=(1, 2)) * 50, rng.normal(size=2) * 50, np.exp(rng.normal(size=2))
        v = np.array([[1.0, -2.0]])
        np.testing.assert_allclose(wkv_parallel(k, v, w, u).data, v, rtol=1e-15)
        out, _ = wkv_step(WkvState.fresh(2), k[0], v[0], w, u)
        np.testing.assert_allclose(out, v[0], rtol=1e-15)

    def test_constant_values(self, rng):
        k, _, w, u = _wkv_inputs(rng, 30, 5)
        v = np.full((30, 5), -3.25)
        np.testing.assert_allclose(wkv_parallel(k, v, w, u).data, v, rtol=1e-14)
        np.testing.assert_allclose(_recurrent_wkv(k, v, w, u)[0], v, rtol=1e-14)

    def test_direct_sum_oracle(self, rng):
        k, v, w, u = _wkv_inputs(rng, 8, 4)
        ref = wkv_direct(k, v, w, u)
        assert np.max(np.abs(wkv_parallel(k, v, w, u).data - ref)) < 1e-12
        k, v, w, u = _wkv_inputs(rng, 64, 6)
        assert np.max(np.abs(_recurrent_wkv(k, v, w, u)[0] - wkv_direct(k, v, w, u))) < 1e-12

    def test_step_matches_parallel_long(self, rng):
        k, v, w, u = _wkv_inputs(rng, 200, 64)
        par = wkv_parallel(k, v, w, u).data
        assert np.max(np.abs(_recurrent_wkv(k, v, w, u)[0] - par)) < 1e-12

    def test_batched_parallel_matches_single(self, rng):
        k, v = rng.normal(size=(3, 10, 4)), rng.normal(size=(3, 10, 4))
        w, u = np.exp(rng.normal(size=4)), rng.normal(size=4)
        batched = wkv_parallel(k, v, w, u).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], wkv_parallel(k[i], v[i], w, u).data, atol=1e-15)

    def test_large_keys_stay_finite_in_f32(self):
        k = np.full((50, 4), 100.0, np.float32)
        v = np.linspace(-1, 1, 200, dtype=np.float32).reshape(50, 4)
        w, u = np.full(4, 0.5, np.float32), np.zeros(4, np.float32)
        out, st = _recurrent_wkv(k, v, w, u)
        assert np.isfinite(out).all()
        assert all(np.isfinite(a).all() for a in (st.a, st.b, st.p))
        assert np.isfinite(wkv_parallel(k, v, w, u).data).all()
        with np.errstate(all="ignore"):
            assert not np.isfinite(wkv_naive_recurrence(k, v, w, u)).all()

    def test_convex_combination(self, rng):
        k, v, w, u = _wkv_inputs(rng, 40, 5)
        k *= 10
        out = wkv_parallel(k, v, w, u).data
        lo = np.minimum.accumulate(v, axis=0)
        hi = np.maximum.accumulate(v, axis=0)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_non_positive_decay(self, rng):
        k, v, w, u = _wkv_inputs(rng, 4, 3)
        w[1] = 0.0
        with pytest.raises(ValueError):
            wkv_parallel(k, v, w, u)

    def test_gradient(self, rng):
        k, v, w, u = _wkv_inputs(rng, 7, 3)
        params = [nx.tensor(a, requires_grad=True) for a in (k, v, np.log(w), u)]
        r = rng.normal(size=(7, 3))

        def f():
            kk, vv, ww, uu = params
            return (wkv_parallel(kk, vv, nx.exp(ww), uu) * r).sum()

        grads = nx.backward(f(), params)
        for p, g in zip(params, grads):
            assert nx.max_rel_error(g, nx.numerical_grad(f, p)) < 1e-4


class TestSubLayers:
    def test_zero_weights_give_zero_output(self, rng):
        layer = _zero(init_layer(rng, CFG))
        x = rng.normal(size=(5, 16))
        assert not time_mixing(x, layer.time_mix).data.any()
        assert not channel_mixing(x, layer.channel_mix).data.any()

    def test_time_mixing_first_frame(self, rng):
        p = random_layers(rng, CFG)[0].time_mix
        x = rng.normal(size=(1, 16))
        sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
        r = p.w_r.data @ (p.mu_r.data * x[0])
        v = p.w_v.data @ (p.mu_v.data * x[0])
        expected = p.w_o.data @ (sig(r) * v)
        np.testing.assert_allclose(time_mixing(x, p).data[0], expected, rtol=1e-12, atol=1e-14)

    def test_channel_mixing_negative_keys(self, rng):
        p = init_layer(rng, CFG).channel_mix
        p.w_k.data[...] = -np.abs(p.w_k.data)
        x = np.abs(rng.normal(size=(6, 16)))
        assert not channel_mixing(x, p).data.any()

    @pytest.mark.parametrize("which", ["time", "channel"])
    def test_parallel_matches_step(self, which, rng):
        layer = random_layers(rng, CFG)[0]
        x = rng.normal(size=(64, 16))
        st = LayerState(np.zeros(16), np.zeros(16), WkvState.fresh(12))
        if which == "time":
            par, (rec, _) = time_mixing(x, layer.time_mix).data, time_mixing(x, layer.time_mix, st)
        else:
            par, (rec, _) = channel_mixing(x, layer.channel_mix).data, channel_mixing(x, layer.channel_mix, st)
        assert np.max(np.abs(par - rec)) < 1e-12

    def test_shape_mismatch(self, rng):
        layer = init_layer(rng, CFG)
        st = LayerState(np.zeros(16), np.zeros(16), WkvState.fresh(12))
        with pytest.raises(ValueError):
            time_mixing(np.zeros((3, 15)), layer.time_mix, st)


class TestBlock:
    def test_zero_sub_modules_are_identity(self, rng):
        layer = _zero(init_layer(rng, CFG))
        x = rng.normal(size=(9, 16))
        np.testing.assert_array_equal(rwkv_block(x, layer).data, x)

    def test_deterministic_without_dropout(self, rng):
        layer = random_layers(rng, CFG)[0]
        x = rng.normal(size=(9, 16))
        assert rwkv_block(x, layer).data.tobytes() == rwkv_block(x, layer, dropout_rate=0.1).data.tobytes()

    def test_dropout_changes_output_only_when_active(self, rng):
        layer = random_layers(rng, CFG)[0]
        x = rng.normal(size=(9, 16))
        a = rwkv_block(x, layer, 0.5, np.random.default_rng(0)).data
        b = rwkv_block(x, layer, 0.5, np.random.default_rng(0)).data
        assert a.tobytes() == b.tobytes()
        assert not np.allclose(a, rwkv_block(x, layer).data)

    def test_gradient(self, rng):
        cfg = EncoderConfig(d_io=4, d_att=3, d_linear=6, num_blocks=1, dropout_rate=0.0)
        layer = random_layers(rng, cfg, scale=0.5)[0]
        x = nx.tensor(rng.normal(size=(5, 4)), requires_grad=True)
        r = rng.normal(size=(5, 4))
        named = dict(layer.named("b"), x=x)

        def f():
            return (rwkv_block(x, layer) * r).sum()

        grads = nx.backward(f(), list(named.values()))
        for (name, p), g in zip(named.items(), grads):
            assert nx.max_rel_error(g, nx.numerical_grad(f, p)) < 1e-4, name

    def test_mix_factor_clamp(self, rng):
        layer = init_layer(rng, CFG)
        layer.time_mix.mu_k.data[:] = 1.7
        layer.channel_mix.mu_r.data[:] = -0.2
        clamp_mix_factors([layer])
        assert layer.time_mix.mu_k.data.max() == 1.0 and layer.channel_mix.mu_r.data.min() == 0.0


class TestEncoder:
    def test_no_blocks_is_identity(self, rng):
        x = rng.normal(size=(6, 16))
        np.testing.assert_array_equal(encode(x, []).data, x)
        np.testing.assert_array_equal(np.array(list(encode_stream(x, []))), x)

    @pytest.mark.parametrize("dtype,tol", [("f64", 1e-10), ("f32", 1e-5)])
    def test_dual_mode(self, dtype, tol):
        rng = np.random.default_rng(5)
        cfg = EncoderConfig(d_io=64, d_att=64, d_linear=256, num_blocks=4, dropout_rate=0.0)
        layers = random_layers(rng, cfg, dtype, projections=dtype == "f64")
        x = rng.normal(size=(200, 64)).astype(nx.DTYPES[dtype])
        par = encode(nx.Tensor(x), layers).data
        rec = np.stack(list(encode_stream(x, layers)))
        assert par.dtype == rec.dtype == nx.DTYPES[dtype]
        assert np.max(np.abs(par - rec)) < tol

    def test_causality_exact(self, rng):
        layers = random_layers(rng, CFG)
        x = rng.normal(size=(30, 16))
        y = x.copy()
        y[17:] = rng.normal(size=(13, 16)) * 100
        np.testing.assert_array_equal(encode(x, layers).data[:17], encode(y, layers).data[:17])
        sx, sy = list(encode_stream(x, layers)), list(encode_stream(y, layers))
        for a, b in zip(sx[:17], sy[:17]):
            assert a.tobytes() == b.tobytes()

    def test_state_size_constant(self, rng):
        layers = random_layers(rng, CFG)
        st = StreamState.fresh(CFG)
        sizes = {}
        for t in range(1, 2001):
            encode_step(rng.normal(size=16), layers, st)
            if t in (10, 2000):
                sizes[t] = len(st.to_bytes())
        assert sizes[10] == sizes[2000]

    def test_fresh_state(self):
        st = StreamState.fresh(CFG)
        for layer in st.layers:
            assert not layer.x_prev_time.any() and not layer.x_prev_chan.any()
            assert not layer.wkv.a.any() and not layer.wkv.b.any()
            assert np.all(layer.wkv.p == nx.sentinel(np.float64))

    def test_presets(self):
        assert (RWKV_SMALL.d_io, RWKV_SMALL.d_att, RWKV_SMALL.d_linear, RWKV_SMALL.num_blocks) == (512, 512, 2048, 18)
        assert (RWKV_LARGE.d_io, RWKV_LARGE.d_linear, RWKV_LARGE.num_blocks) == (640, 2560, 18)
        with pytest.raises(ValueError):
            EncoderConfig(dropout_rate=1.0)
        with pytest.raises(ValueError):
            EncoderConfig(d_io=0)
