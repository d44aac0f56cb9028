"""RWKV encoder: time mixing, channel mixing and residual blocks.

Two evaluation routes produce the same numbers:

* parallel: the whole utterance at once on the autodiff tape, with the wkv
  average written as a masked softmax over past frames;
* recurrent: one frame at a time against a :class:`StreamState` whose size
  does not depend on how many frames have been consumed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    d_io: int = 64
    d_att: int = 64
    d_linear: int = 256
    num_blocks: int = 4
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("d_io", "d_att", "d_linear"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


RWKV_SMALL = EncoderConfig(d_io=512, d_att=512, d_linear=2048, num_blocks=18)
RWKV_LARGE = EncoderConfig(d_io=640, d_att=640, d_linear=2560, num_blocks=18)


@dataclass
class TimeMixParams:
    w_r: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    mu_r: Tensor
    mu_k: Tensor
    mu_v: Tensor
    w_raw: Tensor  # decay is exp(w_raw) > 0
    u: Tensor


@dataclass
class ChannelMixParams:
    """w_r: (d_io, d_io) so the receptance gate matches the output width;
    w_k: (d_linear, d_io); w_v: (d_io, d_linear)."""

    w_r: Tensor
    w_k: Tensor
    w_v: Tensor
    mu_r: Tensor
    mu_k: Tensor


@dataclass
class RwkvLayerParams:
    time_mix: TimeMixParams
    channel_mix: ChannelMixParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for k, v in vars(self.time_mix).items():
            out[f"{prefix}.att.{k}"] = v
        for k, v in vars(self.channel_mix).items():
            out[f"{prefix}.ffn.{k}"] = v
        for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            out[f"{prefix}.{k}"] = getattr(self, k)
        return out


def init_layer(rng: np.random.Generator, cfg: EncoderConfig, dtype="f64") -> RwkvLayerParams:
    def uni(out_dim, in_dim):
        b = 1.0 / np.sqrt(in_dim)
        return nx.tensor(rng.uniform(-b, b, size=(out_dim, in_dim)), dtype, requires_grad=True)

    def const(n, v):
        return nx.tensor(np.full(n, v), dtype, requires_grad=True)

    d, a, f = cfg.d_io, cfg.d_att, cfg.d_linear
    tm = TimeMixParams(uni(a, d), uni(a, d), uni(a, d), uni(d, a),
                       const(d, 0.5), const(d, 0.5), const(d, 0.5), const(a, 0.0), const(a, 0.0))
    cm = ChannelMixParams(uni(d, d), uni(f, d), uni(d, f), const(d, 0.5), const(d, 0.5))
    return RwkvLayerParams(tm, cm, const(d, 1.0), const(d, 0.0), const(d, 1.0), const(d, 0.0))


def clamp_mix_factors(layers: list[RwkvLayerParams]) -> None:
    """Project every token-shift factor back onto [0, 1] (call after each update)."""
    for layer in layers:
        for p in (layer.time_mix.mu_r, layer.time_mix.mu_k, layer.time_mix.mu_v,
                  layer.channel_mix.mu_r, layer.channel_mix.mu_k):
            np.clip(p.data, 0.0, 1.0, out=p.data)


# -- token shift -----------------------------------------------------------------
def token_shift(x_t, x_prev, mu):
    """``mu * x_t + (1 - mu) * x_prev``; works on Tensors and ndarrays."""
    return mu * x_t + (1.0 - mu) * x_prev


def _shift_right(x: Tensor) -> Tensor:
    """Sequence delayed by one frame along axis -2, with a zero first frame."""
    zero = Tensor(np.zeros(x.shape[:-2] + (1, x.shape[-1]), dtype=x.dtype))
    if x.shape[-2] == 1:
        return zero
    return nx.concat([zero, x[..., :-1, :]], axis=-2)


# -- wkv -------------------------------------------------------------------------
def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


_EXP_FLOOR = {np.float64: -700.0, np.float32: -80.0}


def wkv_parallel(k, v, w, u) -> Tensor:
    """Decayed attention average over frames 1..t for every t.

    ``k``, ``v``: (..., T, d); ``w`` (> 0) and ``u``: (d,).  Frame i < t gets
    log-weight ``k_i - (t-1-i) w``, frame t gets ``u + k_t``; the result is the
    softmax-weighted mean of ``v`` over those frames.  Evaluated as one taped
    operation over a (..., d, T, T) weight array.
    """
    k, v = _as_tensor(k), _as_tensor(v, k.dtype if isinstance(k, Tensor) else None)
    w, u = _as_tensor(w, k.dtype), _as_tensor(u, k.dtype)
    if np.any(w.data <= 0):
        raise ValueError("wkv decay w must be strictly positive")
    n_t = k.shape[-2]
    t_idx = np.arange(n_t)
    lag = t_idx[:, None] - 1 - t_idx[None, :]             # [t, i] = t-1-i
    neg_lag = np.where(lag >= 0, -lag, 0).astype(k.dtype)
    causal = (lag >= -1).astype(k.dtype)
    kd = np.ascontiguousarray(np.swapaxes(k.data, -1, -2))  # (..., d, T)
    vd = np.ascontiguousarray(np.swapaxes(v.data, -1, -2))
    wd, ud = w.data, u.data
    # row maxima from a running max of k_i + i w, so the shift costs O(T d)
    ramp = kd + t_idx * wd[:, None]
    past_max = np.full_like(kd, -np.inf)
    past_max[..., 1:] = np.maximum.accumulate(ramp, axis=-1)[..., :-1] - (t_idx[1:] - 1) * wd[:, None]
    shift = np.maximum(past_max, ud[:, None] + kd)
    e = wd[:, None, None] * neg_lag                       # (d, T, T)
    e[:, t_idx, t_idx] = ud[:, None]
    if kd.ndim > 2:
        e = e + kd[..., None, :]
    else:
        e += kd[:, None, :]
    e -= shift[..., :, None]
    # exp is very slow on subnormal results; floored weights are < T e^-80
    # relative to the unit weight at each row maximum
    np.maximum(e, _EXP_FLOOR[e.dtype.type], out=e)
    np.exp(e, out=e)
    e *= causal                                           # future frames get exactly zero
    nd = e @ np.stack([vd, np.ones_like(vd)], axis=-1)    # numerator and denominator
    den = nd[..., 1]
    out_d = nd[..., 0] / den
    batch_axes = tuple(range(k.ndim - 2))

    def bw(g):
        weights = e / den[..., None]
        gd = np.swapaxes(g, -1, -2)
        wt = np.swapaxes(weights, -1, -2)
        dv = (wt @ gd[..., None])[..., 0]
        # d logits[t, i] = weights[t, i] * (v_i - out_t) * g_t
        dk = vd * dv - (wt @ (out_d * gd)[..., None])[..., 0]
        wl = weights * neg_lag
        dw = (gd * (wl @ vd[..., None])[..., 0]).sum(axis=-1) - (out_d * gd * wl.sum(axis=-1)).sum(axis=-1)
        diag = weights[..., t_idx, t_idx]
        du = (diag * (vd - out_d) * gd).sum(axis=-1)
        return (np.swapaxes(dk, -1, -2), np.swapaxes(dv, -1, -2),
                dw.sum(axis=batch_axes), du.sum(axis=batch_axes))

    return nx._record(np.swapaxes(out_d, -1, -2), (k, v, w, u), bw, "wkv")


@dataclass
class WkvState:
    """Max-shifted accumulators: true sums are a = a_s * e^p, b = b_s * e^p."""

    a: np.ndarray
    b: np.ndarray
    p: np.ndarray

    @classmethod
    def fresh(cls, d: int, dtype=np.float64) -> "WkvState":
        return cls(np.zeros(d, dtype), np.zeros(d, dtype), np.full(d, nx.sentinel(dtype), dtype))


def wkv_step(state: WkvState, k_t: np.ndarray, v_t: np.ndarray, w: np.ndarray, u: np.ndarray):
    """One recurrent wkv update; returns ``(wkv_t, new_state)``."""
    p, a, b = state.p, state.a, state.b
    uk = u + k_t
    r = np.maximum(p, uk)
    e1, e2 = np.exp(p - r), np.exp(uk - r)
    out = (e1 * a + e2 * v_t) / (e1 * b + e2)
    pw = p - w
    q = np.maximum(pw, k_t)
    e1, e2 = np.exp(pw - q), np.exp(k_t - q)
    return out, WkvState(e1 * a + e2 * v_t, e1 * b + e2, q)


# -- stream state ------------------------------------------------------------------
@dataclass
class LayerState:
    x_prev_time: np.ndarray
    x_prev_chan: np.ndarray
    wkv: WkvState


@dataclass
class StreamState:
    layers: list[LayerState] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: EncoderConfig, dtype=np.float64) -> "StreamState":
        return cls([LayerState(np.zeros(cfg.d_io, dtype), np.zeros(cfg.d_io, dtype),
                               WkvState.fresh(cfg.d_att, dtype)) for _ in range(cfg.num_blocks)])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for s in self.layers:
            out += [s.x_prev_time, s.x_prev_chan, s.wkv.a, s.wkv.b, s.wkv.p]
        return out

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()
                        for a in self.arrays())


# -- sub-layers ----------------------------------------------------------------------
def _sig(x: np.ndarray) -> np.ndarray:
    # overflow-free logistic; a single ufunc keeps the per-frame path cheap
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    xc = x - np.add.reduce(x, axis=-1, keepdims=True) / n
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / n
    return xc * (var + LN_EPS) ** -0.5 * g + b


def time_mixing(x, params: TimeMixParams, state: LayerState | None = None):
    """Time-mixing sub-layer.

    With ``state=None`` evaluates ``x`` of shape (..., T, d_io) in parallel on
    the tape and returns a Tensor.  Otherwise ``x`` is an ndarray (T, d_io)
    processed frame by frame; returns ``(outputs, new_state)``.
    """
    p = params
    if state is None:
        x = _as_tensor(x, p.w_r.dtype)
        xp = _shift_right(x)
        r = nx.linear(token_shift(x, xp, p.mu_r), p.w_r)
        k = nx.linear(token_shift(x, xp, p.mu_k), p.w_k)
        v = nx.linear(token_shift(x, xp, p.mu_v), p.w_v)
        wkv = wkv_parallel(k, v, nx.exp(p.w_raw), p.u)
        return nx.linear(nx.sigmoid(r) * wkv, p.w_o)
    if x.ndim != 2 or x.shape[1] != p.w_r.shape[1]:
        raise ValueError(f"expected (T, {p.w_r.shape[1]}) input, got {x.shape}")
    w_r, w_k, w_v, w_o = p.w_r.data, p.w_k.data, p.w_v.data, p.w_o.data
    mu_r, mu_k, mu_v = p.mu_r.data, p.mu_k.data, p.mu_v.data
    w, u = np.exp(p.w_raw.data), p.u.data
    prev, ws = state.x_prev_time, state.wkv
    out = np.empty((x.shape[0], w_o.shape[0]), dtype=x.dtype)
    for t, xt in enumerate(x):
        dx = xt - prev
        r = w_r @ (prev + mu_r * dx)
        k = w_k @ (prev + mu_k * dx)
        v = w_v @ (prev + mu_v * dx)
        wkv, ws = wkv_step(ws, k, v, w, u)
        out[t] = w_o @ (_sig(r) * wkv)
        prev = xt
    return out, LayerState(prev.copy(), state.x_prev_chan, ws)


def channel_mixing(x, params: ChannelMixParams, state: LayerState | None = None):
    """Channel-mixing sub-layer: ``sigmoid(r') * (W_v' @ relu(k')^2)``.

    Same calling convention as :func:`time_mixing`.
    """
    p = params
    if state is None:
        x = _as_tensor(x, p.w_r.dtype)
        xp = _shift_right(x)
        r = nx.linear(token_shift(x, xp, p.mu_r), p.w_r)
        k = nx.linear(token_shift(x, xp, p.mu_k), p.w_k)
        return nx.sigmoid(r) * nx.linear(nx.squared_relu(k), p.w_v)
    if x.ndim != 2 or x.shape[1] != p.w_r.shape[1]:
        raise ValueError(f"expected (T, {p.w_r.shape[1]}) input, got {x.shape}")
    w_r, w_k, w_v = p.w_r.data, p.w_k.data, p.w_v.data
    mu_r, mu_k = p.mu_r.data, p.mu_k.data
    prev = state.x_prev_chan
    out = np.empty((x.shape[0], w_v.shape[0]), dtype=x.dtype)
    for t, xt in enumerate(x):
        dx = xt - prev
        r = w_r @ (prev + mu_r * dx)
        k = w_k @ (prev + mu_k * dx)
        out[t] = _sig(r) * (w_v @ (np.maximum(k, 0) ** 2))
        prev = xt
    return out, LayerState(state.x_prev_time, prev.copy(), state.wkv)


def rwkv_block(x, layer: RwkvLayerParams, dropout_rate: float = 0.0,
               rng: np.random.Generator | None = None, state: LayerState | None = None):
    """Pre-norm residual block; dropout only when ``rng`` is supplied (parallel mode)."""
    if state is None:
        x = _as_tensor(x, layer.ln1_g.dtype)
        h = time_mixing(nx.layer_norm(x, layer.ln1_g, layer.ln1_b, LN_EPS), layer.time_mix)
        x = x + nx.dropout(h, dropout_rate, rng)
        h = channel_mixing(nx.layer_norm(x, layer.ln2_g, layer.ln2_b, LN_EPS), layer.channel_mix)
        return x + nx.dropout(h, dropout_rate, rng)
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        xt = x[t:t + 1]
        h, state = time_mixing(_ln(xt, layer.ln1_g.data, layer.ln1_b.data), layer.time_mix, state)
        xt = xt + h
        h, state = channel_mixing(_ln(xt, layer.ln2_g.data, layer.ln2_b.data), layer.channel_mix, state)
        out[t] = (xt + h)[0]
    return out, state


def encode(x, layers: list[RwkvLayerParams], dropout_rate: float = 0.0,
           rng: np.random.Generator | None = None) -> Tensor:
    """Parallel encoder over (..., T, d_io)."""
    for layer in layers:
        x = rwkv_block(x, layer, dropout_rate, rng)
    return _as_tensor(x)


def encode_step(x_t: np.ndarray, layers: list[RwkvLayerParams], state: StreamState) -> np.ndarray:
    """Advance every block by one frame; ``state`` is updated in place."""
    h = np.asarray(x_t)[None, :]
    for i, layer in enumerate(layers):
        h, state.layers[i] = rwkv_block(h, layer, state=state.layers[i])
    return h[0]


def encode_stream(x: np.ndarray, layers: list[RwkvLayerParams], state: StreamState | None = None,
                  cfg: EncoderConfig | None = None):
    """Recurrent encoder over (T, d_io); yields one output frame per input frame."""
    x = np.asarray(x)
    if state is None:
        d = x.shape[1]
        d_att = layers[0].time_mix.w_r.shape[0] if layers else d
        state = StreamState([LayerState(np.zeros(d, x.dtype), np.zeros(d, x.dtype),
                                        WkvState.fresh(d_att, x.dtype)) for _ in layers])
    for x_t in x:
        yield encode_step(x_t, layers, state)
