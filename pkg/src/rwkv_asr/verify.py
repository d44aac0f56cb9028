"""Self-checks behind ``rwkv-asr verify``: dual-mode equivalence, gradients, oracles.

Each check returns a :class:`Check`; the reference computations here are
deliberately naive (direct sums, plain loops) so they stay independent of
the code paths they audit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .bat import build_band, cif_align, bat_loss
from .encoder import EncoderConfig, encode, encode_stream, init_layer
from .model import ModelConfig, TransducerModel
from .transducer import enumerate_alignments, rnnt_loss, rnnt_loss_batch, rnnt_loss_bruteforce


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# -- reference computations ----------------------------------------------------------
def wkv_direct(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Literal double sum of the decayed average (no stabilization, f64)."""
    t_len, d = k.shape
    out = np.zeros((t_len, d))
    for t in range(t_len):
        for c in range(d):
            num = math.exp(u[c] + k[t, c]) * v[t, c]
            den = math.exp(u[c] + k[t, c])
            for i in range(t):
                e = math.exp(-(t - 1 - i) * w[c] + k[i, c])
                num += e * v[i, c]
                den += e
            out[t, c] = num / den
    return out


def wkv_naive_recurrence(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """The unstabilized a/b recurrence, in the dtype of the inputs."""
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.zeros_like(k[0])
        b = np.zeros_like(k[0])
        decay = np.exp(-w)
        out = np.empty_like(k)
        for t in range(k.shape[0]):
            e = np.exp(u + k[t])
            out[t] = (a + e * v[t]) / (b + e)
            a = decay * a + np.exp(k[t]) * v[t]
            b = decay * b + np.exp(k[t])
    return out


def random_layers(rng: np.random.Generator, cfg: EncoderConfig, dtype="f64", scale: float = 0.3,
                  projections: bool = True):
    """Initialized layers with randomized mix factors, decay, bonus and norms.

    With ``projections`` the weight matrices are perturbed by ``scale`` as
    well, which drives activations far past the initialization scale.
    """
    layers = [init_layer(rng, cfg, dtype) for _ in range(cfg.num_blocks)]
    for layer in layers:
        for name, p in layer.named("b").items():
            if ".mu_" in name:
                p.data[...] = rng.uniform(0.0, 1.0, size=p.shape)
            elif p.ndim == 1 or projections:
                p.data += rng.normal(0.0, scale, size=p.shape).astype(p.dtype)
    return layers


def tiny_model(rng: np.random.Generator, blocks: int = 2, dtype: str = "f64") -> TransducerModel:
    cfg = ModelConfig(EncoderConfig(d_io=8, d_att=8, d_linear=16, num_blocks=blocks, dropout_rate=0.0),
                      vocab=4, d_pred=8, d_joint=8, conv_channels=2, dtype=dtype)
    model = TransducerModel(cfg, rng)
    for name, p in model.named_parameters().items():
        if ".mu_" in name:
            p.data[...] = rng.uniform(0.0, 1.0, size=p.shape)
        else:
            p.data += rng.normal(0.0, 0.2, size=p.shape)
    return model


# -- suites -------------------------------------------------------------------------
def check_equivalence(seed: int = 0, seeds: int = 3, t_len: int = 200) -> list[Check]:
    out = []
    worst = {"f64": 0.0, "f32": 0.0}
    for s in range(seeds):
        for dt in ("f64", "f32"):
            rng = np.random.default_rng([seed, s])
            cfg = EncoderConfig(d_io=64, d_att=64, d_linear=256, num_blocks=4, dropout_rate=0.0)
            layers = random_layers(rng, cfg, dt, projections=dt == "f64")
            x = rng.normal(size=(t_len, 64)).astype(nx.DTYPES[dt])
            par = encode(nx.Tensor(x), layers).data
            rec = np.stack(list(encode_stream(x, layers)))
            worst[dt] = max(worst[dt], float(np.max(np.abs(par - rec))))
    out.append(Check("dual-mode f64", worst["f64"] < 1e-10, f"max |diff| {worst['f64']:.2e} < 1e-10"))
    out.append(Check("dual-mode f32", worst["f32"] < 1e-5, f"max |diff| {worst['f32']:.2e} < 1e-5"))

    from .encoder import WkvState, wkv_step
    rng = np.random.default_rng([seed, 99])
    k, v = rng.normal(size=(64, 8)), rng.normal(size=(64, 8))
    w, u = np.exp(rng.normal(size=8)), rng.normal(size=8)
    st = WkvState.fresh(8)
    rec = []
    for t in range(64):
        o, st = wkv_step(st, k[t], v[t], w, u)
        rec.append(o)
    err = float(np.max(np.abs(np.array(rec) - wkv_direct(k, v, w, u))))
    out.append(Check("wkv recurrence vs direct sum", err < 1e-12, f"max |diff| {err:.2e} < 1e-12"))

    from .decode import DecodeSession, decode_features
    rng = np.random.default_rng([seed, 7])
    model = tiny_model(rng, blocks=2)
    same = True
    for _ in range(10):
        feats = rng.normal(size=(int(rng.integers(7, 60)), 80))
        sess = DecodeSession(model)
        cuts = np.sort(rng.integers(0, len(feats), size=3))
        streamed = []
        for chunk in np.split(feats, cuts):
            streamed += sess.feed(chunk)
        same &= streamed == decode_features(feats, model, "parallel")
    out.append(Check("offline vs streaming decode", bool(same), "10 random utterances, random chunking"))
    return out


def check_gradients(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng([seed, 3])
    model = tiny_model(rng, blocks=2)
    feats = rng.normal(size=(20, 80))
    y = rng.integers(1, model.config.vocab + 1, size=2)

    def loss():
        h, _ = model.encode_features(feats)
        return rnnt_loss(h, y, model.transducer)

    named = {k: v for k, v in model.named_parameters().items() if not k.startswith("cif.")}
    grads = nx.backward(loss(), list(named.values()))
    worst, worst_name = 0.0, ""
    for (name, p), g in zip(named.items(), grads):
        err = nx.max_rel_error(g, nx.numerical_grad(loss, p))
        if err > worst:
            worst, worst_name = err, name
    return [Check("finite-difference gradients (2-block stack)", worst < 1e-4,
                  f"max rel error {worst:.2e} at {worst_name} < 1e-4 over {len(named)} tensors")]


def check_oracles(seed: int = 0, models: int = 10) -> list[Check]:
    rng = np.random.default_rng([seed, 5])
    worst = 0.0
    counts_ok = True
    for t in range(1, 6):
        for u in range(0, 4):
            counts_ok &= sum(1 for _ in enumerate_alignments(t, u)) == math.comb(t + u - 1, u)
            for _ in range(models):
                model = tiny_model(rng, blocks=0)
                h = rng.normal(size=(t, 8))
                y = rng.integers(1, 5, size=u)
                worst = max(worst, abs(rnnt_loss(h, y, model.transducer).item()
                                       - rnnt_loss_bruteforce(h, y, model.transducer)))
    out = [Check("rnnt loss vs enumeration", worst < 1e-10, f"max |diff| {worst:.2e} < 1e-10"),
           Check("alignment count C(T+U-1,U)", bool(counts_ok), "T in 1..5, U in 0..3")]
    bound_ok = True
    for _ in range(50):
        model = tiny_model(rng, blocks=0)
        t, u, r = int(rng.integers(1, 10)), int(rng.integers(0, 7)), int(rng.integers(2, 6))
        if u > t * (r - 1):
            continue
        h = rng.normal(size=(t, 8))
        y = rng.integers(1, 5, size=u)
        band = build_band(cif_align(h, u, model.cif), t, u, r)
        full = rnnt_loss_batch(h, y[None], model.transducer)
        b = bat_loss(h, y, model.transducer, band).item()
        bound_ok &= b >= full.nll.item() - 1e-12 and band.num_cells <= t * r
    out.append(Check("pruned loss bound", bool(bound_ok), "bat_loss >= rnnt_loss, cells <= T*R"))
    return out


SUITES = {"equivalence": check_equivalence, "gradients": check_gradients, "oracle": check_oracles}


def run(suite: str = "all", seed: int = 0) -> list[Check]:
    names = list(SUITES) if suite == "all" else [suite]
    out = []
    for n in names:
        out += SUITES[n](seed)
    return out
