"""Boundary-aware transducer: CIF alignment and the band-pruned loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .transducer import (BLANK, LossOutput, TransducerParams, UnreachableError, _prepare,
                         joint_logits, lattice_nll)

CIF_THRESHOLD = 1.0
_FIRE_TOL = 1e-9


class BandError(ValueError):
    pass


@dataclass
class CifParams:
    weight: Tensor  # (1, d_io)
    bias: Tensor    # (1,)
    threshold: float = CIF_THRESHOLD

    def named(self) -> dict[str, Tensor]:
        return {"cif.weight": self.weight, "cif.bias": self.bias}


def init_cif(rng: np.random.Generator, d_io: int, dtype="f64") -> CifParams:
    b = 1.0 / np.sqrt(d_io)
    return CifParams(nx.tensor(rng.uniform(-b, b, size=(1, d_io)), dtype, requires_grad=True),
                     nx.tensor(np.zeros(1), dtype, requires_grad=True))


@dataclass
class CifAlignment:
    boundaries: np.ndarray   # 1-based frame index per label, non-decreasing
    quantity_loss: float
    weights: np.ndarray      # unscaled per-frame weights


def cif_weights(h, params: CifParams) -> Tensor:
    """Per-frame firing weights in (0, 1): (..., T, d_io) -> (..., T)."""
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=params.weight.dtype))
    z = nx.linear(h, params.weight, params.bias)
    return nx.sigmoid(z.reshape(*z.shape[:-1]))


def fire(weights: np.ndarray, threshold: float = CIF_THRESHOLD) -> np.ndarray:
    """Accumulate-and-fire; one boundary (1-based frame) per threshold crossing.

    Several boundaries may land on one frame when its weight exceeds the
    threshold.  The remainder after the last crossing is dropped.
    """
    out = []
    acc = 0.0
    for t, a in enumerate(weights, start=1):
        acc += float(a)
        while acc >= threshold - _FIRE_TOL:
            out.append(t)
            acc -= threshold
    return np.asarray(out, dtype=np.int64)


def cif_align(h, u: int, params: CifParams) -> CifAlignment:
    """Scaled firing: weights are rescaled to sum to ``u`` so exactly ``u`` boundaries fire."""
    alpha = np.asarray(cif_weights(h, params).data, dtype=np.float64)
    t = alpha.shape[0]
    if u > 0 and t == 0:
        raise BandError("cannot place labels on an empty frame sequence")
    total = float(alpha.sum())
    qloss = abs(total - u)
    if u == 0:
        return CifAlignment(np.zeros(0, dtype=np.int64), qloss, alpha)
    b = fire(alpha * (u / total), params.threshold)
    if b.size < u:
        # rounding can leave the final crossing a hair short
        b = np.concatenate([b, np.full(u - b.size, t, dtype=np.int64)])
    return CifAlignment(b[:u], qloss, alpha)


def quantity_loss(weights: Tensor, t_lens, u_lens) -> Tensor:
    """Mean over the batch of |sum_t alpha_t - U| for right-padded (N, T) weights."""
    t_lens = np.asarray(t_lens)
    mask = np.arange(weights.shape[-1])[None, :] < t_lens[:, None]
    sums = (weights * mask.astype(weights.dtype)).sum(axis=-1)
    return nx.abs_(sums - np.asarray(u_lens, dtype=weights.dtype)).mean()


def cif_pretrain_step(batch, params: CifParams, lr: float = 0.01) -> tuple[CifParams, float]:
    """One gradient step on the quantity loss.

    ``batch`` is a list of ``(h, U)`` with ``h`` a (T, d_io) array of encoder
    outputs.  Parameters are updated in place and returned with the loss
    value measured before the step.
    """
    t_lens = np.array([len(h) for h, _ in batch])
    u_lens = np.array([u for _, u in batch])
    d = params.weight.shape[1]
    hb = np.zeros((len(batch), t_lens.max(), d), dtype=params.weight.dtype)
    for i, (h, _) in enumerate(batch):
        hb[i, :len(h)] = np.asarray(h.data if isinstance(h, Tensor) else h)
    loss = quantity_loss(cif_weights(hb, params), t_lens, u_lens)
    if loss.requires_grad:
        gw, gb = nx.backward(loss, [params.weight, params.bias])
        params.weight.data -= lr * gw
        params.bias.data -= lr * gb
    return params, loss.item()


# -- pruning band ------------------------------------------------------------------
@dataclass
class PruneBand:
    lo: np.ndarray       # (T,) first allowed u per frame
    hi: np.ndarray       # (T,) last allowed u per frame
    width: int
    centers: np.ndarray  # (T,) u*(t) before widening

    def mask(self, u: int) -> np.ndarray:
        uu = np.arange(u + 1)
        return (uu[None, :] >= self.lo[:, None]) & (uu[None, :] <= self.hi[:, None])

    @property
    def num_cells(self) -> int:
        return int(np.sum(self.hi - self.lo + 1))


def label_counts(boundaries: np.ndarray, t: int) -> np.ndarray:
    """u*(t) = number of boundaries at or before frame t, for t = 1..T."""
    return np.searchsorted(np.sort(boundaries), np.arange(1, t + 1), side="right")


def build_band(alignment, t: int, u: int, r: int) -> PruneBand:
    """Width-``r`` band of label positions per frame around the CIF label count.

    The band is centred on u*(t), then repaired so that lo is non-decreasing,
    consecutive intervals overlap, frame 1 starts at u = 0 and frame T ends at
    u = U; together these guarantee a monotone in-band path exists.
    """
    if r < 2:
        raise BandError(f"band width must be at least 2, got {r}")
    if t < 1:
        raise BandError("need at least one frame")
    boundaries = alignment.boundaries if isinstance(alignment, CifAlignment) else np.asarray(alignment)
    centers = label_counts(boundaries, t).astype(np.int64)
    top = max(u - r + 1, 0)
    lo = np.clip(centers - (r - 1) // 2, 0, top)
    lo = np.maximum.accumulate(lo)
    lo[0] = 0
    for i in range(1, t):
        lo[i] = min(lo[i], lo[i - 1] + (r - 1))
    lo[-1] = top
    for i in range(t - 2, -1, -1):
        lo[i] = max(lo[i], lo[i + 1] - (r - 1))
    if lo[0] != 0:
        raise BandError(f"band of width {r} cannot connect (1,0) to ({t},{u})")
    hi = np.minimum(lo + r - 1, u)
    return PruneBand(lo, hi, r, centers)


# -- pruned loss -------------------------------------------------------------------
def bat_loss_batch(h, labels, params: TransducerParams, bands: list[PruneBand],
                   h_lens=None, label_lens=None) -> LossOutput:
    """Transducer loss evaluating the joint network only on in-band cells."""
    h, labels, label_lens, h_lens, g, nxt = _prepare(h, labels, label_lens, h_lens, params)
    n, t_max = h.shape[0], h.shape[1]
    u1 = labels.shape[1] + 1
    r = max(b.width for b in bands)
    lo = np.zeros((n, t_max), dtype=np.int64)
    hi = np.full((n, t_max), -1, dtype=np.int64)
    for i, b in enumerate(bands):
        if b.lo.shape[0] != h_lens[i]:
            raise BandError(f"band covers {b.lo.shape[0]} frames, utterance has {h_lens[i]}")
        if b.hi[-1] != label_lens[i] or b.lo[0] != 0:
            raise BandError("band must contain the first and terminal lattice cells")
        lo[i, :h_lens[i]] = b.lo
        hi[i, :h_lens[i]] = b.hi
    u_idx = lo[:, :, None] + np.arange(r)[None, None, :]           # (N, T, R)
    valid = u_idx <= hi[:, :, None]
    vi = np.nonzero(valid)
    nn, tt, uu = vi[0], vi[1], u_idx[vi]

    jp = params.joint
    enc = nx.linear(h, jp.w_enc)[nn, tt]                          # (K, dj)
    pred = (nx.linear(g, jp.w_pred) + jp.b)[nn, uu]               # (K, dj)
    lp = nx.log_softmax(joint_logits(enc, pred, jp), axis=-1)     # (K, V1)
    k = np.arange(nn.size)
    shape = (n, t_max, u1)
    blank_lp = nx.scatter(lp[:, BLANK], (nn, tt, uu), shape)
    emit_lp = nx.scatter(lp[k, nxt[nn, uu]], (nn, tt, uu), shape)
    cell_mask = np.zeros(shape, dtype=bool)
    cell_mask[nn, tt, uu] = True
    nll, alpha = lattice_nll(blank_lp, emit_lp, h_lens, label_lens, cell_mask)
    final = alpha[np.arange(n), h_lens, label_lens]
    if np.any(final <= nx.sentinel(alpha.dtype) / 2):
        bad = np.nonzero(final <= nx.sentinel(alpha.dtype) / 2)[0].tolist()
        raise UnreachableError(f"terminal cell unreachable inside the band for utterances {bad}")
    return LossOutput(nll, int(nn.size), alpha)


def bat_loss(h, y, params: TransducerParams, band: PruneBand) -> Tensor:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    return bat_loss_batch(h, y[None, :], params, [band]).nll[0]
