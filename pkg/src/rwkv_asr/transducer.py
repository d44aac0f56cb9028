"""Prediction network, joint network and the transducer negative log-likelihood."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLANK = 0


class LabelError(ValueError):
    pass


class UnreachableError(RuntimeError):
    """The terminal lattice cell has no surviving path."""


@dataclass
class PredictorParams:
    """Embedding plus one gated recurrent layer.

    s_u = s_{u-1} + z * (c - s_{u-1}) with z = sigmoid(W_z e + U_z s + b_z)
    and c = tanh(W_c e + U_c s + b_c).  Row 0 of ``embed`` is the start/blank
    embedding.
    """

    embed: Tensor
    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0] - 1


@dataclass
class JointParams:
    w_enc: Tensor
    w_pred: Tensor
    b: Tensor
    w_out: Tensor


@dataclass
class TransducerParams:
    predictor: PredictorParams
    joint: JointParams

    def named(self) -> dict[str, Tensor]:
        out = {f"pred.{k}": v for k, v in vars(self.predictor).items()}
        out.update({f"joint.{k}": v for k, v in vars(self.joint).items()})
        return out


def init_transducer(rng: np.random.Generator, vocab: int, d_io: int, d_pred: int = 64,
                    d_joint: int = 64, dtype="f64") -> TransducerParams:
    def uni(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return nx.tensor(rng.uniform(-b, b, size=shape), dtype, requires_grad=True)

    def zeros(n):
        return nx.tensor(np.zeros(n), dtype, requires_grad=True)

    pred = PredictorParams(
        embed=nx.tensor(rng.normal(0.0, 1.0, size=(vocab + 1, d_pred)), dtype, requires_grad=True),
        w_z=uni((d_pred, d_pred), d_pred), u_z=uni((d_pred, d_pred), d_pred), b_z=zeros(d_pred),
        w_c=uni((d_pred, d_pred), d_pred), u_c=uni((d_pred, d_pred), d_pred), b_c=zeros(d_pred),
    )
    joint = JointParams(
        w_enc=uni((d_joint, d_io), d_io), w_pred=uni((d_joint, d_pred), d_pred),
        b=zeros(d_joint), w_out=uni((vocab + 1, d_joint), d_joint),
    )
    return TransducerParams(pred, joint)


def _check_labels(y, vocab: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 1 or y.max() > vocab):
        raise LabelError(f"labels must lie in 1..{vocab}, got {y.tolist()}")
    return y


# -- prediction network ------------------------------------------------------------
def _sig(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def predictor_step(params: PredictorParams, state: np.ndarray | None, label: int) -> np.ndarray:
    """Advance the prediction network by one symbol (0 = start); returns the new g."""
    p = params
    e = p.embed.data[label]
    s = np.zeros(p.embed.shape[1], dtype=p.embed.dtype) if state is None else state
    z = _sig(p.w_z.data @ e + p.u_z.data @ s + p.b_z.data)
    c = np.tanh(p.w_c.data @ e + p.u_c.data @ s + p.b_c.data)
    return s + z * (c - s)


def predict_states_batch(labels: np.ndarray, params: PredictorParams) -> Tensor:
    """Prediction vectors for right-padded label rows (N, U_max) -> (N, U_max + 1, d_pred)."""
    p = params
    labels = np.asarray(labels, dtype=np.int64)
    n, u_max = labels.shape
    ext = np.concatenate([np.zeros((n, 1), dtype=np.int64), labels], axis=1)
    e = p.embed[ext]
    xz = nx.linear(e, p.w_z) + p.b_z
    xc = nx.linear(e, p.w_c) + p.b_c
    s = Tensor(np.zeros((n, p.embed.shape[1]), dtype=p.embed.dtype))
    states = []
    for j in range(u_max + 1):
        z = nx.sigmoid(xz[:, j] + nx.linear(s, p.u_z))
        c = nx.tanh(xc[:, j] + nx.linear(s, p.u_c))
        s = s + z * (c - s)
        states.append(s)
    return nx.stack(states, axis=1)


def predict_states(y, params: PredictorParams) -> Tensor:
    """g_0..g_U for one label sequence; g_u has consumed y_1..y_u."""
    y = _check_labels(y, params.vocab_size)
    return predict_states_batch(y[None, :], params)[0]


# -- joint network ------------------------------------------------------------------
def joint_logits(enc_proj: Tensor, pred_proj: Tensor, params: JointParams) -> Tensor:
    return nx.linear(nx.tanh(enc_proj + pred_proj), params.w_out)


def joint_log_probs(h_t, g_u, params: JointParams) -> Tensor:
    """log softmax(W_out tanh(W_enc h + W_pred g + b)) over blank + labels."""
    h_t = h_t if isinstance(h_t, Tensor) else Tensor(np.asarray(h_t, dtype=params.w_enc.dtype))
    g_u = g_u if isinstance(g_u, Tensor) else Tensor(np.asarray(g_u, dtype=params.w_enc.dtype))
    enc = nx.linear(h_t, params.w_enc)
    pred = nx.linear(g_u, params.w_pred) + params.b
    return nx.log_softmax(joint_logits(enc, pred, params), axis=-1)


# -- lattice recursion ----------------------------------------------------------------
@dataclass
class LossOutput:
    nll: Tensor                 # (N,) per-utterance negative log-likelihood
    evaluated_cells: int        # joint evaluations over valid (t, u) cells
    log_alpha: np.ndarray       # (N, T_max + 1, U_max + 1); row 0 and unused cells hold the sentinel

    @property
    def total(self) -> Tensor:
        return self.nll.sum()


def lattice_nll(blank_lp: Tensor, emit_lp: Tensor, t_lens, u_lens,
                cell_mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Forward recursion in log space over anti-diagonals.

    ``blank_lp[n, i, u]`` = log Pr(blank | frame i+1, g_u) and ``emit_lp[n, i, u]`` =
    log Pr(y_{u+1} | frame i+1, g_u), both (N, T_max, U_max + 1).  Cells outside
    ``cell_mask`` are pinned to the sentinel.  Returns per-utterance nll and the
    forward variables.
    """
    n, t_max, u1 = blank_lp.shape
    t_lens = np.asarray(t_lens, dtype=np.int64)
    u_lens = np.asarray(u_lens, dtype=np.int64)
    dtype = blank_lp.dtype
    sent = nx.sentinel(dtype)
    uu = np.arange(u1)
    rows = np.arange(n)[:, None]
    alpha_np = np.full((n, t_max + 1, u1), sent, dtype=dtype)

    start = np.where(uu == 0, 0.0, sent).astype(dtype)
    prev = Tensor(np.broadcast_to(start, (n, u1)).copy())
    if cell_mask is not None:
        prev = nx.where(cell_mask[:, 0, :], prev, sent)
    diags = [prev]
    alpha_np[:, 1, 0] = prev.data[:, 0]
    for d in range(1, t_max + u1 - 1):
        i = d - uu                                      # frame index of cell (i, u)
        in_lattice = (i >= 0) & (i < t_max)
        vb = in_lattice & (i >= 1)
        ve = in_lattice & (uu >= 1)
        ib = np.clip(i - 1, 0, t_max - 1)
        ie = np.clip(i, 0, t_max - 1)
        ue = np.clip(uu - 1, 0, u1 - 1)
        term_b = prev + blank_lp[rows, ib[None, :], uu[None, :]]
        term_e = prev[:, ue] + emit_lp[rows, ie[None, :], ue[None, :]]
        cur = nx.logaddexp(nx.where(np.broadcast_to(vb, (n, u1)), term_b, sent),
                           nx.where(np.broadcast_to(ve, (n, u1)), term_e, sent))
        if cell_mask is not None:
            keep = np.zeros((n, u1), dtype=bool)
            keep[:, in_lattice] = cell_mask[:, ie[in_lattice], uu[in_lattice]]
            cur = nx.where(keep, cur, sent)
        diags.append(cur)
        alpha_np[:, ie[in_lattice] + 1, uu[in_lattice]] = cur.data[:, in_lattice]
        prev = cur
    all_d = nx.stack(diags, axis=0)                    # (D, N, U1)
    idx = np.arange(n)
    final_alpha = all_d[t_lens - 1 + u_lens, idx, u_lens]
    final_blank = blank_lp[idx, t_lens - 1, u_lens]
    return -(final_alpha + final_blank), alpha_np


def _prepare(h, labels, label_lens, h_lens, params: TransducerParams):
    dtype = params.joint.w_enc.dtype
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=dtype))
    if h.ndim == 2:
        h = h.reshape(1, *h.shape)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[None, :]
    n, t_max = h.shape[0], h.shape[1]
    label_lens = np.full(n, labels.shape[1], dtype=np.int64) if label_lens is None else np.asarray(label_lens)
    h_lens = np.full(n, t_max, dtype=np.int64) if h_lens is None else np.asarray(h_lens)
    if np.any(h_lens < 1):
        raise ValueError("every utterance needs at least one encoder frame")
    for row, ul in zip(labels, label_lens):
        _check_labels(row[:ul], params.predictor.vocab_size)
    g = predict_states_batch(labels, params.predictor)
    # next-label index for each (n, u); padded slots point at blank and are never used
    nxt = np.zeros((n, labels.shape[1] + 1), dtype=np.int64)
    nxt[:, :-1] = labels
    nxt[np.arange(labels.shape[1] + 1)[None, :] >= label_lens[:, None]] = BLANK
    return h, labels, label_lens, h_lens, g, nxt


def rnnt_loss_batch(h, labels, params: TransducerParams, h_lens=None, label_lens=None) -> LossOutput:
    """Full-lattice transducer loss for a right-padded batch.

    ``h``: (N, T_max, d_io) encoder frames; ``labels``: (N, U_max), padded with
    anything (ignored past ``label_lens``).
    """
    h, labels, label_lens, h_lens, g, nxt = _prepare(h, labels, label_lens, h_lens, params)
    jp = params.joint
    enc = nx.linear(h, jp.w_enc)[:, :, None, :]                    # (N, T, 1, dj)
    pred = (nx.linear(g, jp.w_pred) + jp.b)[:, None, :, :]        # (N, 1, U1, dj)
    lp = nx.log_softmax(joint_logits(enc, pred, jp), axis=-1)   # (N, T, U1, V1)
    n, t_max, u1, _ = lp.shape
    ni, ti, ui = np.ix_(np.arange(n), np.arange(t_max), np.arange(u1))
    blank_lp = lp[..., BLANK]
    emit_lp = lp[ni, ti, ui, nxt[:, None, :]]
    nll, alpha = lattice_nll(blank_lp, emit_lp, h_lens, label_lens)
    cells = int(np.sum(h_lens * (label_lens + 1)))
    return LossOutput(nll, cells, alpha)


def rnnt_loss(h, y, params: TransducerParams) -> Tensor:
    """-log Pr(y | h) summed over all blank-augmented alignments."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    return rnnt_loss_batch(h, y[None, :], params).nll[0]


@dataclass
class AlignmentLattice:
    log_alpha: np.ndarray       # (T+1, U+1), 1-based in t: log_alpha[1, 0] == 0
    evaluated_cells: int


def alignment_lattice(h, y, params: TransducerParams) -> AlignmentLattice:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    out = rnnt_loss_batch(h, y[None, :], params)
    return AlignmentLattice(out.log_alpha[0], out.evaluated_cells)


# -- enumeration oracle ---------------------------------------------------------------
BRUTEFORCE_BUDGET = 14


def enumerate_alignments(t: int, u: int):
    """Yield every alignment as a tuple of 'b'/'y' moves ending in a final blank."""
    steps = t + u - 1
    for pos in itertools.combinations(range(steps), u):
        moves = ["b"] * steps
        for k in pos:
            moves[k] = "y"
        yield tuple(moves) + ("b",)


def rnnt_loss_bruteforce(h, y, params: TransducerParams) -> float:
    """Negative log of the summed probability of every alignment, by enumeration."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h)
    y = _check_labels(y, params.predictor.vocab_size)
    t, u = h.shape[0], y.size
    if t + u > BRUTEFORCE_BUDGET:
        raise ValueError(f"T+U={t + u} exceeds the enumeration budget of {BRUTEFORCE_BUDGET}")
    g = predict_states(y, params.predictor).data
    cache: dict[tuple[int, int], np.ndarray] = {}

    def cell(ti, ui):
        if (ti, ui) not in cache:
            cache[(ti, ui)] = joint_log_probs(h[ti], g[ui], params.joint).data
        return cache[(ti, ui)]

    scores = []
    for moves in enumerate_alignments(t, u):
        ti = ui = 0
        total = 0.0
        for m in moves:
            lp = cell(ti, ui)
            if m == "b":
                total += lp[BLANK]
                ti += 1
            else:
                total += lp[y[ui]]
                ui += 1
        scores.append(total)
    scores = np.asarray(scores)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))
