"""Desk-scale training loop for the full and band-pruned transducer losses."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .bat import BandError, bat_loss_batch, build_band, cif_weights, fire, quantity_loss
from .data import Utterance, split
from .decode import greedy_decode_offline
from .frontend import N_MELS
from .model import ModelConfig, TransducerModel
from .transducer import rnnt_loss_batch

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class TrainConfig:
    loss_kind: str = "full"          # "full" or "bat"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0           # global-norm clip; 0 disables
    band_width: int = 5
    cif_pretrain_epochs: int = 1
    quantity_weight: float = 1.0
    heldout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("full", "bat"):
            raise ValueError(f"loss_kind must be 'full' or 'bat', got {self.loss_kind!r}")


class Adam:
    """Per-parameter adaptive steps from bias-corrected first/second moment averages."""

    def __init__(self, params: list[nx.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class EpochMetrics:
    epoch: int
    nll: float                  # mean per-utterance training nll
    token_accuracy: float       # 1 - edit distance / reference length on the held-out split
    joint_evals: int            # joint-network cells evaluated this epoch
    full_joint_evals: int       # cells a full-lattice loss would have evaluated
    seconds: float


@dataclass
class TrainResult:
    model: TransducerModel
    history: list[EpochMetrics] = field(default_factory=list)
    step_stats: list[tuple[int, int, float]] = field(default_factory=list)  # (joint evals, full evals, mean U)
    initial_nll: float = float("nan")


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_accuracy(model: TransducerModel, data: list[Utterance]) -> float:
    errors = total = 0
    for utt in data:
        h, _ = model.encode_features(utt.features.frames)
        hyp = greedy_decode_offline(h.data, model)
        errors += edit_distance(utt.labels.tolist(), hyp)
        total += len(utt.labels)
    return 1.0 - errors / max(total, 1)


def collate(batch: list[Utterance], dtype):
    raw = np.array([u.features.num_frames for u in batch])
    ul = np.array([len(u.labels) for u in batch])
    feats = np.zeros((len(batch), raw.max(), N_MELS), dtype=dtype)
    labels = np.zeros((len(batch), max(ul.max(), 1)), dtype=np.int64)
    for i, u in enumerate(batch):
        feats[i, :raw[i]] = u.features.frames
        labels[i, :ul[i]] = u.labels
    return feats, raw, labels, ul


def _bands(weights: np.ndarray, h_lens, label_lens, r: int, threshold: float):
    bands = []
    for w, t, u in zip(weights, h_lens, label_lens):
        w = w[:t].astype(np.float64)
        b = fire(w * (u / w.sum()), threshold)[:u] if u else np.zeros(0, dtype=np.int64)
        if b.size < u:
            b = np.concatenate([b, np.full(u - b.size, t, dtype=np.int64)])
        try:
            bands.append(build_band(b, int(t), int(u), r))
        except BandError:
            bands.append(build_band(b, int(t), int(u), int(u) + 1))
    return bands


def batch_loss(model: TransducerModel, batch: list[Utterance], cfg: TrainConfig,
               rng: np.random.Generator | None):
    """Scalar training loss for one batch plus (nll sum, joint evals, full-lattice evals)."""
    feats, raw, labels, ul = collate(batch, model.dtype)
    h, lens = model.encode_features(feats, raw, rng)
    full_cells = int(np.sum(lens * (ul + 1)))
    if cfg.loss_kind == "full":
        out = rnnt_loss_batch(h, labels, model.transducer, lens, ul)
        loss = out.nll.mean()
    else:
        weights = cif_weights(h.detach(), model.cif)
        bands = _bands(weights.data, lens, ul, cfg.band_width, model.cif.threshold)
        out = bat_loss_batch(h, labels, model.transducer, bands, lens, ul)
        loss = out.nll.mean() + cfg.quantity_weight * quantity_loss(weights, lens, ul)
    return loss, float(out.nll.data.sum()), out.evaluated_cells, full_cells


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _clip(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def pretrain_cif(model: TransducerModel, train_set: list[Utterance], cfg: TrainConfig,
                 rng: np.random.Generator) -> list[float]:
    """Quantity-loss epochs updating the CIF head and the layers beneath it."""
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses = []
    for _ in range(cfg.cif_pretrain_epochs):
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            batch = [train_set[i] for i in idx]
            feats, raw, _, ul = collate(batch, model.dtype)
            h, lens = model.encode_features(feats, raw, rng)
            loss = quantity_loss(cif_weights(h, model.cif), lens, ul)
            if loss.requires_grad:
                opt.step(_clip(nx.backward(loss, params), cfg.grad_clip))
                model.clamp()
            losses.append(loss.item())
    return losses


def train(model_config: ModelConfig, cfg: TrainConfig, dataset: list[Utterance],
          progress=None) -> TrainResult:
    """Train from scratch; all randomness comes from one generator seeded with ``cfg.seed``.

    Generator draws happen in this order: parameter initialization, then per
    epoch the batch permutation followed by dropout masks batch by batch.
    """
    rng = np.random.default_rng(cfg.seed)
    model = TransducerModel(model_config, rng)
    train_set, heldout = split(dataset, cfg.heldout_fraction)
    params = model.parameters()
    result = TrainResult(model)
    drop_rng = rng if model_config.encoder.dropout_rate > 0 else None

    init_nll = 0.0
    for i in range(0, len(train_set), cfg.batch_size):
        _, s, _, _ = batch_loss(model, train_set[i:i + cfg.batch_size], TrainConfig(loss_kind="full"), None)
        init_nll += s
    result.initial_nll = init_nll / max(len(train_set), 1)

    if cfg.loss_kind == "bat" and cfg.cif_pretrain_epochs > 0:
        pretrain_cif(model, train_set, cfg, rng)

    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        nll_sum = 0.0
        evals = full_evals = 0
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            step += 1
            batch = [train_set[i] for i in idx]
            try:
                loss, s, ev, fe = batch_loss(model, batch, cfg, drop_rng)
                if not np.isfinite(loss.item()):
                    raise nx.NonFiniteError("loss is not finite")
                grads = nx.backward(loss, params)
            except nx.NonFiniteError as e:
                raise TrainingDiverged(step, str(e)) from e
            if not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(step, "non-finite gradient")
            opt.step(_clip(grads, cfg.grad_clip))
            model.clamp()
            nll_sum += s
            evals += ev
            full_evals += fe
            result.step_stats.append((ev, fe, float(np.mean([len(u.labels) for u in batch]))))
        acc = token_accuracy(model, heldout) if heldout else float("nan")
        m = EpochMetrics(epoch, nll_sum / len(train_set), acc, evals, full_evals, time.perf_counter() - t0)
        result.history.append(m)
        log.info("epoch %d nll %.4f acc %.4f (%.1fs)", m.epoch, m.nll, m.token_accuracy, m.seconds)
        if progress is not None:
            progress(m)
    return result
