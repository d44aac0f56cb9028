"""Synthetic label-to-feature task for desk-scale training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frontend import N_MELS, FeatureSequence

MAX_SYNTH_VOCAB = 64


@dataclass
class Utterance:
    features: FeatureSequence
    labels: np.ndarray


def prototypes(vocab: int, seed: int = 0) -> np.ndarray:
    """Fixed feature vector per label, rows 1..V (row 0 unused)."""
    rng = np.random.default_rng([seed, 0x5EED])
    protos = np.zeros((vocab + 1, N_MELS))
    protos[1:] = rng.normal(0.0, 1.0, size=(vocab, N_MELS))
    return protos


def synth_dataset(seed: int, num_utts: int, vocab: int = 16, len_range=(3, 8),
                  frames_per_label=(4, 8), noise: float = 0.1, prototype_seed: int = 0,
                  dtype=np.float32) -> list[Utterance]:
    """Utterances whose frames are label prototypes repeated 4-8 times plus Gaussian noise.

    Adjacent labels always differ, otherwise a repeated label would be
    indistinguishable from one long segment.
    """
    if vocab > MAX_SYNTH_VOCAB:
        raise ValueError(f"vocab must be at most {MAX_SYNTH_VOCAB}")
    if vocab < 2 and len_range[1] > 1:
        raise ValueError("need at least two labels to avoid adjacent repeats")
    protos = prototypes(vocab, prototype_seed)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num_utts):
        n = int(rng.integers(len_range[0], len_range[1] + 1))
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            if i == 0:
                labels[i] = rng.integers(1, vocab + 1)
            else:
                k = int(rng.integers(1, vocab))  # skip the previous label
                labels[i] = k if k < labels[i - 1] else k + 1
        reps = rng.integers(frames_per_label[0], frames_per_label[1] + 1, size=n)
        frames = np.repeat(protos[labels], reps, axis=0)
        frames = frames + rng.normal(0.0, noise, size=frames.shape) if noise > 0 else frames
        out.append(Utterance(FeatureSequence(frames.astype(dtype)), labels))
    return out


def split(data: list[Utterance], heldout_fraction: float = 0.1):
    k = int(round(len(data) * (1.0 - heldout_fraction)))
    return data[:k], data[k:]
