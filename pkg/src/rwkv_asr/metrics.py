"""Latency and left-context bookkeeping for streaming encoders."""
from __future__ import annotations

import enum
from dataclasses import dataclass

ALL_HISTORY = "all history"


class EncoderKind(str, enum.Enum):
    RWKV = "rwkv"
    LSTM = "lstm"
    CAUSAL = "causal"      # causal self-attention (transformer/conformer)
    CHUNK = "chunk"        # chunk self-attention

    @property
    def recurrent(self) -> bool:
        return self in (EncoderKind.RWKV, EncoderKind.LSTM)


def compute_latency(kind, chunk_size_frames: int | None = None, subsample_factor: int = 4,
                    frame_ms: int = 10) -> int:
    """Future context in ms: chunk duration for chunked encoders, 0 otherwise."""
    kind = EncoderKind(kind)
    if kind is not EncoderKind.CHUNK:
        return 0
    if not chunk_size_frames or chunk_size_frames <= 0 or subsample_factor <= 0 or frame_ms <= 0:
        raise ValueError("chunked latency needs positive chunk size, subsampling factor and frame time")
    return chunk_size_frames * subsample_factor * frame_ms


def report_left_context(kind, context_frames: int | None = None):
    """Frames of history a single output step needs; ALL_HISTORY when unbounded."""
    kind = EncoderKind(kind)
    if kind.recurrent:
        return 1
    if context_frames is None:
        return ALL_HISTORY
    return int(context_frames)


def chunk_cache_bytes(num_layers: int, d_model: int, left_context: int, bytes_per_value: int = 4,
                      conv_kernel: int = 15) -> int:
    """Analytic inference cache of a chunk conformer: key/value rows plus conv state per layer."""
    per_layer = 2 * left_context * d_model + (conv_kernel - 1) * d_model
    return num_layers * per_layer * bytes_per_value


@dataclass
class StreamingMetrics:
    latency_ms: int
    left_context_frames: int | str
    state_bytes: int

    def __post_init__(self):
        if self.latency_ms < 0 or self.state_bytes < 0:
            raise ValueError("metrics must be non-negative")
        if isinstance(self.left_context_frames, int) and self.left_context_frames < 0:
            raise ValueError("metrics must be non-negative")
