"""Greedy transducer decoding, offline and frame-synchronous streaming."""
from __future__ import annotations

import struct
from typing import Iterable, Iterator

import numpy as np

from .encoder import StreamState, encode_step
from .frontend import N_MELS, FeatureSequence, SubsampleStream
from .model import TransducerModel
from .numerics import Tensor
from .transducer import BLANK, predictor_step

MAX_SYMBOLS_PER_FRAME = 10


class SessionClosedError(RuntimeError):
    pass


def _joint_scores(model: TransducerModel, enc_proj: np.ndarray, g: np.ndarray) -> np.ndarray:
    jp = model.transducer.joint
    z = np.tanh(enc_proj + jp.w_pred.data @ g + jp.b.data)
    return jp.w_out.data @ z


def _greedy_frame(model: TransducerModel, h_t: np.ndarray, g: np.ndarray, cap: int):
    """Emit up to ``cap`` labels on one frame; returns (tokens, g)."""
    enc_proj = model.transducer.joint.w_enc.data @ h_t
    out = []
    while len(out) < cap:
        k = int(np.argmax(_joint_scores(model, enc_proj, g)))  # first maximum wins ties
        if k == BLANK:
            break
        out.append(k)
        g = predictor_step(model.transducer.predictor, g, k)
    return out, g


def greedy_decode_offline(h, model: TransducerModel, cap: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    """Greedy search over a full (T, d_io) encoder output."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h)
    g = predictor_step(model.transducer.predictor, None, BLANK)
    tokens: list[int] = []
    for h_t in h:
        out, g = _greedy_frame(model, h_t, g, cap)
        tokens += out
    return tokens


def decode_features(feats, model: TransducerModel, mode: str = "parallel",
                    cap: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    """Tokens for one utterance of raw 80-dim frames."""
    frames = feats.frames if isinstance(feats, FeatureSequence) else np.asarray(feats)
    if mode == "parallel":
        h, _ = model.encode_features(frames)
        return greedy_decode_offline(h.data, model, cap)
    if mode == "stream":
        session = DecodeSession(model, cap)
        tokens = session.feed(frames)
        session.close()
        return tokens
    raise ValueError(f"unknown decode mode {mode!r}")


class DecodeSession:
    """Per-stream decoder state of constant size.

    Holds the subsampling buffers, the encoder recurrent state, the current
    prediction vector and counters.  Emitted tokens are handed to the caller
    and not retained, so the serialized size does not grow with the stream.
    """

    def __init__(self, model: TransducerModel, cap: int = MAX_SYMBOLS_PER_FRAME):
        self.model = model
        self.cap = cap
        self.subsample = SubsampleStream(model.subsample)
        self.encoder_state = StreamState.fresh(model.config.encoder, model.dtype)
        self.g = predictor_step(model.transducer.predictor, None, BLANK)
        self.frames_consumed = 0
        self.encoder_frames = 0
        self.num_emitted = 0
        self.closed = False

    def feed(self, frames) -> list[int]:
        """Consume raw frames (k, 80); return the tokens finalized by them."""
        if self.closed:
            raise SessionClosedError("feed() called on a closed session")
        frames = np.asarray(frames, dtype=self.model.dtype).reshape(-1, N_MELS)
        out: list[int] = []
        for f in frames:
            self.frames_consumed += 1
            x = self.subsample.push(f)
            if x is not None:
                out += self.step_encoder_input(x)
        return out

    def step_encoder_input(self, x_t: np.ndarray) -> list[int]:
        """Advance by one subsampled (d_io) frame."""
        h_t = encode_step(x_t, self.model.layers, self.encoder_state)
        self.encoder_frames += 1
        tokens, self.g = _greedy_frame(self.model, h_t, self.g, self.cap)
        self.num_emitted += len(tokens)
        return tokens

    def close(self) -> None:
        self.closed = True

    # -- serialization --------------------------------------------------------
    def _arrays(self) -> list[np.ndarray]:
        return self.subsample.arrays() + self.encoder_state.arrays() + [self.g]

    def to_bytes(self) -> bytes:
        head = struct.pack("<QQQI?", self.frames_consumed, self.encoder_frames,
                           self.num_emitted, self.cap, self.closed)
        body = b"".join(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()
                        for a in self._arrays())
        return head + body

    @classmethod
    def from_bytes(cls, model: TransducerModel, blob: bytes) -> "DecodeSession":
        head = struct.calcsize("<QQQI?")
        fc, ef, ne, cap, closed = struct.unpack_from("<QQQI?", blob, 0)
        s = cls(model, cap)
        s.frames_consumed, s.encoder_frames, s.num_emitted, s.closed = fc, ef, ne, closed
        off = head
        arrays = s._arrays()
        for a in arrays:
            dt = a.dtype.newbyteorder("<")
            n = a.size * dt.itemsize
            a[...] = np.frombuffer(blob, dtype=dt, count=a.size, offset=off).reshape(a.shape)
            off += n
        if off != len(blob):
            raise ValueError("session blob size does not match the model configuration")
        s.subsample.n_raw, s.subsample.n_mid = (int(v) for v in arrays[2])
        return s

    @property
    def state_bytes(self) -> int:
        return len(self.to_bytes())


def greedy_decode_streaming(chunks: Iterable, session: DecodeSession) -> Iterator[int]:
    """Feed successive chunks of raw frames and yield tokens as soon as they are final."""
    for chunk in chunks:
        yield from session.feed(chunk)
