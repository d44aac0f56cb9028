"""Audio and feature front end: WAV/FEAT I/O, log-mel filterbanks, conv subsampling."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms at 16 kHz
HOP_LENGTH = 160  # 10 ms at 16 kHz
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10
MIN_SUBSAMPLE_FRAMES = 7


class FrontendError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise FrontendError("audio must be a non-empty mono signal")
        if self.sample_rate <= 0:
            raise FrontendError("sample_rate must be positive")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_shift_ms: int = 10
    frame_length_ms: int = 25

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise FrontendError(f"features must be T x {N_MELS}, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise FrontendError("features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# -- WAV ----------------------------------------------------------------------
def read_wav(path) -> AudioBuffer:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE" or w.getsampwidth() != 2:
                raise FrontendError("only 16-bit PCM WAV is supported")
            if w.getnchannels() != 1:
                raise FrontendError(f"expected mono audio, got {w.getnchannels()} channels")
            n = w.getnframes()
            raw = w.readframes(n)
            rate = w.getframerate()
    except (wave.Error, EOFError, struct.error) as e:
        raise FrontendError(f"unreadable WAV file {path}: {e}") from e
    if len(raw) != 2 * n:
        raise FrontendError(f"truncated WAV file {path}: expected {n} samples, got {len(raw) // 2}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


# -- FEAT -----------------------------------------------------------------------
def write_feature_file(path, feats: FeatureSequence) -> None:
    frames = np.ascontiguousarray(feats.frames, dtype="<f4")
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(f"FEAT {t} {d}\n".encode("ascii"))
        f.write(frames.tobytes())


def read_feature_file(path) -> FeatureSequence:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FrontendError("missing FEAT header line")
    parts = blob[:nl].split()
    if len(parts) != 3 or parts[0] != b"FEAT":
        raise FrontendError("bad magic: expected 'FEAT <T> <D>'")
    try:
        t, d = int(parts[1]), int(parts[2])
    except ValueError as e:
        raise FrontendError("bad FEAT header dimensions") from e
    payload = blob[nl + 1:]
    if len(payload) != 4 * t * d:
        raise FrontendError(f"FEAT header declares {t}x{d} values but payload holds {len(payload) / 4:g}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)
    return FeatureSequence(frames)


# -- log-mel ----------------------------------------------------------------------
def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


_MEL = mel_filterbank()
_WINDOW = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WIN_LENGTH) / WIN_LENGTH)


def num_fbank_frames(num_samples: int) -> int:
    return 1 + (num_samples - WIN_LENGTH) // HOP_LENGTH


def log_mel_filterbank(audio: AudioBuffer) -> FeatureSequence:
    if audio.sample_rate != SAMPLE_RATE:
        raise FrontendError(f"expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate}")
    n = audio.samples.size
    if n < WIN_LENGTH:
        raise FrontendError(f"audio has {n} samples, shorter than one {WIN_LENGTH}-sample window")
    t = num_fbank_frames(n)
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(t)[:, None]
    frames = audio.samples[idx] * _WINDOW
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=-1)) ** 2
    energy = power @ _MEL.T
    return FeatureSequence(np.log(np.maximum(energy, LOG_FLOOR)))


# -- convolutional subsampling ----------------------------------------------------------
def subsampled_length(t_raw: int) -> int:
    return ((t_raw - 1) // 2 - 1) // 2


def _conv_out(n: int) -> int:
    return (n - 1) // 2


def _patch_index(t_in: int, f_in: int):
    """Index arrays gathering 3x3 stride-2 patches: shapes (T_out, F_out, 9)."""
    t_out, f_out = _conv_out(t_in), _conv_out(f_in)
    dt, df = np.divmod(np.arange(9), 3)
    ti = 2 * np.arange(t_out)[:, None, None] + dt[None, None, :]
    fi = 2 * np.arange(f_out)[None, :, None] + df[None, None, :]
    return np.broadcast_to(ti, (t_out, f_out, 9)), np.broadcast_to(fi, (t_out, f_out, 9))


@dataclass
class SubsampleParams:
    """Two 3x3/stride-2 convolutions followed by a projection to d_io.

    conv1_w: (9, C); conv2_w: (9 * C, C) with patch-major, channel-minor rows;
    proj_w: (d_io, C * F2) with frequency-major, channel-minor columns.
    """

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    proj_w: Tensor
    proj_b: Tensor

    def named(self, prefix: str = "subsample") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def init_subsample(rng: np.random.Generator, d_io: int, channels: int, dtype="f64") -> SubsampleParams:
    f2 = _conv_out(_conv_out(N_MELS))

    def uni(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return nx.tensor(rng.uniform(-b, b, size=shape), dtype, requires_grad=True)

    return SubsampleParams(
        conv1_w=uni((9, channels), 9),
        conv1_b=nx.tensor(np.zeros(channels), dtype, requires_grad=True),
        conv2_w=uni((9 * channels, channels), 9 * channels),
        conv2_b=nx.tensor(np.zeros(channels), dtype, requires_grad=True),
        proj_w=uni((d_io, channels * f2), channels * f2),
        proj_b=nx.tensor(np.zeros(d_io), dtype, requires_grad=True),
    )


def conv_subsample(features, params: SubsampleParams) -> Tensor:
    """Map raw frames (..., T_raw, 80) to (..., T, d_io) with T ~ T_raw / 4.

    Accepts a FeatureSequence, an ndarray or a Tensor; a leading batch axis
    is allowed.  Frames beyond a sequence's true length never influence
    earlier outputs, so right-padded batches are safe.
    """
    if isinstance(features, FeatureSequence):
        features = features.frames
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=params.conv1_w.dtype))
    t_raw = x.shape[-2]
    if x.shape[-1] != N_MELS:
        raise FrontendError(f"expected {N_MELS}-dim features, got {x.shape[-1]}")
    if t_raw < MIN_SUBSAMPLE_FRAMES:
        raise FrontendError(f"need at least {MIN_SUBSAMPLE_FRAMES} frames to subsample, got {t_raw}")
    ti, fi = _patch_index(t_raw, N_MELS)
    h = x[..., ti, fi]                                   # (..., T1, F1, 9)
    h = nx.squared_relu(nx.matmul(h, params.conv1_w) + params.conv1_b)  # (..., T1, F1, C)
    t1, f1, c = h.shape[-3:]
    ti, fi = _patch_index(t1, f1)
    h = h[..., ti, fi, :]                                # (..., T2, F2, 9, C)
    lead = h.shape[:-2]
    h = h.reshape(*lead, 9 * c)
    h = nx.squared_relu(nx.matmul(h, params.conv2_w) + params.conv2_b)  # (..., T2, F2, C)
    t2, f2 = h.shape[-3], h.shape[-2]
    h = h.reshape(*h.shape[:-2], f2 * c)
    return nx.linear(h, params.proj_w, params.proj_b)


class SubsampleStream:
    """Frame-at-a-time version of :func:`conv_subsample` with bounded buffers.

    Raw frame ``j`` feeds first-layer output ``i`` when ``2i <= j <= 2i+2``;
    first-layer output ``i`` feeds second-layer output ``m`` when
    ``2m <= i <= 2m+2``.  Only the last three frames at each level are kept.
    """

    def __init__(self, params: SubsampleParams):
        self.params = params
        dtype = params.conv1_w.dtype
        c = params.conv1_b.shape[0]
        self.raw = np.zeros((3, N_MELS), dtype=dtype)
        self.mid = np.zeros((3, _conv_out(N_MELS), c), dtype=dtype)
        self.n_raw = 0
        self.n_mid = 0

    def _conv1(self, frames: np.ndarray) -> np.ndarray:
        p = self.params
        _, fi = _patch_index(3, N_MELS)
        dt = np.arange(9) // 3
        patches = frames[dt[None, :], fi[0]]            # (F1, 9)
        z = patches @ p.conv1_w.data + p.conv1_b.data
        return np.maximum(z, 0) ** 2

    def _conv2(self, mids: np.ndarray) -> np.ndarray:
        p = self.params
        f1, c = mids.shape[1:]
        _, fi = _patch_index(3, f1)
        dt = np.arange(9) // 3
        patches = mids[dt[None, :], fi[0]].reshape(fi.shape[1], 9 * c)
        z = patches @ p.conv2_w.data + p.conv2_b.data
        z = np.maximum(z, 0) ** 2
        return z.reshape(-1) @ p.proj_w.data.T + p.proj_b.data

    def push(self, frame: np.ndarray) -> np.ndarray | None:
        """Consume one raw 80-dim frame; return a d_io output frame when one completes."""
        self.raw = np.roll(self.raw, -1, axis=0)
        self.raw[-1] = frame
        self.n_raw += 1
        if self.n_raw < 3 or (self.n_raw - 3) % 2:
            return None
        self.mid = np.roll(self.mid, -1, axis=0)
        self.mid[-1] = self._conv1(self.raw)
        self.n_mid += 1
        if self.n_mid < 3 or (self.n_mid - 3) % 2:
            return None
        return self._conv2(self.mid)

    def arrays(self) -> list[np.ndarray]:
        return [self.raw, self.mid, np.array([self.n_raw, self.n_mid], dtype=np.int64)]
