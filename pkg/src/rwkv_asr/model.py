"""Full model bundle: subsampling front end, RWKV encoder, transducer heads and CIF head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .bat import CifParams, init_cif
from .encoder import EncoderConfig, RwkvLayerParams, clamp_mix_factors, encode, init_layer
from .frontend import SubsampleParams, conv_subsample, init_subsample, subsampled_length
from .numerics import Tensor
from .transducer import TransducerParams, init_transducer


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vocab: int = 16
    d_pred: int = 64
    d_joint: int = 64
    conv_channels: int = 8
    dtype: str = "f64"

    def __post_init__(self):
        if self.vocab < 1:
            raise ValueError("vocab must be at least 1")
        if min(self.d_pred, self.d_joint, self.conv_channels) <= 0:
            raise ValueError("model widths must be positive")
        if self.dtype not in nx.DTYPES:
            raise ValueError(f"dtype must be one of {sorted(nx.DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder"))
        return cls(encoder=enc, **d)


class TransducerModel:
    """Parameters of the whole recognizer; tensors are addressed by dotted names."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        ec, dt = config.encoder, config.dtype
        self.subsample: SubsampleParams = init_subsample(rng, ec.d_io, config.conv_channels, dt)
        self.layers: list[RwkvLayerParams] = [init_layer(rng, ec, dt) for _ in range(ec.num_blocks)]
        self.transducer: TransducerParams = init_transducer(rng, config.vocab, ec.d_io,
                                                            config.d_pred, config.d_joint, dt)
        self.cif: CifParams = init_cif(rng, ec.d_io, dt)

    @property
    def dtype(self):
        return nx.DTYPES[self.config.dtype]

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.subsample.named())
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"blocks.{i}"))
        out.update(self.transducer.named())
        out.update(self.cif.named())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def clamp(self) -> None:
        clamp_mix_factors(self.layers)

    def encode_features(self, feats, raw_lens=None, rng: np.random.Generator | None = None):
        """Raw (N, T_raw, 80) or (T_raw, 80) frames -> (encoder output Tensor, lengths).

        Dropout is active only when ``rng`` is given.
        """
        feats = np.asarray(feats.data if isinstance(feats, Tensor) else feats, dtype=self.dtype)
        single = feats.ndim == 2
        if single:
            feats = feats[None]
        raw_lens = np.full(feats.shape[0], feats.shape[1]) if raw_lens is None else np.asarray(raw_lens)
        x = conv_subsample(feats, self.subsample)
        h = encode(x, self.layers, self.config.encoder.dropout_rate, rng)
        lens = np.array([subsampled_length(int(n)) for n in raw_lens], dtype=np.int64)
        if single:
            return h[0], lens[:1]
        return h, lens
