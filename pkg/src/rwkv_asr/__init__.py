"""Streaming transducer ASR with an RWKV encoder, in numpy."""
from .encoder import EncoderConfig
from .model import ModelConfig, TransducerModel

__version__ = "0.1.0"
__all__ = ["EncoderConfig", "ModelConfig", "TransducerModel"]
