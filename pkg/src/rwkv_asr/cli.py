"""Command-line entry point: train, decode, stream, verify, bench."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import synth_dataset
from .decode import DecodeSession, decode_features
from .encoder import EncoderConfig
from .frontend import read_feature_file, read_wav, log_mel_filterbank
from .metrics import EncoderKind, compute_latency, report_left_context
from .model import ModelConfig
from .train import TrainConfig, train

MODEL_KEYS = {"d_io": int, "d_att": int, "d_linear": int, "blocks": int, "dropout": float,
              "vocab": int, "d_pred": int, "d_joint": int, "conv_channels": int, "dtype": str}
TRAIN_KEYS = {"lr": float, "batch_size": int, "epochs": int, "band_width": int,
              "cif_pretrain_epochs": int, "heldout_fraction": float, "grad_clip": float,
              "loss": str, "seed": int}
DATA_KEYS = {"num_utts": int, "min_len": int, "max_len": int, "noise": float, "data_seed": int}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict:
    """Flat ``key=value`` lines; '#' starts a comment; unknown keys are rejected."""
    known = {**MODEL_KEYS, **TRAIN_KEYS, **DATA_KEYS}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            out[key] = known[key](value)
        except ValueError as e:
            raise ConfigError(f"line {n}: bad value for {key}: {value!r}") from e
    return out


def build_configs(kv: dict):
    enc = EncoderConfig(d_io=kv.get("d_io", 64), d_att=kv.get("d_att", 64),
                        d_linear=kv.get("d_linear", 256), num_blocks=kv.get("blocks", 4),
                        dropout_rate=kv.get("dropout", 0.1))
    model = ModelConfig(enc, vocab=kv.get("vocab", 16), d_pred=kv.get("d_pred", 64),
                        d_joint=kv.get("d_joint", 64), conv_channels=kv.get("conv_channels", 8),
                        dtype=kv.get("dtype", "f32"))
    tc = TrainConfig(loss_kind=kv.get("loss", "full"), epochs=kv.get("epochs", 10),
                     batch_size=kv.get("batch_size", 32), lr=kv.get("lr", 2e-3),
                     band_width=kv.get("band_width", 5),
                     cif_pretrain_epochs=kv.get("cif_pretrain_epochs", 1),
                     heldout_fraction=kv.get("heldout_fraction", 0.1),
                     grad_clip=kv.get("grad_clip", 5.0), seed=kv.get("seed", 0))
    data = dict(num_utts=kv.get("num_utts", 2000), len_range=(kv.get("min_len", 3), kv.get("max_len", 8)),
                noise=kv.get("noise", 0.1), seed=kv.get("data_seed", 1))
    return model, tc, data


def _load_input(path: str):
    p = Path(path)
    with open(p, "rb") as f:
        head = f.read(4)
    if head == b"RIFF":
        return log_mel_filterbank(read_wav(p))
    return read_feature_file(p)


def cmd_train(args) -> int:
    kv = parse_config(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        kv["seed"] = args.seed
    if args.loss:
        kv["loss"] = args.loss
    if args.epochs is not None:
        kv["epochs"] = args.epochs
    mc, tc, dc = build_configs(kv)
    ds = synth_dataset(dc["seed"], dc["num_utts"], mc.vocab, dc["len_range"], noise=dc["noise"],
                       dtype=np.float32)
    res = train(mc, tc, ds, progress=lambda m: print(
        f"epoch {m.epoch} nll {m.nll:.4f} token_accuracy {m.token_accuracy:.4f} "
        f"joint_evals {m.joint_evals} ({m.seconds:.1f}s)", flush=True))
    save_checkpoint(res.model, args.out)
    print(f"saved {args.out}")
    return 0


def cmd_decode(args) -> int:
    model = load_checkpoint(args.ckpt)
    tokens = decode_features(_load_input(args.input), model, args.mode)
    print(" ".join(str(t) for t in tokens))
    return 0


def cmd_stream(args) -> int:
    model = load_checkpoint(args.ckpt)
    feats = _load_input(args.input)
    session = DecodeSession(model)
    for frame in feats.frames:
        for tok in session.feed(frame[None, :]):
            print(tok, flush=True)
    session.close()
    return 0


def cmd_verify(args) -> int:
    from .verify import run

    checks = run(args.suite, args.seed)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


def cmd_bench(args) -> int:
    model = load_checkpoint(args.ckpt)
    rng = np.random.default_rng(0)
    session = DecodeSession(model)
    times = []
    for _ in range(args.frames):
        f = rng.normal(size=(1, 80))
        t0 = time.perf_counter()
        session.feed(f)
        times.append(time.perf_counter() - t0)
    print(f"state_bytes {session.state_bytes}")
    print(f"step_ms {1e3 * float(np.median(times)):.3f}")
    print(f"latency_ms {compute_latency(EncoderKind.RWKV)}")
    print(f"left_context {report_left_context(EncoderKind.RWKV)}")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rwkv-asr", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train on the synthetic task and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["full", "bat"])
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="decode one WAV or FEAT file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=["parallel", "stream"], default="parallel")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("stream", help="decode frame by frame, one token per line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("verify", help="run built-in property checks")
    p.add_argument("--suite", choices=["equivalence", "gradients", "oracle", "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="streaming state size and per-frame step time")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", type=int, default=1000)
    p.set_defaults(fn=cmd_bench)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
