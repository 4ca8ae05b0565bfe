"""Checkpoint save/load for the concrete models."""

from __future__ import annotations

import numpy as np

from .cfm import CfmConfig, CfmModel
from .checkpoint import load_checkpoint, save_checkpoint
from .fsq import FsqCodec, FsqConfig
from .seqlm import ToyLM, Vocabulary


def _named(model) -> list[tuple[str, np.ndarray]]:
    return [(f"p{i:03d}", p.data) for i, p in enumerate(model.parameters())]


def _restore(model, params: dict[str, np.ndarray]) -> None:
    own = model.parameters()
    if len(own) != len(params):
        raise ValueError(f"checkpoint has {len(params)} arrays, model needs {len(own)}")
    for i, p in enumerate(own):
        arr = params[f"p{i:03d}"]
        if arr.shape != p.data.shape:
            raise ValueError(f"parameter p{i:03d} shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(np.float64).copy()


def save_lm(path, model: ToyLM) -> None:
    meta = {
        "speech_size": str(model.vocab.speech_size),
        "text_size": str(model.vocab.text_size),
        "dim": str(model.dim),
        "n_blocks": str(len(model.blocks)),
        "max_len": str(model.max_len),
    }
    save_checkpoint(path, "seqlm.ToyLM", _named(model), meta)


def load_lm(path) -> ToyLM:
    module, params, meta = load_checkpoint(path)
    if module != "seqlm.ToyLM":
        raise ValueError(f"{path}: checkpoint holds {module}, not a ToyLM")
    vocab = Vocabulary(int(meta["speech_size"]), int(meta["text_size"]))
    model = ToyLM(vocab, dim=int(meta["dim"]), n_blocks=int(meta["n_blocks"]),
                  max_len=int(meta["max_len"]))
    _restore(model, params)
    return model


def save_cfm(path, model: CfmModel) -> None:
    c = model.config
    meta = {name: str(getattr(c, name)) for name in (
        "n_features", "token_vocab", "token_embed", "hidden", "speaker_dim",
        "lookahead", "n_align_blocks", "n_estimator_blocks", "time_dim")}
    meta.update(p_uncond=repr(c.p_uncond), beta=repr(c.beta), nfe=str(c.nfe))
    save_checkpoint(path, "cfm.CfmModel", _named(model), meta)


def load_cfm(path) -> CfmModel:
    module, params, meta = load_checkpoint(path)
    if module != "cfm.CfmModel":
        raise ValueError(f"{path}: checkpoint holds {module}, not a CfmModel")
    ints = {name: int(meta[name]) for name in (
        "n_features", "token_vocab", "token_embed", "hidden", "speaker_dim",
        "lookahead", "n_align_blocks", "n_estimator_blocks", "time_dim")}
    cfg = CfmConfig(**ints, p_uncond=float(meta["p_uncond"]),
                    beta=float(meta["beta"]), nfe=int(meta["nfe"]))
    model = CfmModel(cfg)
    _restore(model, params)
    return model


def save_codec(path, codec: FsqCodec) -> None:
    meta = {"d": str(codec.config.d), "k": str(codec.config.k),
            "hidden": str(codec.hidden)}
    save_checkpoint(path, "fsq.FsqCodec", _named(codec), meta)


def load_codec(path) -> FsqCodec:
    module, params, meta = load_checkpoint(path)
    if module != "fsq.FsqCodec":
        raise ValueError(f"{path}: checkpoint holds {module}, not an FsqCodec")
    codec = FsqCodec(FsqConfig(int(meta["d"]), int(meta["k"])),
                     hidden=int(meta["hidden"]))
    _restore(codec, params)
    return codec
