"""The CTC dual-encoder network.

Two language-specific encoders (each: 2-stage conv subsampling, sinusoidal
positions, pre-norm Transformer blocks, final layer norm) read the same
features.  Their outputs are summed, layer-normalised and passed through a
square affine map to form the mixture representation.  Three projection
heads produce per-frame posteriors over the Mandarin, English and mixture
vocabularies.

Parameters live in a flat, ordered name -> Tensor mapping:

    man.enc.*, man.head.*    Mandarin encoder and head
    eng.enc.*, eng.head.*    English encoder and head
    fusion.*, mix.head.*     fusion layer and mixture head
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LANGS = ("man", "eng")
CKPT_MAGIC = b"LSCACKPT"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 32
    d_ffn: int = 64
    num_heads: int = 2
    dropout: float = 0.1
    feat_dim: int = 16
    man_vocab_size: int = 4
    eng_vocab_size: int = 4
    with_mixture_head: bool = True

    def __post_init__(self):
        for name in ("num_layers", "d_model", "d_ffn", "num_heads", "feat_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.man_vocab_size < 3 or self.eng_vocab_size < 3:
            raise ConfigError("per-head vocabularies need blank, unk and at least one token")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def mix_vocab_size(self) -> int:
        return self.man_vocab_size + self.eng_vocab_size - 2

    def vocab_size(self, head: str) -> int:
        return {"man": self.man_vocab_size, "eng": self.eng_vocab_size, "mix": self.mix_vocab_size}[head]

    def architecture(self) -> Dict[str, int]:
        """The fields that determine tensor shapes."""
        return {
            k: getattr(self, k)
            for k in ("num_layers", "d_model", "d_ffn", "num_heads", "feat_dim", "man_vocab_size", "eng_vocab_size")
        }


def subsampled_length(n: int) -> int:
    """Frames left after the two stride-2 convolutions."""
    return dc.conv_out_len(dc.conv_out_len(n))


class ModelParams:
    """Configuration plus an ordered mapping of named parameter tensors."""

    def __init__(self, cfg: ModelConfig, tensors: Dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    @property
    def parts(self) -> Tuple[str, ...]:
        found = []
        for part in ("man", "eng", "mix"):
            prefix = "fusion." if part == "mix" else part + "."
            if any(n.startswith(prefix) for n in self.tensors):
                found.append(part)
        return tuple(found)

    def has_mixture(self) -> bool:
        return "mix.head.w" in self.tensors

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg, {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()}
        )

    def state(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def subset(self, prefixes: Sequence[str]) -> Dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if n.startswith(tuple(prefixes))}


# initialisation ---------------------------------------------------------------


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _encoder_shapes(cfg: ModelConfig, prefix: str):
    """(name, kind, shape, fan_in, fan_out) for one encoder."""
    c = cfg.d_model
    f2 = subsampled_length(cfg.feat_dim)
    d, ff = cfg.d_model, cfg.d_ffn
    out = [
        (f"{prefix}.conv1.w", "w", (c, 1, 3, 3), 9, c * 9),
        (f"{prefix}.conv1.b", "zero", (c,), 0, 0),
        (f"{prefix}.conv2.w", "w", (c, c, 3, 3), c * 9, c * 9),
        (f"{prefix}.conv2.b", "zero", (c,), 0, 0),
        (f"{prefix}.sub.w", "w", (c * f2, d), c * f2, d),
        (f"{prefix}.sub.b", "zero", (d,), 0, 0),
    ]
    for i in range(cfg.num_layers):
        lp = f"{prefix}.layer{i}"
        out += [
            (f"{lp}.ln1.g", "one", (d,), 0, 0),
            (f"{lp}.ln1.b", "zero", (d,), 0, 0),
        ]
        for m in ("q", "k", "v", "o"):
            out += [(f"{lp}.att.w{m}", "w", (d, d), d, d), (f"{lp}.att.b{m}", "zero", (d,), 0, 0)]
        out += [
            (f"{lp}.ln2.g", "one", (d,), 0, 0),
            (f"{lp}.ln2.b", "zero", (d,), 0, 0),
            (f"{lp}.ffn.w1", "w", (d, ff), d, ff),
            (f"{lp}.ffn.b1", "zero", (ff,), 0, 0),
            (f"{lp}.ffn.w2", "w", (ff, d), ff, d),
            (f"{lp}.ffn.b2", "zero", (d,), 0, 0),
        ]
    out += [(f"{prefix}.ln_final.g", "one", (d,), 0, 0), (f"{prefix}.ln_final.b", "zero", (d,), 0, 0)]
    return out


def _head_shapes(cfg: ModelConfig, head: str):
    d, v = cfg.d_model, cfg.vocab_size(head)
    return [(f"{head}.head.w", "w", (d, v), d, v), (f"{head}.head.b", "zero", (v,), 0, 0)]


def _fusion_shapes(cfg: ModelConfig):
    d = cfg.d_model
    return [
        ("fusion.ln.g", "one", (d,), 0, 0),
        ("fusion.ln.b", "zero", (d,), 0, 0),
        ("fusion.w", "w", (d, d), d, d),
        ("fusion.b", "zero", (d,), 0, 0),
    ]


def param_shapes(cfg: ModelConfig, parts: Sequence[str]):
    shapes = []
    for lang in LANGS:
        if lang in parts:
            shapes += _encoder_shapes(cfg, f"{lang}.enc") + _head_shapes(cfg, lang)
    if "mix" in parts:
        shapes += _fusion_shapes(cfg) + _head_shapes(cfg, "mix")
    return shapes


def _make(shapes, rng: np.random.Generator) -> Dict[str, Tensor]:
    tensors = {}
    for name, kind, shape, fan_in, fan_out in shapes:
        if kind == "w":
            data = _glorot(rng, shape, fan_in, fan_out)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return tensors


def default_parts(cfg: ModelConfig) -> Tuple[str, ...]:
    return ("man", "eng", "mix") if cfg.with_mixture_head else ("man", "eng")


def init_params(cfg: ModelConfig, seed: int, parts: Optional[Sequence[str]] = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    ``parts`` selects components; a monolingual model is ``("man",)`` or
    ``("eng",)`` and should use ``with_mixture_head=False``.
    """
    parts = tuple(parts) if parts is not None else default_parts(cfg)
    if "mix" in parts and not cfg.with_mixture_head:
        raise ConfigError("mixture head requested but with_mixture_head is false")
    rng = np.random.default_rng(seed)
    return ModelParams(cfg, _make(param_shapes(cfg, parts), rng))


# forward ------------------------------------------------------------------------


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, T', d_model)
    lengths: np.ndarray  # (B,)

    @property
    def num_frames(self) -> int:
        return self.hidden.shape[1]


def _as_batch(x, lengths=None) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dc.get_dtype())
    if x.ndim == 2:
        x = x[None]
        if lengths is None:
            lengths = [x.shape[1]]
    if x.ndim != 3:
        raise dc.ShapeError(f"features must be (T, F) or (B, T, F), got {x.shape}")
    if lengths is None:
        lengths = [x.shape[1]] * x.shape[0]
    return x, np.asarray(lengths, dtype=np.int64)


def _time_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    return np.arange(t)[None, :] < lengths[:, None]


def encode_language(
    p: ModelParams,
    x,
    lang: str,
    lengths=None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> EncoderOutput:
    """Run one language-specific encoder on (T, F) or padded (B, T, F) features."""
    if lang not in LANGS:
        raise ValueError(f"unknown language {lang!r}")
    if lang not in p.parts:
        raise CheckpointError(f"model has no {lang} encoder")
    cfg = p.cfg
    x, lengths = _as_batch(x, lengths)
    bsz, t, f = x.shape
    if f != cfg.feat_dim:
        raise dc.ShapeError(f"expected {cfg.feat_dim} feature columns, got {f}")
    if lengths.min() < 4:
        raise dc.ShapeError(f"utterance too short: {int(lengths.min())} frames (need >= 4)")
    pre = f"{lang}.enc"
    drop = cfg.dropout

    t1 = dc.conv_out_len(t)
    len1 = np.array([dc.conv_out_len(n) for n in lengths])
    len2 = np.array([dc.conv_out_len(n) for n in len1])
    # channels-last: (B, T, F, C); padded frames are re-zeroed after each stage
    h = dc.conv2d(Tensor(x[..., None]), p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"])
    h = dc.mul(dc.relu(h), _time_mask(len1, t1)[:, :, None, None].astype(x.dtype))
    h = dc.conv2d(h, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"])
    t2 = h.shape[1]
    mask2 = _time_mask(len2, t2)
    h = dc.mul(dc.relu(h), mask2[:, :, None, None].astype(x.dtype))
    h = dc.reshape(h, (bsz, t2, h.shape[2] * h.shape[3]))
    h = dc.affine(h, p[f"{pre}.sub.w"], p[f"{pre}.sub.b"])
    h = dc.add(dc.scale(h, math.sqrt(cfg.d_model)), dc.positional_encoding(t2, cfg.d_model))
    h = dc.dropout(h, drop, rng, train)

    for i in range(cfg.num_layers):
        lp = f"{pre}.layer{i}"
        y = dc.layer_norm(h, p[f"{lp}.ln1.g"], p[f"{lp}.ln1.b"])
        y = dc.multi_head_attention(
            y,
            *(p[f"{lp}.att.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
            num_heads=cfg.num_heads,
            key_mask=mask2,
            p=drop,
            rng=rng,
            train=train,
        )
        h = dc.add(h, dc.dropout(y, drop, rng, train))
        y = dc.layer_norm(h, p[f"{lp}.ln2.g"], p[f"{lp}.ln2.b"])
        y = dc.feed_forward(
            y, p[f"{lp}.ffn.w1"], p[f"{lp}.ffn.b1"], p[f"{lp}.ffn.w2"], p[f"{lp}.ffn.b2"], drop, rng, train
        )
        h = dc.add(h, dc.dropout(y, drop, rng, train))
    h = dc.layer_norm(h, p[f"{pre}.ln_final.g"], p[f"{pre}.ln_final.b"])
    return EncoderOutput(h, len2)


def fuse_hidden(h_man: EncoderOutput, h_eng: EncoderOutput, p: ModelParams) -> EncoderOutput:
    """Layer-normalise the sum of both encoder outputs, then apply the fusion affine map."""
    if h_man.hidden.shape != h_eng.hidden.shape or not np.array_equal(h_man.lengths, h_eng.lengths):
        raise dc.ShapeError(f"fusion inputs differ: {h_man.hidden.shape} vs {h_eng.hidden.shape}")
    z = dc.layer_norm(dc.add(h_man.hidden, h_eng.hidden), p["fusion.ln.g"], p["fusion.ln.b"])
    return EncoderOutput(dc.affine(z, p["fusion.w"], p["fusion.b"]), h_man.lengths)


def head_logits(h: EncoderOutput, p: ModelParams, head: str) -> Tensor:
    w = p[f"{head}.head.w"]
    if w.shape[0] != h.hidden.shape[-1] or w.shape[1] != p.cfg.vocab_size(head):
        raise dc.ShapeError(f"{head} head {w.shape} does not match input {h.hidden.shape}")
    return dc.affine(h.hidden, w, p[f"{head}.head.b"])


def project_head(h: EncoderOutput, p: ModelParams, head: str, log: bool = False) -> Tensor:
    """Per-frame posteriors (or log-posteriors) of one projection head."""
    logits = head_logits(h, p, head)
    return dc.log_softmax(logits) if log else dc.softmax(logits)


def forward(
    p: ModelParams,
    x,
    lengths=None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    heads: Optional[Sequence[str]] = None,
) -> Tuple[Dict[str, Tensor], np.ndarray]:
    """Logits of every available head (or those in ``heads``) and output lengths."""
    parts = p.parts
    heads = tuple(heads) if heads is not None else tuple(h for h in ("mix", "man", "eng") if h in parts)
    enc = {}
    for lang in LANGS:
        if lang in parts and (lang in heads or "mix" in heads):
            enc[lang] = encode_language(p, x, lang, lengths, train, rng)
    logits = {}
    if "mix" in heads:
        if not p.has_mixture():
            raise CheckpointError("model has no mixture head")
        logits["mix"] = head_logits(fuse_hidden(enc["man"], enc["eng"], p), p, "mix")
    for lang in LANGS:
        if lang in heads:
            logits[lang] = head_logits(enc[lang], p, lang)
    out_lens = next(iter(enc.values())).lengths
    return logits, out_lens


def posteriors(p: ModelParams, x, lengths=None, heads=None) -> Tuple[Dict[str, List[np.ndarray]], np.ndarray]:
    """Evaluation-mode per-utterance probability grids, trimmed to their lengths."""
    logits, out_lens = forward(p, x, lengths, train=False, heads=heads)
    out = {}
    for head, z in logits.items():
        prob = dc._softmax(z.data.astype(np.float64), -1)
        out[head] = [prob[b, : out_lens[b]] for b in range(prob.shape[0])]
    return out, out_lens


# checkpoints ------------------------------------------------------------------------


def _cfg_from_json(raw: bytes) -> ModelConfig:
    return ModelConfig(**json.loads(raw.decode("utf-8")))


def checkpoint_bytes(p: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg = json.dumps(asdict(p.cfg), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(p.tensors)))
    for name, t in p.tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path: Union[str, Path], p: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(p))


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at offset {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (clen,) = struct.unpack("<I", take(4))
    cfg = _cfg_from_json(take(clen))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes at offset {pos}")
    return ModelParams(cfg, tensors)


def _as_params(ckpt) -> ModelParams:
    return ckpt if isinstance(ckpt, ModelParams) else load_checkpoint(ckpt)


def extract_language(p: ModelParams, lang: str) -> ModelParams:
    """The monolingual model (encoder + head) for ``lang``."""
    sub = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in p.subset([lang + "."]).items()}
    if not sub:
        raise CheckpointError(f"model has no {lang} component")
    return ModelParams(replace(p.cfg, with_mixture_head=False), sub)


def load_from_pretrained(target: ModelParams, man_ckpt, eng_ckpt) -> ModelParams:
    """Copy each language's encoder and head from its monolingual checkpoint.

    The fusion layer and mixture head of ``target`` are kept as initialised.
    """
    sources = {"man": _as_params(man_ckpt), "eng": _as_params(eng_ckpt)}
    tensors = {}
    for name, t in target.tensors.items():
        lang = name.split(".", 1)[0]
        if lang in sources:
            src = sources[lang]
            if name not in src:
                raise CheckpointError(f"pretrained {lang} checkpoint lacks tensor {name}")
            if src[name].shape != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {src[name].shape} vs model {t.shape}")
            tensors[name] = Tensor(src[name].data.copy(), requires_grad=True, name=name)
        else:
            tensors[name] = Tensor(t.data.copy(), requires_grad=True, name=name)
    return ModelParams(target.cfg, tensors)


def average_checkpoints(ckpts: Sequence) -> ModelParams:
    """Element-wise mean of every tensor.

    Values are sorted before summation so the result does not depend on the
    order of ``ckpts``; averaging offsets from the smallest value keeps the
    mean of identical tensors exact.
    """
    ckpts = [_as_params(c) for c in ckpts]
    if not ckpts:
        raise CheckpointError("no checkpoints to average")
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.names() != first.names():
            raise CheckpointError("checkpoints have different tensor sets")
        for n in first.names():
            if c[n].shape != first[n].shape:
                raise CheckpointError(f"shape mismatch for {n}: {c[n].shape} vs {first[n].shape}")
    tensors = {}
    for n in first.names():
        stack = np.sort(np.stack([c[n].data for c in ckpts]), axis=0)
        base = stack[0]
        tensors[n] = Tensor(base + (stack - base).sum(axis=0) / len(ckpts), requires_grad=True, name=n)
    return ModelParams(first.cfg, tensors)
