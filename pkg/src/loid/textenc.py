"""Tokenizer and a small pre-layer-norm transformer encoder.

The encoder is written functionally: every weight lives in an
:class:`EncoderParams` dictionary so that low-rank adapters can be attached to
any of the projection matrices without touching the frozen tensors.
"""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import torch
import torch.nn.functional as F

CLS, UNK, PAD = "[CLS]", "[UNK]", "[PAD]"
RESERVED = (CLS, UNK, PAD)
CLS_ID, UNK_ID, PAD_ID = 0, 1, 2

# Matrices that can carry an adapter, per layer.
MATRIX_NAMES = ("Q", "K", "V", "FFN_in", "FFN_out")

_SPLIT = re.compile(r"[^0-9a-z]+")


def split_words(text: str) -> list[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


@dataclass
class Vocab:
    tokens: list[str]
    min_freq: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("vocab must start with [CLS], [UNK], [PAD]")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Frequency vocabulary; ties keep first-seen order so the result only depends on corpus order."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(split_words(text))
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    return Vocab(list(RESERVED) + kept, min_freq=min_freq)


def tokenize(text: str, vocab: Vocab, max_len: int) -> tuple[list[int], list[bool]]:
    """Return ``(ids, mask)`` of length ``max_len``; mask is True on non-[PAD] positions."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = [CLS_ID] + [vocab.id(w) for w in split_words(text)]
    ids = ids[:max_len]
    mask = [True] * len(ids) + [False] * (max_len - len(ids))
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return ids, mask


def tokenize_batch(texts: Iterable[str], vocab: Vocab, max_len: int) -> torch.Tensor:
    return torch.tensor([tokenize(t, vocab, max_len)[0] for t in texts], dtype=torch.long)


def placeholder_tokens(max_len: int) -> torch.Tensor:
    """``[CLS][UNK]`` followed by padding, used for entities without history."""
    ids = [CLS_ID, UNK_ID] + [PAD_ID] * (max_len - 2)
    return torch.tensor(ids, dtype=torch.long)


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ffn: int = 128
    max_len: int = 64


@dataclass(frozen=True)
class AttachPoint:
    layer: int
    matrix: str

    def __post_init__(self):
        if self.matrix not in MATRIX_NAMES:
            raise ValueError(f"unknown matrix {self.matrix!r}; expected one of {MATRIX_NAMES}")

    @property
    def key(self) -> str:
        return f"layer{self.layer}.{self.matrix}"

    @classmethod
    def parse(cls, key: str) -> "AttachPoint":
        m = re.fullmatch(r"layer(\d+)\.(\w+)", key)
        if m is None:
            raise ValueError(f"bad attach point name {key!r}")
        return cls(int(m.group(1)), m.group(2))


class EncoderParams:
    """Named weight tensors of the encoder.

    Weights follow the ``(d_out, d_in)`` convention so that ``y = x @ W.T + b``;
    an adapter pair ``(B, A)`` on a matrix has shapes ``(d_out, r)`` and ``(r, d_in)``.
    """

    def __init__(self, tensors: dict[str, torch.Tensor], n_heads: int):
        self.tensors = tensors
        self.n_heads = n_heads
        emb = tensors["embed.tok"]
        self.vocab_size, self.d_model = emb.shape
        self.max_len = tensors["embed.pos"].shape[0]
        self.n_layers = sum(1 for k in tensors if k.endswith(".Q.W"))
        self.d_ffn = tensors["layer0.FFN_in.W"].shape[0] if self.n_layers else 0
        if self.d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["embed.tok"].dtype

    @property
    def config(self) -> EncoderConfig:
        return EncoderConfig(self.d_model, self.n_layers, self.n_heads, self.d_ffn, self.max_len)

    def weight(self, point: AttachPoint) -> torch.Tensor:
        return self.tensors[point.key + ".W"]

    def attach_points(self, matrices: Iterable[str] = MATRIX_NAMES) -> list[AttachPoint]:
        return [AttachPoint(i, m) for i in range(self.n_layers) for m in matrices]

    def clone(self) -> "EncoderParams":
        return EncoderParams({k: v.clone() for k, v in self.tensors.items()}, self.n_heads)

    def to(self, dtype: torch.dtype) -> "EncoderParams":
        return EncoderParams({k: v.to(dtype) for k, v in self.tensors.items()}, self.n_heads)

    def checksum(self) -> str:
        return tensor_checksum(self.tensors)


def tensor_checksum(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def init_encoder(vocab_size: int, config: EncoderConfig = EncoderConfig(), seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> EncoderParams:
    """Random encoder standing in for a pretrained checkpoint."""
    g = torch.Generator().manual_seed(seed)
    d, f = config.d_model, config.d_ffn

    def normal(*shape, std=0.02):
        return (torch.randn(*shape, generator=g, dtype=torch.float64) * std).to(dtype)

    t = {
        "embed.tok": normal(vocab_size, d, std=1.0 / math.sqrt(d) * 4),
        "embed.pos": normal(config.max_len, d, std=0.1),
        "final.ln.g": torch.ones(d, dtype=dtype),
        "final.ln.b": torch.zeros(d, dtype=dtype),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        for name, shape in (("Q", (d, d)), ("K", (d, d)), ("V", (d, d)), ("O", (d, d)),
                            ("FFN_in", (f, d)), ("FFN_out", (d, f))):
            t[p + name + ".W"] = normal(*shape, std=1.0 / math.sqrt(shape[1]))
            t[p + name + ".b"] = torch.zeros(shape[0], dtype=dtype)
        for ln in ("ln1", "ln2"):
            t[p + ln + ".g"] = torch.ones(d, dtype=dtype)
            t[p + ln + ".b"] = torch.zeros(d, dtype=dtype)
    return EncoderParams(t, config.n_heads)


def _linear(x, params: EncoderParams, point: AttachPoint, adapter) -> torch.Tensor:
    W = params.weight(point)
    if adapter is not None and point in adapter.pairs:
        B, A = adapter.pairs[point]
        if B.shape != (W.shape[0], A.shape[0]) or A.shape[1] != W.shape[1]:
            raise ValueError(
                f"adapter shape mismatch at {point.key}: W {tuple(W.shape)}, "
                f"B {tuple(B.shape)}, A {tuple(A.shape)}"
            )
        W = W + B @ A
    return x @ W.T + params.tensors[point.key + ".b"]


def encode(tokens: torch.Tensor, params: EncoderParams, adapter=None, *,
           dropout: float = 0.0, generator: torch.Generator | None = None) -> torch.Tensor:
    """Final-layer hidden state at the [CLS] position.

    ``tokens`` is ``(L,)`` or ``(N, L)``; the result is ``(d,)`` or ``(N, d)``.
    Dropout is applied to attention probabilities only when ``dropout > 0``.
    """
    single = tokens.dim() == 1
    if single:
        tokens = tokens.unsqueeze(0)
    n, length = tokens.shape
    if length > params.max_len:
        raise ValueError(f"sequence length {length} exceeds encoder max_len {params.max_len}")
    if int(tokens.max()) >= params.vocab_size or int(tokens.min()) < 0:
        raise ValueError("token id out of vocabulary range")
    T = params.tensors
    d, h = params.d_model, params.n_heads
    hd = d // h
    key_pad = (tokens == PAD_ID)[:, None, None, :]

    x = T["embed.tok"][tokens] + T["embed.pos"][:length]
    for i in range(params.n_layers):
        p = f"layer{i}."
        y = F.layer_norm(x, (d,), T[p + "ln1.g"], T[p + "ln1.b"])
        q = _linear(y, params, AttachPoint(i, "Q"), adapter).view(n, length, h, hd).transpose(1, 2)
        k = _linear(y, params, AttachPoint(i, "K"), adapter).view(n, length, h, hd).transpose(1, 2)
        v = _linear(y, params, AttachPoint(i, "V"), adapter).view(n, length, h, hd).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        scores = scores.masked_fill(key_pad, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        if dropout > 0:
            probs = _dropout(probs, dropout, generator)
        att = (probs @ v).transpose(1, 2).reshape(n, length, d)
        x = x + att @ T[p + "O.W"].T + T[p + "O.b"]
        y = F.layer_norm(x, (d,), T[p + "ln2.g"], T[p + "ln2.b"])
        y = F.gelu(_linear(y, params, AttachPoint(i, "FFN_in"), adapter))
        x = x + _linear(y, params, AttachPoint(i, "FFN_out"), adapter)
    out = F.layer_norm(x[:, 0], (d,), T["final.ln.g"], T["final.ln.b"])
    return out[0] if single else out


def _dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None) -> torch.Tensor:
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)
