"""Low-rank adapters, drop-and-rescale merging, and the ``LOID`` tensor file format."""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .textenc import AttachPoint, EncoderParams

MAGIC = b"LOID"
VERSION = 1

_ADAPTER_NAME = re.compile(r"(layer\d+\.\w+)\.(A|B)")


class FormatError(ValueError):
    """Raised for malformed, truncated or foreign tensor files."""


@dataclass
class LoraAdapter:
    pairs: dict[AttachPoint, tuple[torch.Tensor, torch.Tensor]]
    rank: int
    label: str = ""

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for point, (B, A) in self.pairs.items():
            out[point.key + ".A"] = A
            out[point.key + ".B"] = B
        return out

    def parameters(self) -> list[torch.Tensor]:
        return [t for pair in self.pairs.values() for t in pair]

    def clone(self) -> "LoraAdapter":
        return LoraAdapter({p: (B.detach().clone(), A.detach().clone()) for p, (B, A) in self.pairs.items()},
                           self.rank, self.label)

    def requires_grad_(self, flag: bool = True) -> "LoraAdapter":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self


@dataclass
class MergeSpec:
    p: float = 0.0
    seed: int = 0
    adapters: list[LoraAdapter] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"drop probability must be in [0, 1), got {self.p}")


def init_adapter(points: list[AttachPoint], rank: int, seed: int, shapes: dict[AttachPoint, tuple[int, int]],
                 label: str = "", dtype: torch.dtype = torch.float32) -> LoraAdapter:
    """Fresh adapter with ``A ~ N(0, 0.02^2)`` and ``B = 0``, an exact identity.

    ``shapes`` maps each point to the ``(d_out, d_in)`` shape of its base matrix.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    g = torch.Generator().manual_seed(seed)
    pairs = {}
    for point in points:
        d_out, d_in = shapes[point]
        if rank >= min(d_out, d_in):
            raise ValueError(f"rank {rank} is not below min dimension of {point.key} ({d_out}x{d_in})")
        A = (torch.randn(rank, d_in, generator=g, dtype=torch.float64) * 0.02).to(dtype)
        B = torch.zeros(d_out, rank, dtype=dtype)
        pairs[point] = (B, A)
    return LoraAdapter(pairs, rank, label)


def init_adapter_for(params: EncoderParams, rank: int, seed: int, matrices=None, label: str = "") -> LoraAdapter:
    points = params.attach_points() if matrices is None else params.attach_points(matrices)
    shapes = {p: tuple(params.weight(p).shape) for p in points}
    return init_adapter(points, rank, seed, shapes, label=label, dtype=params.dtype)


def apply_adapter(W: torch.Tensor, B: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    if B.dim() != 2 or A.dim() != 2 or B.shape[1] != A.shape[0] or (B.shape[0], A.shape[1]) != tuple(W.shape):
        raise ValueError(f"cannot apply B {tuple(B.shape)} @ A {tuple(A.shape)} to W {tuple(W.shape)}")
    return W + B @ A


def delta_of(adapter: LoraAdapter) -> dict[AttachPoint, torch.Tensor]:
    return {point: (B @ A).detach() for point, (B, A) in adapter.pairs.items()}


def dare_drop_rescale(delta: dict[AttachPoint, torch.Tensor], p: float, seed: int) -> dict[AttachPoint, torch.Tensor]:
    """Zero each entry with probability ``p`` and scale survivors by ``1 / (1 - p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    if p == 0.0:
        return {k: v.clone() for k, v in delta.items()}
    g = torch.Generator().manual_seed(seed)
    out = {}
    # sorted order keeps the mask stream independent of dict insertion order
    for point in sorted(delta, key=lambda q: (q.layer, q.matrix)):
        d = delta[point]
        keep = torch.rand(d.shape, generator=g, dtype=torch.float64) >= p
        out[point] = rescale_kept(d, keep, p)
    return out


def rescale_kept(delta: torch.Tensor, keep: torch.Tensor, p: float) -> torch.Tensor:
    """Apply a given keep-mask to one delta matrix and rescale by ``1 / (1 - p)``."""
    return torch.where(keep, delta / (1.0 - p), torch.zeros_like(delta))


def sub_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def dare_merge(base: EncoderParams, spec: MergeSpec) -> EncoderParams:
    """``base + sum_i drop_rescale(delta_i)``; a new parameter set, inputs untouched."""
    merged = base.clone()
    for i, adapter in enumerate(spec.adapters):
        delta = dare_drop_rescale(delta_of(adapter), spec.p, sub_seed(spec.seed, i))
        for point, d in delta.items():
            name = point.key + ".W"
            if name not in merged.tensors:
                raise ValueError(f"adapter attaches to {point.key}, which the base does not have")
            if merged.tensors[name].shape != d.shape:
                raise ValueError(f"delta shape {tuple(d.shape)} does not match {name} {tuple(merged.tensors[name].shape)}")
            merged.tensors[name] = merged.tensors[name] + d.to(merged.dtype)
    return merged


# --- tensor framing -------------------------------------------------------

def write_tensors(path, tensors: dict[str, torch.Tensor], rank: int = 0) -> None:
    """Write tensors as little-endian float32, atomically."""
    chunks = [MAGIC, struct.pack("<HHI", VERSION, rank, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().to(torch.float32).contiguous().numpy()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: file truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def read_tensors(path) -> tuple[int, dict[str, torch.Tensor]]:
    """Return ``(rank, tensors)`` from a ``LOID`` file."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a LOID tensor file")
    version, rank, count = struct.unpack("<HHI", r.take(8, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {VERSION})")
    tensors = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, f"name length of tensor #{i}"))
        name = r.take(nlen, f"name of tensor #{i}").decode("utf-8")
        (ndim,) = struct.unpack("<B", r.take(1, f"tensor '{name}'"))
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"tensor '{name}'"))
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(4 * size, f"tensor '{name}'"), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(data.astype(np.float32))
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after {count} tensors")
    return rank, tensors


def adapter_from_tensors(tensors: dict[str, torch.Tensor], rank: int, label: str = "") -> LoraAdapter:
    halves: dict[str, dict[str, torch.Tensor]] = {}
    for name, t in tensors.items():
        m = _ADAPTER_NAME.fullmatch(name)
        if m is None:
            continue
        halves.setdefault(m.group(1), {})[m.group(2)] = t
    pairs = {}
    for key, ab in halves.items():
        for part in ("A", "B"):
            if part not in ab:
                raise FormatError(f"missing tensor '{key}.{part}'")
        pairs[AttachPoint.parse(key)] = (ab["B"], ab["A"])
    for point, (B, A) in pairs.items():
        if B.shape[1] != rank or A.shape[0] != rank:
            raise FormatError(f"tensor '{point.key}' has rank {A.shape[0]}, header says {rank}")
    return LoraAdapter(pairs, rank, label)


def save_adapter(adapter: LoraAdapter, path) -> None:
    tensors = adapter.tensors()
    if adapter.label:
        tensors["meta.label." + adapter.label] = torch.zeros(0)
    write_tensors(path, tensors, rank=adapter.rank)


def load_adapter(path) -> LoraAdapter:
    rank, tensors = read_tensors(path)
    labels = [n[len("meta.label."):] for n in tensors if n.startswith("meta.label.")]
    unknown = [n for n in tensors if not n.startswith("meta.") and _ADAPTER_NAME.fullmatch(n) is None]
    if unknown:
        raise FormatError(f"{path}: unexpected tensor '{unknown[0]}' in adapter file")
    return adapter_from_tensors(tensors, rank, labels[0] if labels else "")


def save_encoder(params: EncoderParams, path) -> None:
    tensors = dict(params.tensors)
    tensors["meta.n_heads"] = torch.tensor([float(params.n_heads)])
    write_tensors(path, tensors, rank=0)


def load_encoder(path) -> EncoderParams:
    _, tensors = read_tensors(path)
    if "meta.n_heads" not in tensors or "embed.tok" not in tensors:
        raise FormatError(f"{path}: not an encoder file (missing 'meta.n_heads' or 'embed.tok')")
    n_heads = int(tensors.pop("meta.n_heads")[0])
    try:
        return EncoderParams(tensors, n_heads)
    except KeyError as e:
        raise FormatError(f"{path}: missing tensor {e}") from None
