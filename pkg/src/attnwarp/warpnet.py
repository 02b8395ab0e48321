"""Attention-to-warp model.

A fully convolutional U-Net reads the outer concatenation of two series
(a W x W "image" with 2K channels) and predicts a W x W matrix of alignment
scores. Row-wise softmax of that matrix (and of its transpose) gives the two
warping matrices used to warp each series onto the other's time axis.

All functions take torch tensors with optional leading batch dimensions;
series are ``(..., W, K)`` and warping matrices ``(..., W, W)``.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    ArchitectureMismatch,
    GraphNotRecorded,
    InvalidConfig,
    NonFiniteActivation,
    NonFiniteInput,
    NotNormalized,
    ParseError,
    ShapeMismatch,
    TimeSeries,
    WarpingMatrix,
)

Tensor = torch.Tensor


@dataclass(frozen=True)
class UNetArch:
    """Layer topology of the warping network.

    ``channels[l]`` is the width of encoder level ``l``; levels are separated
    by 2x2 max-pooling, so there are ``len(channels) - 1`` pooling stages.
    ``encoder_convs[l]`` counts the 3x3 convs at level ``l`` (the last level
    is the bottleneck). The decoder climbs back one level at a time: a
    nearest-neighbour x2 upsample followed by a 3x3 "up-conv", channel
    concatenation with the matching encoder level, then
    ``decoder_convs[d]`` further convs (``d = 0`` is the deepest decoder
    level). A final linear 3x3 conv maps to one output channel.
    """

    in_channels: int
    channels: Tuple[int, ...] = (16, 32, 64)
    encoder_convs: Tuple[int, ...] = (2, 2, 3)
    decoder_convs: Tuple[int, ...] = (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "encoder_convs", tuple(int(c) for c in self.encoder_convs))
        object.__setattr__(self, "decoder_convs", tuple(int(c) for c in self.decoder_convs))
        if self.in_channels < 1 or any(c < 1 for c in self.channels):
            raise InvalidConfig("channel counts must be positive")
        if len(self.encoder_convs) != len(self.channels):
            raise InvalidConfig("encoder_convs needs one entry per level")
        if len(self.decoder_convs) != len(self.channels) - 1:
            raise InvalidConfig("decoder_convs needs one entry per pooling stage")
        if any(c < 1 for c in self.encoder_convs) or any(c < 0 for c in self.decoder_convs):
            raise InvalidConfig("conv counts must be positive")

    @property
    def pooling_stages(self) -> int:
        return len(self.channels) - 1

    @property
    def encoder_layers(self) -> int:
        return sum(self.encoder_convs)

    @property
    def decoder_layers(self) -> int:
        return self.pooling_stages + sum(self.decoder_convs) + 1

    @property
    def skip_map(self) -> Dict[int, int]:
        """Encoder level -> decoder level fed by its skip connection."""
        return {lvl: self.pooling_stages - 1 - lvl for lvl in range(self.pooling_stages)}

    def check_width(self, W: int) -> None:
        if W % (2 ** self.pooling_stages) != 0:
            raise ArchitectureMismatch(
                f"W={W} is not divisible by 2^{self.pooling_stages} required by the pooling schedule"
            )

    def layer_specs(self) -> "OrderedDict[str, Tuple[int, int]]":
        """Ordered ``name -> (in_channels, out_channels)`` for every conv."""
        specs: "OrderedDict[str, Tuple[int, int]]" = OrderedDict()
        cin = self.in_channels
        for lvl, (width, n) in enumerate(zip(self.channels, self.encoder_convs)):
            for c in range(n):
                specs[f"enc{lvl}.{c}"] = (cin, width)
                cin = width
        for d in range(self.pooling_stages):
            lvl = self.pooling_stages - 1 - d
            width = self.channels[lvl]
            specs[f"up{d}"] = (cin, width)
            cin = 2 * width
            for c in range(self.decoder_convs[d]):
                specs[f"dec{d}.{c}"] = (cin, width)
                cin = width
        specs["out"] = (cin, 1)
        return specs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetArch":
        return cls(
            in_channels=int(d["in_channels"]),
            channels=tuple(d["channels"]),
            encoder_convs=tuple(d["encoder_convs"]),
            decoder_convs=tuple(d["decoder_convs"]),
        )


def preset_arch(name: str, K: int) -> UNetArch:
    """Named architectures.

    ``small``: 7 encoder convs and 7 decoder convs, two pooling stages.
    ``large``: 8 and 8, three pooling stages.
    ``tiny``: a two-level net used for gradient checks.
    """
    if name == "small":
        return UNetArch(2 * K, (16, 32, 64), (2, 2, 3), (2, 2))
    if name == "large":
        return UNetArch(2 * K, (16, 32, 64, 128), (2, 2, 2, 2), (2, 1, 1))
    if name == "tiny":
        return UNetArch(2 * K, (4, 8), (1, 1), (1,))
    raise InvalidConfig(f"unknown architecture preset {name!r}")


@dataclass
class UNetParams:
    arch: UNetArch
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        specs = self.arch.layer_specs()
        expected = set()
        for name, (cin, cout) in specs.items():
            expected |= {name + ".weight", name + ".bias"}
            w, b = self.tensors.get(name + ".weight"), self.tensors.get(name + ".bias")
            if w is None or b is None:
                raise ArchitectureMismatch(f"missing parameters for layer {name}")
            if tuple(w.shape) != (cout, cin, 3, 3) or tuple(b.shape) != (cout,):
                raise ArchitectureMismatch(
                    f"layer {name}: got {tuple(w.shape)}/{tuple(b.shape)}, expected {(cout, cin, 3, 3)}/{(cout,)}"
                )
        extra = set(self.tensors) - expected
        if extra:
            raise ArchitectureMismatch(f"unexpected parameters: {sorted(extra)}")
        for name, t in self.tensors.items():
            if not torch.all(torch.isfinite(t)):
                raise NonFiniteInput(f"parameter {name} is not finite")

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "UNetParams":
        return UNetParams(self.arch, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def requires_grad_(self, flag: bool = True) -> "UNetParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def to(self, dtype: torch.dtype) -> "UNetParams":
        return UNetParams(self.arch, OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()))


def init_params(arch: UNetArch, seed: int = 0, dtype: torch.dtype = torch.float64, scheme: str = "he") -> UNetParams:
    """He-normal weights (fan-in, ReLU gain) with zero biases; ``scheme='zeros'`` zeroes everything."""
    gen = torch.Generator().manual_seed(int(seed))
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, (cin, cout) in arch.layer_specs().items():
        if scheme == "he":
            std = math.sqrt(2.0 / (cin * 9))
            w = torch.randn((cout, cin, 3, 3), generator=gen, dtype=torch.float64) * std
        elif scheme == "zeros":
            w = torch.zeros((cout, cin, 3, 3), dtype=torch.float64)
        else:
            raise InvalidConfig(f"unknown init scheme {scheme!r}")
        tensors[name + ".weight"] = w.to(dtype)
        tensors[name + ".bias"] = torch.zeros(cout, dtype=dtype)
    return UNetParams(arch, tensors)


def as_tensor(x, dtype: Optional[torch.dtype] = None) -> Tensor:
    if isinstance(x, TimeSeries):
        x = x.values
    elif isinstance(x, WarpingMatrix):
        x = x.entries
    if isinstance(x, torch.Tensor):
        t = x
    else:
        arr = np.asarray(x)
        # TimeSeries values are read-only; torch wants a writable buffer
        t = torch.from_numpy(arr if arr.flags.writeable else arr.copy())
    if dtype is not None:
        t = t.to(dtype)
    return t


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(a.shape[-2], b.shape[-2], a.shape[-1], b.shape[-1])


def outer_concat(a, b) -> Tensor:
    """(..., W, K) x (..., W, K) -> (..., W, W, 2K); cell (i, j) holds [a_i, b_j]."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    W = a.shape[-2]
    left = a.unsqueeze(-2).expand(*a.shape[:-1], W, a.shape[-1])
    right = b.unsqueeze(-3).expand(*b.shape[:-2], W, W, b.shape[-1])
    return torch.cat([left, right], dim=-1)


def _conv(x: Tensor, params: UNetParams, name: str) -> Tensor:
    return F.conv2d(x, params.tensors[name + ".weight"], params.tensors[name + ".bias"], padding=1)


def unet_forward(x: Tensor, params: UNetParams) -> Tensor:
    """Raw alignment scores for an outer concatenation ``(..., W, W, 2K)`` -> ``(..., W, W)``."""
    x = as_tensor(x)
    arch = params.arch
    if x.shape[-1] != arch.in_channels:
        raise ArchitectureMismatch(f"input has {x.shape[-1]} channels, network expects {arch.in_channels}")
    if x.shape[-2] != x.shape[-3]:
        raise ArchitectureMismatch("input must be square in its spatial dims")
    arch.check_width(x.shape[-2])
    lead = x.shape[:-3]
    h = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2).to(params.dtype)

    skips = []
    for lvl, n in enumerate(arch.encoder_convs):
        if lvl > 0:
            h = F.max_pool2d(h, 2)
        for c in range(n):
            h = F.relu(_conv(h, params, f"enc{lvl}.{c}"))
        if lvl < arch.pooling_stages:
            skips.append(h)
    for d in range(arch.pooling_stages):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(_conv(h, params, f"up{d}"))
        h = torch.cat([skips.pop(), h], dim=1)
        for c in range(arch.decoder_convs[d]):
            h = F.relu(_conv(h, params, f"dec{d}.{c}"))
    out = _conv(h, params, "out")[:, 0]
    if not torch.all(torch.isfinite(out)):
        raise NonFiniteActivation("U-Net output contains NaN or Inf")
    return out.reshape(*lead, *out.shape[-2:])


def row_softmax(m) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    m = as_tensor(m)
    if not torch.all(torch.isfinite(m)):
        raise NonFiniteInput("softmax input contains NaN or Inf")
    shifted = m - m.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def make_paths(p_raw) -> Tuple[Tensor, Tensor]:
    """P_s = softmax over rows of P; P_t = softmax over rows of P transposed."""
    p_raw = as_tensor(p_raw)
    return row_softmax(p_raw), row_softmax(p_raw.transpose(-1, -2))


def warp(p, x, check: bool = True) -> Tensor:
    """Row i of the result is the convex combination p_i . x."""
    if isinstance(p, WarpingMatrix) and not p.normalized:
        raise NotNormalized("warping matrix has not been softmax-normalized")
    p, x = as_tensor(p), as_tensor(x)
    if p.shape[-1] != p.shape[-2] or p.shape[-1] != x.shape[-2]:
        raise ShapeMismatch(p.shape[-2], x.shape[-2], p.shape[-1], x.shape[-1])
    if check:
        sums = p.detach().sum(dim=-1)
        if torch.any(p.detach() < 0) or torch.max(torch.abs(sums - 1)) > 1e-6:
            raise NotNormalized("warping matrix rows must be nonnegative and sum to 1")
    x = x.to(p.dtype)
    return p @ x


def _msd(x: Tensor, y: Tensor) -> Tensor:
    return ((x - y) ** 2).mean(dim=(-2, -1))


def pair_distance(a, b, ps, pt) -> Tensor:
    """Symmetric distance: mean of the two per-direction mean squared residuals."""
    a, b, ps, pt = (as_tensor(t) for t in (a, b, ps, pt))
    _check_pair(a, b)
    a, b = a.to(ps.dtype), b.to(ps.dtype)
    return 0.5 * (_msd(a, warp(ps, b)) + _msd(b, warp(pt, a)))


def contrastive_loss(x, warped, z, tau: float = 1.0) -> Tensor:
    """Mean squared residual for matching pairs (z=1), hinge ``max(0, tau - msd)`` otherwise."""
    x, warped = as_tensor(x), as_tensor(warped)
    if x.shape != warped.shape:
        raise ShapeMismatch(x.shape[-2], warped.shape[-2], x.shape[-1], warped.shape[-1])
    if not tau > 0:
        raise InvalidConfig("margin must be > 0")
    d = _msd(x.to(warped.dtype), warped)
    z = torch.as_tensor(z, dtype=d.dtype)
    return z * d + (1 - z) * F.relu(tau - d)


def training_loss(a, b, ps, pt, z, tau: float = 1.0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    return contrastive_loss(a, warp(ps, b, check=False), z, tau) + contrastive_loss(
        b, warp(pt, a, check=False), z, tau
    )


def pretrain_loss(ps, p_dtw) -> Tensor:
    ps, p_dtw = as_tensor(ps), as_tensor(p_dtw)
    if ps.shape[-2:] != p_dtw.shape[-2:]:
        raise ShapeMismatch(ps.shape[-2], p_dtw.shape[-2], ps.shape[-1], p_dtw.shape[-1])
    return ((ps - p_dtw.to(ps.dtype)) ** 2).mean(dim=(-2, -1))


def backward(loss: Tensor, params: UNetParams) -> "OrderedDict[str, Tensor]":
    """Gradients of a scalar loss with respect to every network parameter."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise GraphNotRecorded("loss was not computed from parameters that require grad")
    if loss.numel() != 1:
        raise GraphNotRecorded("backward needs a scalar loss")
    names = list(params.tensors)
    grads = torch.autograd.grad(loss, [params.tensors[n] for n in names], allow_unused=True)
    return OrderedDict(
        (n, g if g is not None else torch.zeros_like(params.tensors[n])) for n, g in zip(names, grads)
    )


def forward_pair(a, b, params: UNetParams) -> Tuple[Tensor, Tensor, Tensor]:
    """(raw P, P_s, P_t) for a (possibly batched) pair of series."""
    a, b = as_tensor(a, params.dtype), as_tensor(b, params.dtype)
    _check_pair(a, b)
    p = unet_forward(outer_concat(a, b), params)
    ps, pt = make_paths(p)
    return p, ps, pt


class WarpNetMetric:
    """Learned distance between series, evaluated in chunks without grad."""

    def __init__(self, params: UNetParams, chunk: int = 32):
        self.params = params
        self.chunk = chunk

    @torch.no_grad()
    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
        out = []
        for s in range(0, len(A), self.chunk):
            a = as_tensor(A[s : s + self.chunk], self.params.dtype)
            b = as_tensor(B[s : s + self.chunk], self.params.dtype)
            _, ps, pt = forward_pair(a, b, self.params)
            out.append(pair_distance(a, b, ps, pt).to(torch.float64).numpy())
        return np.concatenate(out) if out else np.zeros(0)

    @torch.no_grad()
    def matrices(self, a, b) -> Dict[str, np.ndarray]:
        a, b = as_tensor(a, self.params.dtype), as_tensor(b, self.params.dtype)
        p, ps, pt = forward_pair(a, b, self.params)
        return {
            "P": p.double().numpy(),
            "P_s": ps.double().numpy(),
            "P_t": pt.double().numpy(),
            "P_sB": warp(ps, b).double().numpy(),
            "P_tA": warp(pt, a).double().numpy(),
        }


# --- checkpoint container -------------------------------------------------
#
# layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
# header (sorted keys), then the raw little-endian float arrays listed in the
# header in order.

MAGIC = b"ATWARP\x00\x01"
VERSION = 1


def save_checkpoint(
    path: Union[str, Path],
    params: UNetParams,
    seed: int = 0,
    step: int = 0,
    extra: Optional[dict] = None,
    moments: Optional[Dict[str, Dict[str, Tensor]]] = None,
) -> None:
    arrays = [(name, t) for name, t in params.tensors.items()]
    for kind, group in (moments or {}).items():
        arrays += [(f"{kind}/{name}", t) for name, t in group.items()]
    dtype = "<f8" if params.dtype == torch.float64 else "<f4"
    entries, blobs, offset = [], [], 0
    for name, t in arrays:
        raw = np.ascontiguousarray(t.detach().cpu().numpy().astype(dtype)).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "attnwarp-checkpoint",
        "version": VERSION,
        "arch": params.arch.to_dict(),
        "dtype": dtype,
        "seed": int(seed),
        "step": int(step),
        "arrays": entries,
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hdr)))
        fh.write(hdr)
        for raw in blobs:
            fh.write(raw)


@dataclass
class Checkpoint:
    params: UNetParams
    seed: int
    step: int
    extra: dict
    moments: Dict[str, "OrderedDict[str, Tensor]"]


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ParseError(0, "not an attnwarp checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ParseError(0, f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    torch_dtype = torch.float64 if header["dtype"] == "<f8" else torch.float32
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    moments: Dict[str, "OrderedDict[str, Tensor]"] = {}
    for e in header["arrays"]:
        raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=header["dtype"]).reshape(e["shape"]).copy()
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(torch_dtype)
        if "/" in e["name"]:
            kind, name = e["name"].split("/", 1)
            moments.setdefault(kind, OrderedDict())[name] = t
        else:
            tensors[e["name"]] = t
    params = UNetParams(UNetArch.from_dict(header["arch"]), tensors)
    return Checkpoint(params, header["seed"], header["step"], header.get("extra", {}), moments)
