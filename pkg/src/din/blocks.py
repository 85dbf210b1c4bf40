"""Residual dense block, weighted residual dense block and co-attention fusion.

Parameters live in small dataclasses that own `Tensor` leaves. Each
dataclass exposes `named_parameters(prefix)` so a whole model can be
flattened into a deterministic, ordered name -> tensor mapping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .profiler import record
from .tensor import ShapeError, Tensor

LRELU_SLOPE = 0.2

FUSION_MODES = ("asyca", "sum", "concat", "se")


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor | None
    stride: int = 1
    pad: int = 0

    @classmethod
    def init(cls, rng, cin, cout, k, *, stride=1, pad=None, bias=True, gain=1.0, dtype=np.float32):
        # He-normal, variance 2 / fan_in, optionally shrunk for residual branches
        std = gain * np.sqrt(2.0 / (cin * k * k))
        w = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), requires_grad=True)
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        return cls(w, b, stride, k // 2 if pad is None else pad)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


# ---------------------------------------------------------------------------
# RDB


@dataclass
class RdbParams:
    """K densely connected 3x3 convs with a gamma-scaled identity shortcut.

    Layer k (1-based) sees C + (k-1)*G channels. Without `fusion`, the last
    layer emits C channels and is itself F_K. With `fusion`, every layer
    emits G channels and a 1x1 conv maps the C + K*G concatenation to C.
    """

    layers: list[Conv]
    fusion: Conv | None = None
    gamma: float = 0.1

    @classmethod
    def init(cls, rng, channels, growth, n_layers, *, gamma=0.1, local_fusion=False, dtype=np.float32):
        layers = []
        for k in range(1, n_layers + 1):
            cin = channels + (k - 1) * growth
            last = k == n_layers and not local_fusion
            cout = channels if last else growth
            layers.append(Conv.init(rng, cin, cout, 3, gain=0.1 if last else 1.0, dtype=dtype))
        fusion = None
        if local_fusion:
            fusion = Conv.init(rng, channels + n_layers * growth, channels, 1, gain=0.1, dtype=dtype)
        return cls(layers, fusion, gamma)

    @property
    def channels(self) -> int:
        return self.layers[0].cin

    def named_parameters(self, prefix: str):
        for i, conv in enumerate(self.layers):
            yield from conv.named_parameters(f"{prefix}.conv{i}")
        if self.fusion is not None:
            yield from self.fusion.named_parameters(f"{prefix}.fusion")


def rdb_forward(x: Tensor, p: RdbParams) -> Tensor:
    if x.shape[1] != p.channels:
        raise ShapeError(f"RDB expects {p.channels} channels, got input {x.shape}")
    feats = [x]
    out = None
    for conv in p.layers:
        out = ops.leaky_relu(conv(ops.concat_channels(*feats)), LRELU_SLOPE)
        feats.append(out)
    if p.fusion is not None:
        out = p.fusion(ops.concat_channels(*feats))
    return ops.add(out, ops.scale(x, p.gamma))


# ---------------------------------------------------------------------------
# WRDB


@dataclass
class WrdbParams:
    """Entry 3x3 conv followed by B RDBs joined by densely weighted connections.

    `dwc[b]` holds the b+1 per-channel scaling vectors that feed RDB b+1
    from states X_0 .. X_b. `dwc` is None when the weighted connections are
    disabled (plain element-wise summation of all earlier states).
    """

    entry: Conv
    rdbs: list[RdbParams]
    dwc: list[list[Tensor]] | None = None

    @classmethod
    def init(cls, rng, channels, growth, n_layers, n_rdbs, *, gamma=0.1, local_fusion=False,
             use_dwc=True, dtype=np.float32):
        if n_rdbs < 1:
            raise ValueError("a WRDB needs at least one RDB (B >= 1)")
        entry = Conv.init(rng, channels, channels, 3, dtype=dtype)
        rdbs = [RdbParams.init(rng, channels, growth, n_layers, gamma=gamma, local_fusion=local_fusion, dtype=dtype)
                for _ in range(n_rdbs)]
        dwc = None
        if use_dwc:
            dwc = [[Tensor(np.ones(channels, dtype=dtype), requires_grad=True) for _ in range(b + 1)] for b in range(n_rdbs)]
        return cls(entry, rdbs, dwc)

    def named_parameters(self, prefix: str):
        yield from self.entry.named_parameters(f"{prefix}.entry")
        for b, rdb in enumerate(self.rdbs):
            yield from rdb.named_parameters(f"{prefix}.rdb{b}")
            if self.dwc is not None:
                for j, vec in enumerate(self.dwc[b]):
                    yield f"{prefix}.dwc{b}.{j}", vec


def wrdb_forward(x: Tensor, p: WrdbParams) -> Tensor:
    if not p.rdbs:
        raise ValueError("degenerate WRDB with B = 0")
    states = [p.entry(x)]
    for b, rdb in enumerate(p.rdbs):
        if p.dwc is None:
            terms = states
        else:
            terms = [ops.depthwise_conv1x1(s, w) for s, w in zip(states, p.dwc[b])]
        acc = terms[0]
        for t in terms[1:]:
            acc = ops.add(acc, t)
        states.append(rdb_forward(acc, rdb))
    return ops.add(x, states[-1])


# ---------------------------------------------------------------------------
# fusion nodes


@dataclass
class AsycaParams:
    integrate: Conv
    reduce: Conv
    expand: Conv
    reduction: int = 4

    @classmethod
    def init(cls, rng, channels, reduction=4, dtype=np.float32):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction ratio {reduction}")
        hidden = channels // reduction
        return cls(
            Conv.init(rng, 2 * channels, channels, 1, dtype=dtype),
            Conv.init(rng, channels, hidden, 1, dtype=dtype),
            Conv.init(rng, hidden, 2 * channels, 1, dtype=dtype),
            reduction,
        )

    def named_parameters(self, prefix: str):
        yield from self.integrate.named_parameters(f"{prefix}.integrate")
        yield from self.reduce.named_parameters(f"{prefix}.reduce")
        yield from self.expand.named_parameters(f"{prefix}.expand")


def asyca_attention(x1: Tensor, x2: Tensor, p: AsycaParams) -> Tensor:
    """Return the N x 2C x 1 x 1 attention banks (alpha, 1 - alpha)."""
    if x1.shape != x2.shape:
        raise ShapeError(f"AsyCA inputs differ in shape: {x1.shape} vs {x2.shape}")
    c = x1.shape[1]
    u = p.integrate(ops.concat_channels(x1, x2))
    z = ops.global_avg_pool(u)
    s = p.expand(ops.relu(p.reduce(z)))
    return ops.pair_softmax(ops.slice_channels(s, 0, c), ops.slice_channels(s, c, 2 * c))


def asyca_forward(x1: Tensor, x2: Tensor, p: AsycaParams) -> Tensor:
    record("asyca")
    c = x1.shape[1]
    att = asyca_attention(x1, x2, p)
    alpha = ops.slice_channels(att, 0, c)
    beta = ops.slice_channels(att, c, 2 * c)
    return ops.add(ops.channel_mul(x1, alpha), ops.channel_mul(x2, beta))


@dataclass
class SumFusion:
    def named_parameters(self, prefix: str):
        return iter(())


@dataclass
class ConcatFusion:
    reduce: Conv

    @classmethod
    def init(cls, rng, channels, dtype=np.float32):
        return cls(Conv.init(rng, 2 * channels, channels, 1, dtype=dtype))

    def named_parameters(self, prefix: str):
        yield from self.reduce.named_parameters(f"{prefix}.reduce")


@dataclass
class SeFusion:
    """Concatenate, recalibrate the 2C channels with an SE unit, project to C."""

    squeeze: Conv
    excite: Conv
    project: Conv

    @classmethod
    def init(cls, rng, channels, reduction=4, dtype=np.float32):
        c2 = 2 * channels
        return cls(
            Conv.init(rng, c2, c2 // reduction, 1, dtype=dtype),
            Conv.init(rng, c2 // reduction, c2, 1, dtype=dtype),
            Conv.init(rng, c2, channels, 1, dtype=dtype),
        )

    def named_parameters(self, prefix: str):
        yield from self.squeeze.named_parameters(f"{prefix}.squeeze")
        yield from self.excite.named_parameters(f"{prefix}.excite")
        yield from self.project.named_parameters(f"{prefix}.project")


def init_fusion(mode: str, rng, channels: int, reduction: int = 4, dtype=np.float32):
    if mode == "asyca":
        return AsycaParams.init(rng, channels, reduction, dtype=dtype)
    if mode == "sum":
        return SumFusion()
    if mode == "concat":
        return ConcatFusion.init(rng, channels, dtype=dtype)
    if mode == "se":
        return SeFusion.init(rng, channels, reduction, dtype=dtype)
    raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")


def fuse(x1: Tensor, x2: Tensor, p) -> Tensor:
    """Apply the interleaved-node fusion described by the params type."""
    if x1.shape != x2.shape:
        raise ShapeError(f"fusion inputs differ in shape: {x1.shape} vs {x2.shape}")
    if isinstance(p, AsycaParams):
        return asyca_forward(x1, x2, p)
    record("fusion")
    if isinstance(p, SumFusion):
        return ops.add(x1, x2)
    if isinstance(p, ConcatFusion):
        return p.reduce(ops.concat_channels(x1, x2))
    if isinstance(p, SeFusion):
        cat = ops.concat_channels(x1, x2)
        w = ops.sigmoid(p.excite(ops.relu(p.squeeze(ops.global_avg_pool(cat)))))
        return p.project(ops.channel_mul(cat, w))
    raise TypeError(f"unsupported fusion params {type(p).__name__}")


def count_rdb_params(channels: int, growth: int, n_layers: int, local_fusion: bool = False) -> int:
    """Closed-form trainable-scalar count of one RDB."""
    c, g, k = channels, growth, n_layers
    if local_fusion:
        dense = sum((c + (i - 1) * g) * g * 9 + g for i in range(1, k + 1))
        return dense + (c + k * g) * c + c
    dense = sum((c + (i - 1) * g) * g * 9 + g for i in range(1, k))
    return dense + (c + (k - 1) * g) * c * 9 + c

