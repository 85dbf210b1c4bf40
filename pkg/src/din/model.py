"""Interleaved multi-branch network: assembly, forward pass and accounting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np

from . import ops
from .blocks import (
    FUSION_MODES,
    AsycaParams,
    ConcatFusion,
    Conv,
    SeFusion,
    SumFusion,
    WrdbParams,
    fuse,
    init_fusion,
    wrdb_forward,
)
from .tensor import NumericalError, ShapeError, Tensor, no_grad

TASKS = ("sr", "derain", "deblur", "dehaze")
SR_SCALES = (1, 2, 3, 4, 8)
DOWNSAMPLED_TASKS = ("deblur", "dehaze")
INTERNAL_SCALE = 4


@dataclass
class ModelConfig:
    M: int = 4
    D: int = 5
    B: int = 3
    K: int = 6
    growth: int = 32
    channels: int = 64
    reduction: int = 4
    gamma: float = 0.1
    task: str = "sr"
    scale: int = 2
    fusion: str = "asyca"
    use_dwc: bool = True
    local_fusion: bool = False

    def __post_init__(self):
        for name in ("M", "D", "B", "K", "growth", "channels", "reduction"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.channels % self.reduction:
            raise ValueError(f"channels {self.channels} not divisible by reduction {self.reduction}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion {self.fusion!r}; choose from {FUSION_MODES}")
        if self.task == "sr" and self.scale not in SR_SCALES:
            raise ValueError(f"sr scale must be one of {SR_SCALES}, got {self.scale}")
        if self.task == "derain" and self.scale != 1:
            raise ValueError("derain runs at scale 1")
        if self.task in DOWNSAMPLED_TASKS and self.scale != INTERNAL_SCALE:
            raise ValueError(f"{self.task} uses a fixed internal scale of {INTERNAL_SCALE}")

    @classmethod
    def for_task(cls, task: str, **kw) -> "ModelConfig":
        default_scale = {"sr": 2, "derain": 1, "deblur": INTERNAL_SCALE, "dehaze": INTERNAL_SCALE}[task]
        kw.setdefault("scale", default_scale)
        return cls(task=task, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model keys: {sorted(unknown)}")
        d = dict(d)
        if "task" in d and "scale" not in d:
            return cls.for_task(d.pop("task"), **d)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def upsample_factors(scale: int) -> list[int]:
    """Sub-pixel stages used to reach `scale`: x3 in one stage, powers of two in x2 stages."""
    if scale == 1:
        return []
    if scale == 3:
        return [3]
    n = int(round(math.log2(scale)))
    if 2**n != scale:
        raise ValueError(f"unsupported upscaling factor {scale}")
    return [2] * n


@dataclass
class DinParams:
    head: list[Conv]
    branches: list[list[WrdbParams]]
    fusions: dict[tuple[int, int], object]
    gff1: Conv
    gff2: Conv
    tail_up: list[Conv]
    tail_factors: list[int]
    tail_out: Conv

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, conv in enumerate(self.head):
            yield from conv.named_parameters(f"head.conv{i}")
        for m, branch in enumerate(self.branches, start=1):
            for d, wrdb in enumerate(branch, start=1):
                yield from wrdb.named_parameters(f"branch{m}.block{d}")
        for (m, d), fp in sorted(self.fusions.items()):
            yield from fp.named_parameters(f"fuse{m}.{d}")
        yield from self.gff1.named_parameters("gff1")
        yield from self.gff2.named_parameters("gff2")
        for i, conv in enumerate(self.tail_up):
            yield from conv.named_parameters(f"tail.up{i}")
        yield from self.tail_out.named_parameters("tail.out")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> DinParams:
    """Deterministically initialise every trainable tensor for `cfg`."""
    rng = np.random.default_rng(seed)
    c = cfg.channels
    head = [Conv.init(rng, 3, c, 3, dtype=dtype)]
    if cfg.task in DOWNSAMPLED_TASKS:
        head.append(Conv.init(rng, c, c, 8, stride=4, pad=2, dtype=dtype))
    branches = [
        [
            WrdbParams.init(rng, c, cfg.growth, cfg.K, cfg.B, gamma=cfg.gamma,
                            local_fusion=cfg.local_fusion, use_dwc=cfg.use_dwc, dtype=dtype)
            for _ in range(cfg.D)
        ]
        for _ in range(cfg.M)
    ]
    fusions = {
        (m, d): init_fusion(cfg.fusion, rng, c, cfg.reduction, dtype=dtype)
        for m in range(2, cfg.M + 1)
        for d in range(1, cfg.D + 1)
    }
    gff1 = Conv.init(rng, cfg.M * c, c, 1, dtype=dtype)
    gff2 = Conv.init(rng, cfg.D * c, c, 1, dtype=dtype)
    factors = upsample_factors(cfg.scale)
    tail_up = [Conv.init(rng, c, c * r * r, 3, dtype=dtype) for r in factors]
    tail_out = Conv.init(rng, c, 3, 3, gain=0.1, dtype=dtype)
    return DinParams(head, branches, fusions, gff1, gff2, tail_up, factors, tail_out)


def count_params(params: DinParams) -> int:
    return int(sum(t.size for t in params.parameters()))


# ---------------------------------------------------------------------------
# forward


def imbf_forward(f0: Tensor, params: DinParams, cfg: ModelConfig) -> Tensor:
    M, D = len(params.branches), len(params.branches[0])
    if f0.shape[1] != cfg.channels:
        raise ShapeError(f"IMBF expects {cfg.channels} channels, got {f0.shape}")
    if M == 1 and params.fusions:
        raise ValueError("single-branch network must not carry fusion nodes")
    if len(params.fusions) != (M - 1) * D:
        raise ValueError(f"expected {(M - 1) * D} fusion nodes, found {len(params.fusions)}")

    feats = []  # feats[m][d] = output of WRDB d in branch m (0-based)
    prev = f0
    branch = []
    for d in range(D):
        prev = wrdb_forward(prev, params.branches[0][d])
        branch.append(prev)
    feats.append(branch)
    for m in range(1, M):
        above = feats[m - 1]
        branch = []
        for d in range(D):
            if d == 0:
                x = fuse(above[D - 1], above[0], params.fusions[(m + 1, 1)])
            else:
                x = fuse(above[d], branch[d - 1], params.fusions[(m + 1, d + 1)])
            branch.append(wrdb_forward(x, params.branches[m][d]))
        feats.append(branch)

    g1 = params.gff1(ops.concat_channels(*[b[D - 1] for b in feats]))
    g2 = params.gff2(ops.concat_channels(*feats[-1][: D - 1], f0))
    return ops.add(g1, g2)


def residual_base(lq: Tensor, cfg: ModelConfig) -> Tensor:
    if cfg.task == "sr":
        return lq if cfg.scale == 1 else ops.bicubic_resize(lq, cfg.scale)
    return lq


def din_forward(lq: Tensor, params: DinParams, cfg: ModelConfig) -> Tensor:
    """Restore an N x 3 x H x W batch in [0, 1]."""
    if lq.data.ndim != 4 or lq.shape[1] != 3:
        raise ShapeError(f"expected an N x 3 x H x W image batch, got {lq.shape}")
    n, _, h, w = lq.shape
    if cfg.task in DOWNSAMPLED_TASKS and (h % INTERNAL_SCALE or w % INTERNAL_SCALE):
        raise ShapeError(
            f"{cfg.task} input {h}x{w} must be divisible by {INTERNAL_SCALE}; "
            "use din.model.reflect_pad_to_multiple first"
        )
    f0 = lq
    for conv in params.head:
        f0 = conv(f0)
    x = imbf_forward(f0, params, cfg)
    for conv, r in zip(params.tail_up, params.tail_factors):
        x = ops.pixel_shuffle(conv(x), r)
    out = ops.add(params.tail_out(x), residual_base(lq, cfg))
    expect = (h * cfg.scale, w * cfg.scale) if cfg.task == "sr" else (h, w)
    if out.shape[2:] != expect:
        raise RuntimeError(f"internal error: output {out.shape} does not match expected spatial size {expect}")
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite values in network output")
    return out


def reflect_pad_to_multiple(x: Tensor, multiple: int = INTERNAL_SCALE) -> tuple[Tensor, tuple[int, int]]:
    """Reflect-pad bottom/right so H and W divide `multiple`; returns the pad amounts."""
    h, w = x.shape[2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (0, 0)
    return Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")), (ph, pw)


# ---------------------------------------------------------------------------
# accounting


def _layer_table(cfg: ModelConfig, h: int, w: int):
    """Yield (kind, cin, cout, k, hout, wout) for every conv / depth-wise layer."""
    c, g, K = cfg.channels, cfg.growth, cfg.K
    yield ("conv", 3, c, 3, h, w)
    fh, fw = h, w
    if cfg.task in DOWNSAMPLED_TASKS:
        fh, fw = h // INTERNAL_SCALE, w // INTERNAL_SCALE
        yield ("conv", c, c, 8, fh, fw)
    for _ in range(cfg.M * cfg.D):
        yield ("conv", c, c, 3, fh, fw)
        for b in range(cfg.B):
            if cfg.use_dwc:
                for _ in range(b + 1):
                    yield ("dw", c, c, 1, fh, fw)
            for k in range(1, K + 1):
                last = k == K and not cfg.local_fusion
                yield ("conv", c + (k - 1) * g, c if last else g, 3, fh, fw)
            if cfg.local_fusion:
                yield ("conv", c + K * g, c, 1, fh, fw)
    for _ in range((cfg.M - 1) * cfg.D):
        if cfg.fusion == "asyca":
            yield ("conv", 2 * c, c, 1, fh, fw)
            yield ("conv", c, c // cfg.reduction, 1, 1, 1)
            yield ("conv", c // cfg.reduction, 2 * c, 1, 1, 1)
        elif cfg.fusion == "concat":
            yield ("conv", 2 * c, c, 1, fh, fw)
        elif cfg.fusion == "se":
            yield ("conv", 2 * c, 2 * c // cfg.reduction, 1, 1, 1)
            yield ("conv", 2 * c // cfg.reduction, 2 * c, 1, 1, 1)
            yield ("conv", 2 * c, c, 1, fh, fw)
    yield ("conv", cfg.M * c, c, 1, fh, fw)
    yield ("conv", cfg.D * c, c, 1, fh, fw)
    th, tw = fh, fw
    for r in upsample_factors(cfg.scale):
        yield ("conv", c, c * r * r, 3, th, tw)
        th, tw = th * r, tw * r
    yield ("conv", c, 3, 3, th, tw)


def count_mult_adds(cfg: ModelConfig, input_h: int, input_w: int) -> int:
    """Multiply-accumulate count of one forward pass on an input_h x input_w image.

    Convs contribute Cout*Cin*k^2*Hout*Wout, depth-wise 1x1 layers C*H*W.
    """
    if input_h < 1 or input_w < 1:
        raise ValueError("input dims must be positive")
    total = 0
    for kind, cin, cout, k, ho, wo in _layer_table(cfg, input_h, input_w):
        if kind == "dw":
            total += ops.depthwise_mult_adds(cin, ho, wo)
        else:
            total += ops.conv2d_mult_adds(cin, cout, k, ho, wo)
    return total


# ---------------------------------------------------------------------------
# self-ensemble


def dihedral(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Optional horizontal flip followed by k quarter turns over the last two axes."""
    if flip:
        x = x[..., ::-1]
    return np.rot90(x, k, axes=(-2, -1))


def dihedral_inverse(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    x = np.rot90(x, -k, axes=(-2, -1))
    if flip:
        x = x[..., ::-1]
    return x


DIHEDRAL_GROUP = [(k, flip) for flip in (False, True) for k in range(4)]


def self_ensemble(forward: Callable[[Tensor], Tensor], lq: Tensor) -> Tensor:
    """Average `forward` over the 8 flips/rotations of `lq`, each mapped back."""
    outs = []
    with no_grad():
        for k, flip in DIHEDRAL_GROUP:
            y = forward(Tensor(np.ascontiguousarray(dihedral(lq.data, k, flip))))
            outs.append(dihedral_inverse(y.data, k, flip))
    # balanced pairwise sum keeps the mean of identical predictions bit-exact
    while len(outs) > 1:
        outs = [outs[i] + outs[i + 1] for i in range(0, len(outs), 2)]
    return Tensor(np.ascontiguousarray(outs[0] / len(DIHEDRAL_GROUP)))


def make_forward(params: DinParams, cfg: ModelConfig) -> Callable[[Tensor], Tensor]:
    return lambda lq: din_forward(lq, params, cfg)


__all__ = [
    "ModelConfig",
    "DinParams",
    "TASKS",
    "SR_SCALES",
    "init_params",
    "count_params",
    "imbf_forward",
    "din_forward",
    "residual_base",
    "reflect_pad_to_multiple",
    "count_mult_adds",
    "self_ensemble",
    "dihedral",
    "dihedral_inverse",
    "DIHEDRAL_GROUP",
    "make_forward",
    "upsample_factors",
    "AsycaParams",
    "SumFusion",
    "ConcatFusion",
    "SeFusion",
]
