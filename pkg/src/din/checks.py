"""Gradient-check suites over every primitive op and the network composites.

Each case is a function `rng -> (f, inputs)` building double-precision
inputs; `run_suite` evaluates them with `gradcheck` and returns one row
per case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .blocks import AsycaParams, RdbParams, WrdbParams, asyca_forward, rdb_forward, wrdb_forward
from .gradcheck import gradcheck
from .model import ModelConfig, din_forward, imbf_forward, init_params
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _randomize(named, rng, scale=0.3):
    leaves = []
    for _, t in named:
        t.data[...] = rng.standard_normal(t.shape) * scale
        leaves.append(t)
    return leaves


def _primitives() -> dict[str, Case]:
    cases = {
        "conv2d_3x3": lambda r: (lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [_rand(r, 2, 3, 5, 5), _rand(r, 4, 3, 3, 3), _rand(r, 4)]),
        "conv2d_8x8_s4": lambda r: (lambda x, w, b: ops.conv2d(x, w, b, 4, 2), [_rand(r, 1, 2, 8, 8), _rand(r, 3, 2, 8, 8), _rand(r, 3)]),
        "conv2d_1x1": lambda r: (ops.conv2d, [_rand(r, 2, 3, 4, 4), _rand(r, 5, 3, 1, 1), _rand(r, 5)]),
        "depthwise_conv1x1": lambda r: (ops.depthwise_conv1x1, [_rand(r, 2, 3, 4, 4), _rand(r, 3)]),
        "leaky_relu": lambda r: (lambda x: ops.leaky_relu(x, 0.2), [_rand(r, 2, 3, 4, 4)]),
        "relu": lambda r: (ops.relu, [_rand(r, 2, 3, 4, 4)]),
        "sigmoid": lambda r: (ops.sigmoid, [_rand(r, 2, 3, 2, 2)]),
        "global_avg_pool": lambda r: (ops.global_avg_pool, [_rand(r, 2, 3, 4, 5)]),
        "concat_channels": lambda r: (ops.concat_channels, [_rand(r, 1, 2, 3, 3), _rand(r, 1, 3, 3, 3)]),
        "slice_channels": lambda r: (lambda x: ops.slice_channels(x, 1, 3), [_rand(r, 1, 4, 2, 2)]),
        "add": lambda r: (ops.add, [_rand(r, 1, 2, 3, 3), _rand(r, 1, 2, 3, 3)]),
        "sub": lambda r: (ops.sub, [_rand(r, 1, 2, 3, 3), _rand(r, 1, 2, 3, 3)]),
        "mul": lambda r: (ops.mul, [_rand(r, 1, 2, 3, 3), _rand(r, 1, 2, 3, 3)]),
        "scale": lambda r: (lambda x: ops.scale(x, -1.7), [_rand(r, 1, 2, 3, 3)]),
        "channel_mul": lambda r: (ops.channel_mul, [_rand(r, 2, 3, 3, 3), _rand(r, 2, 3, 1, 1)]),
        "pair_softmax": lambda r: (ops.pair_softmax, [_rand(r, 2, 4, 1, 1), _rand(r, 2, 4, 1, 1)]),
        "pixel_shuffle": lambda r: (lambda x: ops.pixel_shuffle(x, 2), [_rand(r, 1, 8, 3, 3)]),
        "pixel_unshuffle": lambda r: (lambda x: ops.pixel_unshuffle(x, 2), [_rand(r, 1, 2, 4, 6)]),
        "bicubic_up": lambda r: (lambda x: ops.bicubic_resize(x, 2), [_rand(r, 1, 2, 4, 5)]),
        "bicubic_down": lambda r: (lambda x: ops.bicubic_resize(x, 0.5), [_rand(r, 1, 1, 8, 6)]),
        "abs": lambda r: (ops.abs_, [_rand(r, 1, 2, 3, 3)]),
        "mean": lambda r: (ops.mean, [_rand(r, 1, 2, 3, 3)]),
        "sum": lambda r: (ops.sum_, [_rand(r, 1, 2, 3, 3)]),
    }
    return cases


# composites: C=8, G=4, K=2, B=2, r=4 on 1x8x6x6; full network on 1x3x8x8


def _rdb(r):
    p = RdbParams.init(r, 8, 4, 2, dtype=np.float64)
    x = _rand(r, 1, 8, 6, 6)
    return (lambda x, *_: rdb_forward(x, p)), [x] + _randomize(p.named_parameters("rdb"), r)


def _wrdb(r):
    p = WrdbParams.init(r, 8, 4, 2, 2, dtype=np.float64)
    x = _rand(r, 1, 8, 6, 6)
    return (lambda x, *_: wrdb_forward(x, p)), [x] + _randomize(p.named_parameters("wrdb"), r)


def _asyca(r):
    p = AsycaParams.init(r, 8, 4, dtype=np.float64)
    x1, x2 = _rand(r, 1, 8, 6, 6), _rand(r, 1, 8, 6, 6)
    return (lambda a, b, *_: asyca_forward(a, b, p)), [x1, x2] + _randomize(p.named_parameters("asyca"), r, 1.0)


TOY = ModelConfig(M=2, D=2, B=1, K=2, channels=8, growth=4, reduction=4, scale=2)


def _toy_params(r):
    params = init_params(TOY, seed=int(r.integers(1 << 31)), dtype=np.float64)
    return params, _randomize(params.named_parameters(), r, 0.2)


def _imbf(r):
    params, leaves = _toy_params(r)
    f0 = _rand(r, 1, 8, 6, 6)
    return (lambda f, *_: imbf_forward(f, params, TOY)), [f0] + leaves


def _din(r):
    params, leaves = _toy_params(r)
    x = Tensor(r.uniform(size=(1, 3, 8, 8)))
    return (lambda x, *_: din_forward(x, params, TOY)), [x] + leaves


PRIMITIVES: dict[str, Case] = _primitives()
COMPOSITES: dict[str, Case] = {"rdb": _rdb, "wrdb": _wrdb, "asyca": _asyca, "imbf": _imbf, "din": _din}


@dataclass
class CheckRow:
    name: str
    kind: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def run_suite(full: bool = False, seeds: int = 3, coords: int = 12) -> list[CheckRow]:
    """Primitives are always checked on every coordinate. Composites perturb
    `coords` random entries per tensor unless `full` is set."""
    rows = []
    for name, case in PRIMITIVES.items():
        worst = 0.0
        for seed in range(seeds):
            f, inputs = case(np.random.default_rng(seed))
            worst = max(worst, gradcheck(f, inputs, seed=seed))
        rows.append(CheckRow(name, "primitive", worst, PRIMITIVE_TOL))
    for name, case in COMPOSITES.items():
        f, inputs = case(np.random.default_rng(0))
        err = gradcheck(f, inputs, max_coords=None if full else coords)
        rows.append(CheckRow(name, "composite", err, COMPOSITE_TOL))
    return rows
