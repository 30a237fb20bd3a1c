"""Rectifier MLPs used as teacher and student."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .rng import Xoshiro256
from .tensor import Tensor


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError(f"need at least two positive widths, got {self.layer_widths}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.layer_widths, self.layer_widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes


OUTPUT_BIAS_STD = 1e-3


def init_mlp(spec: MlpSpec) -> list[Tensor]:
    """He-normal weights (variance 2/fan_in), drawn from the seed.

    Hidden biases start at zero. The output bias gets a tiny random offset so
    an input that switches off every hidden unit still yields a non-zero logit
    row, which the normalised contrastive losses require.
    """
    rng = Xoshiro256(spec.seed)
    params = []
    pairs = list(zip(spec.layer_widths, spec.layer_widths[1:]))
    for k, (fan_in, fan_out) in enumerate(pairs):
        w = rng.normal(fan_in * fan_out).reshape(fan_in, fan_out) * np.sqrt(2.0 / fan_in)
        params.append(Tensor(w, requires_grad=True))
        if k == len(pairs) - 1:
            b = rng.normal(fan_out) * OUTPUT_BIAS_STD
        else:
            b = np.zeros(fan_out)
        params.append(Tensor(b, requires_grad=True))
    return params


def mlp_forward(params: Sequence[Tensor], x: Tensor) -> Tensor:
    if len(params) % 2 or not params:
        raise ValueError("params must alternate weight, bias")
    if x.shape[1] != params[0].shape[0]:
        raise ValueError(f"input dim {x.shape[1]} != network input width {params[0].shape[0]}")
    h = x
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = h @ params[2 * k] + params[2 * k + 1]
        if k < n_layers - 1:
            h = tn.relu(h)
    return h


def predict_logits(params: Sequence[Tensor], x: np.ndarray) -> np.ndarray:
    """Forward pass on plain arrays, nothing recorded."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = h @ params[2 * k].values + params[2 * k + 1].values
        if k < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def frozen(params: Sequence[Tensor]) -> list[Tensor]:
    return [Tensor(p.values) for p in params]
