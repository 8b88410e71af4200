"""Parameter containers shared by the model components."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from mcncl.numcore import TapeTensor, linear, parameter


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Affine:
    weight: TapeTensor
    bias: TapeTensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "Affine":
        return cls(parameter(uniform_fan_in(rng, (d_in, d_out), d_in)), parameter(np.zeros(d_out)))

    @classmethod
    def zeros(cls, d_in: int, d_out: int) -> "Affine":
        return cls(parameter(np.zeros((d_in, d_out))), parameter(np.zeros(d_out)))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> TapeTensor:
        return linear(x, self.weight, self.bias)


def named_parameters(obj, prefix: str = "") -> dict[str, TapeTensor]:
    """Flatten nested dataclasses / dicts / lists of TapeTensors into dotted names."""
    out: dict[str, TapeTensor] = {}

    def walk(node, path):
        if isinstance(node, TapeTensor):
            if node.trainable:
                node.name = path
                out[path] = node
        elif dataclasses.is_dataclass(node) and not isinstance(node, type):
            for f in dataclasses.fields(node):
                walk(getattr(node, f.name), f"{path}.{f.name}" if path else f.name)
        elif isinstance(node, dict):
            for k in sorted(node):
                walk(node[k], f"{path}.{k}" if path else str(k))
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{path}.{i}" if path else str(i))

    walk(obj, prefix)
    return out
