"""Small layer library on top of the functional ops."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


class Module:
    """Container that discovers parameters through its attributes.

    Attributes holding Tensors with ``requires_grad`` at construction time,
    sub-Modules, and lists of Modules are traversed in attribute order, which
    gives stable, human-readable parameter names such as ``down.0.conv1.weight``.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad or getattr(value, "name", None) == "param":
                    out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters()
        missing = [prefix + k for k in params if prefix + k not in state]
        if missing:
            raise KeyError(f"missing tensors: {', '.join(missing)}")
        for k, p in params.items():
            arr = state[prefix + k]
            if arr.shape != p.shape:
                raise ValueError(f"{prefix + k}: stored shape {arr.shape} != expected {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _mark(t: Tensor) -> Tensor:
    # parameters stay discoverable after being frozen
    t.name = "param"
    return t


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, rng: np.random.Generator | None = None,
                 stride: int = 1, zero_init: bool = False, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        fan_in = cin * k * k
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        self.weight = _mark(param(w))
        self.bias = _mark(param(np.zeros(cout))) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None = None, zero_init: bool = False):
        rng = rng or np.random.default_rng(0)
        w = np.zeros((fout, fin)) if zero_init else rng.normal(0.0, np.sqrt(1.0 / fin), size=(fout, fin))
        self.weight = _mark(param(w))
        self.bias = _mark(param(np.zeros(fout)))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 4):
        self.groups = groups
        self.gamma = _mark(param(np.ones(channels)))
        self.beta = _mark(param(np.zeros(channels)))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta)
