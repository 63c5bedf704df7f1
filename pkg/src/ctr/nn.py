"""Parameter bookkeeping, small layer objects and the checkpoint file format."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

CKPT_HEADER = b"ctr-ckpt v1\n"


class ParameterSet:
    """Ordered, uniquely named collection of parameters for one model."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, data) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def uniform(self, name: str, shape, bound: float) -> Parameter:
        return self.create(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Parameter:
        return self.create(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self.create(name, np.ones(shape))

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def count(self, prefix: str = "") -> int:
        return sum(p.data.size for n, p in self._params.items() if n.startswith(prefix))

    def nbytes(self, prefix: str = "") -> int:
        return sum(p.data.nbytes for n, p in self._params.items() if n.startswith(prefix))

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in self._params.items():
            if state[n].shape != p.shape:
                raise ad.ShapeError(f"load {n}", p.shape, state[n].shape)
            p.data = np.ascontiguousarray(state[n], dtype=p.data.dtype)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None


class Linear:
    def __init__(self, params: ParameterSet, name: str, d_in: int, d_out: int,
                 bias: bool = True, init_scale: float = 1.0):
        bound = init_scale / math.sqrt(d_in)
        self.weight = params.uniform(f"{name}.weight", (d_in, d_out), bound)
        self.bias = params.zeros(f"{name}.bias", (d_out,)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.ShapeError("linear", x.shape, self.weight.shape)
        return ad.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, params: ParameterSet, name: str, dim: int, eps: float = 1e-5):
        self.gamma = params.ones(f"{name}.gamma", (dim,))
        self.beta = params.zeros(f"{name}.beta", (dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, self.eps)


class MLP:
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, params: ParameterSet, name: str, dims: list[int],
                 last_init_scale: float = 1.0):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            scale = last_init_scale if i == len(dims) - 2 else 1.0
            self.layers.append(Linear(params, f"{name}.{i}", a, b, init_scale=scale))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


# -- checkpoint io -------------------------------------------------------

def save_checkpoint(path, state: dict[str, np.ndarray] | ParameterSet):
    """Write ``ctr-ckpt v1``: per parameter a ``name dims...`` line then LE float32 payload."""
    if isinstance(state, ParameterSet):
        state = state.state()
    with open(path, "wb") as fh:
        fh.write(CKPT_HEADER)
        for name, arr in state.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"parameter name may not contain whitespace: {name!r}")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {dims}".rstrip().encode() + b"\n")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_HEADER):
        raise ValueError(f"{path}: not a ctr-ckpt v1 file")
    pos = len(CKPT_HEADER)
    out: dict[str, np.ndarray] = {}
    while pos < len(raw):
        end = raw.index(b"\n", pos)
        fields = raw[pos:end].decode().split()
        name, shape = fields[0], tuple(int(d) for d in fields[1:])
        pos = end + 1
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return out

