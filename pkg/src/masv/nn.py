"""Parameter containers and the standard layers the models are built from."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import StateError


class Module:
    """Base class: discovers parameters and submodules from attributes.

    Attribute order defines parameter order, which in turn fixes checkpoint
    layout and optimizer state order.
    """

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Module):
                yield from value.named_modules(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{i}")

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for path, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{path}.{name}" if path else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for name, value in mod._buffers.items():
                yield (f"{path}.{name}" if path else name), value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for path, mod in self.named_modules():
            for name in mod._buffers:
                buffers[f"buffer:{path}.{name}" if path else f"buffer:{name}"] = (mod, name)
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise StateError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise StateError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for key, (mod, name) in buffers.items():
            mod._buffers[name] = np.array(state[key], dtype=mod._buffers[name].dtype)

    def to(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, mod in self.named_modules():
            for name, b in mod._buffers.items():
                if np.issubdtype(b.dtype, np.floating):
                    mod._buffers[name] = b.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class PointwiseConv(Module):
    """Kernel-size-1 convolution over ``[B, C, T]`` (a linear map on channels)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        super().__init__()
        bound = 1.0 / np.sqrt(cin)
        self.weight = Parameter(_uniform(rng, (cout, cin), bound, dtype))
        self.bias = Parameter(_uniform(rng, (cout,), bound, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.channel_linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel_size: int, rng: np.random.Generator,
                 dilation: int = 1, padding: int | str = "same", bias: bool = True, dtype=np.float64):
        super().__init__()
        if padding == "same":
            padding = dilation * (kernel_size - 1) // 2
        self.dilation = dilation
        self.padding = padding
        bound = 1.0 / np.sqrt(cin * kernel_size)
        self.weight = Parameter(_uniform(rng, (cout, cin, kernel_size), bound, dtype))
        self.bias = Parameter(_uniform(rng, (cout,), bound, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, dilation=self.dilation, padding=self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        super().__init__()
        bound = 1.0 / np.sqrt(fin)
        self.weight = Parameter(_uniform(rng, (fout, fin), bound, dtype))
        self.bias = Parameter(_uniform(rng, (fout,), bound, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class InstanceNorm1d(Module):
    def __init__(self, channels: int, affine: bool = True, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype)) if affine else None
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.instance_norm_1d(x, self.weight, self.bias, eps=self.eps)


class BatchNorm1d(Module):
    """Batch norm with running statistics; eval before any update is an error."""

    def __init__(self, channels: int, affine: bool = True, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, dtype=dtype)) if affine else None
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if affine else None
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.register_buffer("num_batches_tracked", np.zeros(1, dtype=np.int64))

    def forward(self, x: Tensor) -> Tensor:
        if not self.training and self._buffers["num_batches_tracked"][0] == 0:
            raise StateError("BatchNorm1d used in eval mode before any running-statistics update")
        if self.training:
            self._buffers["num_batches_tracked"][0] += 1
        return ad.batch_norm_1d(
            x, self._buffers["running_mean"], self._buffers["running_var"],
            self.weight, self.bias, training=self.training, momentum=self.momentum, eps=self.eps,
        )
