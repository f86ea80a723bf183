"""Parameter containers built on numcore tensors."""

import logging
from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from hyperpoint.exceptions import CheckpointError
from hyperpoint.numcore import Tensor, add, matmul

logger = logging.getLogger(__name__)


class Module:
    """Base class for anything that owns named parameters or sub-modules.

    Attributes holding a requires-grad ``Tensor`` or another ``Module`` are
    registered automatically; names follow the attribute path, dot separated.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: Optional["Module"]) -> None:
        """Register a sub-module under an explicit name (used for indexed children)."""
        if module is not None:
            self._modules[name] = module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """Yield ``(dotted_name, tensor)`` for every parameter, in registration order."""
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> Dict[str, Tensor]:
        """Ordered mapping of every parameter."""
        return OrderedDict(self.named_parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copy of all parameter values."""
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Overwrite parameter values; names and shapes must match exactly."""
        params = self.parameters()
        missing = [n for n in params if n not in state]
        if missing:
            raise CheckpointError(f"Checkpoint is missing parameters: {missing[:5]}")
        for name, param in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(
                    f"Parameter {name} has shape {param.shape}, checkpoint has {value.shape}")
            value = value.copy()
            value.flags.writeable = False
            param.data = value

    def num_parameters(self) -> int:
        """Total scalar parameter count."""
        return sum(p.size for _, p in self.named_parameters())


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> Tensor:
    """He-uniform initialisation for a ReLU network."""
    bound = np.sqrt(6.0 / max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    """Affine map ``x @ W + b`` applied over the last axis."""

    def __init__(self, in_width: int, out_width: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_width = in_width
        self.out_width = out_width
        self.weight = uniform_init(rng, in_width, (in_width, out_width))
        self.bias = Tensor(np.zeros(out_width), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y

    def set_identity(self) -> None:
        """Set the weight to the identity (square maps only) and zero the bias."""
        if self.in_width != self.out_width:
            raise ValueError("identity requires a square map")
        self.weight.data = np.eye(self.in_width)
        if self.bias is not None:
            self.bias.data = np.zeros(self.out_width)
