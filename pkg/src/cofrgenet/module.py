"""Parameter containers shared by the ladder and block layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor


class Parameter(Tensor):
    """Trainable tensor tagged with its schedule depth.

    ``depth`` 0 marks the linear path (updated from the first iteration);
    ``depth`` k >= 1 marks ladder rows feeding partial denominator ``a_k``.
    ``mask``, when given, fixes the entries that may ever be non-zero.
    """

    def __init__(self, data, depth: int = 0, decay: bool = False, mask: np.ndarray | None = None):
        super().__init__(np.array(data), requires_grad=True)
        self.depth = depth
        self.decay = decay
        self.mask = mask
        if mask is not None:
            self.data *= mask

    @property
    def n_trainable(self) -> int:
        return int(self.mask.sum()) if self.mask is not None else self.data.size


class Module:
    """Walks attributes to find parameters, trackers and sub-modules."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_trackers(self, prefix: str = ""):
        from .ladders import RangeTracker

        for name, value in vars(self).items():
            if isinstance(value, RangeTracker):
                yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_trackers(f"{prefix}{name}.")

    def set_range_mode(self, mode: str) -> None:
        for _, tracker in self.named_trackers():
            tracker.mode = mode

    def n_parameters(self) -> int:
        return sum(p.n_trainable for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self
