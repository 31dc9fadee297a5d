"""lipfast.layers :: Provide the ABC shared by every network layer."""

from __future__ import annotations

import abc
import typing as t

import numpy as np

from lipfast.tensor import Parameter, Tensor


class Module(abc.ABC):
    """Provide ABC for lipfast layers.

    A module is a parameter record: its attributes are `Parameter`s, child
    `Module`s, lists of child modules, or plain configuration values. The
    functional operations in `lipfast.layers.*` take a module as their
    parameter argument; calling the module runs `forward`.

    Parameters are discovered by walking attributes in assignment order, so
    the order (and therefore checkpoint layout) is fixed by `__init__`.
    """

    def named_parameters(
        self, prefix: str = ""
    ) -> t.Iterator[tuple[str, Parameter]]:
        """Yield `(dotted name, parameter)` pairs, each parameter once."""
        seen: set[int] = set()
        for name, param in self._walk(prefix):
            if id(param) not in seen:
                seen.add(id(param))
                yield name, param

    def _walk(self, prefix: str) -> t.Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value._walk(f"{name}.")
            elif isinstance(value, (list, tuple)):
                yield from _walk_sequence(value, f"{name}.")

    def parameters(self) -> list[Parameter]:
        """Return every parameter in registration order."""
        return [param for _, param in self.named_parameters()]

    def zero_grad(self) -> None:
        """Forget gradients left by the previous backward pass."""
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return copies of the parameter values keyed by name."""
        return {
            name: param.data.copy() for name, param in self.named_parameters()
        }

    @abc.abstractmethod
    def forward(self, *args: t.Any, **kwargs: t.Any) -> Tensor:
        """Run the layer."""

    def __call__(self, *args: t.Any, **kwargs: t.Any) -> Tensor:
        """Run `forward`."""
        return self.forward(*args, **kwargs)

    def __repr__(self) -> str:
        """Provide a compact human-readable representation of the layer."""
        attrs = ", ".join(
            f"{k}={v!r}"
            for k, v in vars(self).items()
            if isinstance(v, (int, float, str, tuple))
            and not k.startswith("_")
        )
        return f"{self.__class__.__name__}({attrs})"


def _walk_sequence(
    items: t.Sequence[t.Any], prefix: str
) -> t.Iterator[tuple[str, Parameter]]:
    for index, item in enumerate(items):
        name = f"{prefix}{index}"
        if isinstance(item, Parameter):
            yield name, item
        elif isinstance(item, Module):
            yield from item._walk(f"{name}.")
        elif isinstance(item, (list, tuple)):
            yield from _walk_sequence(item, f"{name}.")
