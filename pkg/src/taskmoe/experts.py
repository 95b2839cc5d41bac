"""Expert pool: E affine transforms sharing one input/output geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .linalg import Affine, FlopCounter, init_affine, relu

__all__ = ["ExpertPool", "init_expert_pool"]

_NONLINEARITIES = ("identity", "relu")


def apply_nonlinearity(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "relu":
        return relu(x)
    raise ConfigError(f"unknown nonlinearity '{name}', expected one of {_NONLINEARITIES}")


@dataclass
class ExpertPool:
    """E affine maps d_in -> d_out with an optional shared elementwise nonlinearity.

    The default identity nonlinearity keeps equivalence tests exact; training
    configurations typically switch to the rectifier.
    """

    layers: list[Affine]
    nonlinearity: str = "identity"

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("expert pool needs at least one expert")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ConfigError(
                f"unknown nonlinearity '{self.nonlinearity}', expected one of {_NONLINEARITIES}"
            )
        d_in, d_out = self.layers[0].d_in, self.layers[0].d_out
        for i, layer in enumerate(self.layers):
            if layer.d_in != d_in or layer.d_out != d_out:
                raise ShapeError(
                    f"expert {i} maps {layer.d_in}->{layer.d_out}, expected {d_in}->{d_out}"
                )

    @property
    def num_experts(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[0].d_out

    def activate(self, pre: np.ndarray) -> np.ndarray:
        return apply_nonlinearity(self.nonlinearity, pre)

    def apply_all(
        self, hidden: np.ndarray, counter: FlopCounter | None = None
    ) -> np.ndarray:
        """Dense path: run every expert on every instance, output (B, E, d_out)."""
        hidden = np.asarray(hidden, dtype=np.float64)
        out = np.empty((hidden.shape[0], self.num_experts, self.d_out))
        for e, layer in enumerate(self.layers):
            out[:, e, :] = self.activate(layer.apply(hidden, counter))
        return out


def init_expert_pool(
    rng: np.random.Generator,
    num_experts: int,
    d_in: int,
    d_out: int,
    nonlinearity: str = "identity",
) -> ExpertPool:
    layers = [init_affine(rng, d_out, d_in) for _ in range(num_experts)]
    return ExpertPool(layers=layers, nonlinearity=nonlinearity)
