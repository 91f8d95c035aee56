"""Models: parameterised forward functions with replaceable input/output layers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mlenv.engine import ACTIVATIONS, ShapeError, Tensor, activation, linear


@dataclass(eq=False)
class Layer:
    weight: Tensor
    bias: Tensor

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def glorot(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "Layer":
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        return cls(
            Tensor(rng.uniform(-limit, limit, size=(in_dim, out_dim)), requires_grad=True),
            Tensor(np.zeros(out_dim), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BaseModel:
    """A chain ``input -> hidden... -> output`` of affine layers.

    The activation follows every layer except the output, so the model emits
    raw logits. ``_input`` and ``_output`` may be swapped out by a method via
    `replace_input_layer` / `replace_output_layer`.
    """

    name = "base"

    def __init__(self, _input: Layer, hidden: list[Layer], _output: Layer, activation: str, seed: int):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; valid names: {', '.join(sorted(ACTIVATIONS))}")
        self._input = _input
        self.hidden = hidden
        self._output = _output
        self.activation = activation
        # draws for re-initialised layers continue from this stream
        self._rng = np.random.default_rng([seed, 1])
        self._check_chain()

    @classmethod
    def add_argparse_args(cls, parser) -> None:
        pass

    @property
    def layers(self) -> list[Layer]:
        return [self._input, *self.hidden, self._output]

    @property
    def input_dim(self) -> int:
        return self._input.in_dim

    @property
    def output_dim(self) -> int:
        return self._output.out_dim

    def _check_chain(self) -> None:
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer chain broken: {prev.weight.shape} feeds {nxt.weight.shape}")

    def forward(self, inputs: Tensor) -> Tensor:
        if inputs.ndim != 2 or inputs.shape[1] != self.input_dim:
            raise ShapeError(f"model expects [B, {self.input_dim}] inputs, got {inputs.shape}")
        h = inputs
        for layer in self.layers[:-1]:
            h = activation(self.activation, layer(h))
        return self._output(h)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.weight", layer.weight), (f"layer{i}.bias", layer.bias)]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def replace_input_layer(self, new_in_dim: int) -> None:
        if new_in_dim < 1:
            raise ValueError(f"input dimension must be >= 1, got {new_in_dim}")
        self._input = Layer.glorot(new_in_dim, self._input.out_dim, self._rng)

    def replace_output_layer(self, new_out_dim: int) -> None:
        if new_out_dim < 1:
            raise ValueError(f"output dimension must be >= 1, got {new_out_dim}")
        self._output = Layer.glorot(self._output.in_dim, new_out_dim, self._rng)


class FCModel(BaseModel):
    """Fully connected MLP; ``depth`` counts the affine layers before the output layer."""

    name = "fc"

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden_dim: int = 32,
        depth: int = 3,
        activation: str = "relu",
        seed: int = 0,
    ):
        for label, value in (("input_dim", input_dim), ("output_dim", output_dim),
                             ("hidden_dim", hidden_dim), ("depth", depth)):
            if value < 1:
                raise ValueError(f"{label} must be >= 1, got {value}")
        rng = np.random.default_rng([seed, 0])
        first = Layer.glorot(input_dim, hidden_dim, rng)
        hidden = [Layer.glorot(hidden_dim, hidden_dim, rng) for _ in range(depth - 1)]
        last = Layer.glorot(hidden_dim, output_dim, rng)
        super().__init__(first, hidden, last, activation, seed)
        self.hidden_dim = hidden_dim
        self.depth = depth

    @classmethod
    def add_argparse_args(cls, parser) -> None:
        parser.add_argument("--model_hidden_dim", type=int, default=32, help="width of every hidden layer")
        parser.add_argument("--model_depth", type=int, default=3, help="affine layers before the output layer")
        parser.add_argument(
            "--model_activation", default="relu", choices=sorted(ACTIVATIONS), help="hidden nonlinearity"
        )


def build_fc(input_dim, output_dim, hidden_dim=32, depth=3, activation="relu", seed=0) -> FCModel:
    return FCModel(input_dim, output_dim, hidden_dim, depth, activation, seed)

