"""
Network Building Blocks

Weight containers and forward passes for the small networks the engine,
breadth baseline and classifier heads are made of.

Features:
- Feedforward stacks (affine -> nonlinearity -> affine), configurable depth
- Learned-affine layer normalisation
- LSTM-style gated recurrent cell (input / forget / candidate / output)
- Deterministic initialisation from a numpy Generator
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.tensor import (
    DimensionError,
    Tensor,
    add,
    layernorm,
    matvec,
    mul,
    relu,
    sigmoid,
    slice_vector,
    tanh,
)

logger = logging.getLogger(__name__)


class Activation(str, Enum):
    """Nonlinearity applied between feedforward layers."""
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


ACTIVATIONS: Dict[Activation, Callable[[Tensor], Tensor]] = {
    Activation.TANH: tanh,
    Activation.RELU: relu,
    Activation.IDENTITY: lambda x: x,
}


def _scaled_normal(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols)), requires_grad=True)


# ============================ FEEDFORWARD ============================

@dataclass
class FFNWeights:
    """
    Weights of a feedforward stack.

    ``weights[l]`` has shape ``(out_l, in_l)``. The activation is applied after
    every layer except the last.
    """
    weights: List[Tensor]
    biases: List[Tensor]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionError("FFN needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if len(w.shape) != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"FFN layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"FFN layer {i} expects width {w.shape[1]}, previous layer emits {self.weights[i - 1].shape[0]}"
                )
        self.activation = Activation(self.activation)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: Activation = Activation.TANH,
    ) -> "FFNWeights":
        """Random weights scaled by ``1/sqrt(fan_in)``, zero biases. ``sizes`` lists widths input-first."""
        if len(sizes) < 2:
            raise DimensionError("FFN sizes need an input and an output width")
        weights = [_scaled_normal(rng, sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        biases = [Tensor(np.zeros(sizes[i + 1]), requires_grad=True) for i in range(len(sizes) - 1)]
        return cls(weights, biases, activation)

    @classmethod
    def zeros(cls, sizes: Sequence[int], activation: Activation = Activation.TANH) -> "FFNWeights":
        weights = [Tensor(np.zeros((sizes[i + 1], sizes[i])), requires_grad=True) for i in range(len(sizes) - 1)]
        biases = [Tensor(np.zeros(sizes[i + 1]), requires_grad=True) for i in range(len(sizes) - 1)]
        return cls(weights, biases, activation)

    @classmethod
    def identity(cls, width: int) -> "FFNWeights":
        """A single affine layer computing ``x``."""
        return cls(
            [Tensor(np.eye(width), requires_grad=True)],
            [Tensor(np.zeros(width), requires_grad=True)],
            Activation.IDENTITY,
        )

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.w{i}"] = w
            params[f"{prefix}.b{i}"] = b
        return params


def ffn_forward(params: FFNWeights, x: Tensor) -> Tensor:
    """Apply the stack to vector ``x``."""
    if x.shape != (params.input_width,):
        raise DimensionError(f"FFN expects input width {params.input_width}, got shape {x.shape}")
    act = ACTIVATIONS[params.activation]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matvec(w, h), b)
        if i < last:
            h = act(h)
    return h


# ============================ LAYER NORM ============================

@dataclass
class LayerNormParams:
    """Learned gain and shift of a layer norm."""
    gain: Tensor
    shift: Tensor

    @classmethod
    def init(cls, width: int) -> "LayerNormParams":
        return cls(Tensor(np.ones(width), requires_grad=True), Tensor(np.zeros(width), requires_grad=True))

    @property
    def width(self) -> int:
        return self.gain.shape[0]

    def apply(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.shift)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.shift": self.shift}


# ============================ GATED RECURRENT CELL ============================

@dataclass
class RNNWeights:
    """
    Gated cell weights. Rows are stacked in gate order input, forget,
    candidate, output: ``w_x`` is ``4h x in``, ``w_h`` is ``4h x h``.
    """
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    def __post_init__(self):
        rows = self.w_x.shape[0]
        if rows % 4 or self.w_h.shape != (rows, rows // 4) or self.b.shape != (rows,):
            raise DimensionError(
                f"gated cell weights disagree: w_x {self.w_x.shape}, w_h {self.w_h.shape}, b {self.b.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_width(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def init(cls, input_width: int, hidden: int, rng: np.random.Generator) -> "RNNWeights":
        # forget-gate bias starts at 1
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        return cls(
            _scaled_normal(rng, 4 * hidden, input_width),
            _scaled_normal(rng, 4 * hidden, hidden),
            Tensor(bias, requires_grad=True),
        )

    @classmethod
    def zeros(cls, input_width: int, hidden: int) -> "RNNWeights":
        return cls(
            Tensor(np.zeros((4 * hidden, input_width)), requires_grad=True),
            Tensor(np.zeros((4 * hidden, hidden)), requires_grad=True),
            Tensor(np.zeros(4 * hidden), requires_grad=True),
        )

    def zero_state(self) -> Tuple[Tensor, Tensor]:
        return Tensor(np.zeros(self.hidden)), Tensor(np.zeros(self.hidden))

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}


def recurrent_cell_forward(
    params: RNNWeights,
    x: Tensor,
    state: Optional[Tuple[Tensor, Tensor]] = None,
) -> Tuple[Tensor, Tensor]:
    """One gated-cell step; returns ``(h', c')``."""
    hidden = params.hidden
    h, c = state if state is not None else params.zero_state()
    if x.shape != (params.input_width,):
        raise DimensionError(f"gated cell expects input width {params.input_width}, got shape {x.shape}")
    if h.shape != (hidden,) or c.shape != (hidden,):
        raise DimensionError(f"gated cell state must have width {hidden}, got {h.shape} and {c.shape}")

    z = add(add(matvec(params.w_x, x), matvec(params.w_h, h)), params.b)
    i = sigmoid(slice_vector(z, 0, hidden))
    f = sigmoid(slice_vector(z, hidden, 2 * hidden))
    g = tanh(slice_vector(z, 2 * hidden, 3 * hidden))
    o = sigmoid(slice_vector(z, 3 * hidden, 4 * hidden))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next
