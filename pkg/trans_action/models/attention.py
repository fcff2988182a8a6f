"""
Transformer encoder pieces used for every attention stage of the model.

An encoder layer is the post-norm residual stack

    F'    = layer_norm(MHA(F_in) + F_in)
    F_out = layer_norm(MLP(F') + F')

with MLP = relu between two affine maps. The parameter count of one layer with
input width D, projection width D_k, H heads and hidden width D_ff is

    4 * D * D_k            (W_q, W_k, W_v, W_o)
  + 2 * D * D_ff + D_ff + D  (MLP weights and biases)
  + 4 * D                (two layer-norm gain/bias pairs)

and does not depend on H: heads only slice the projection width.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from trans_action.exceptions import ShapeError
from trans_action.models.tensor import (
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    parameter,
    relu,
    scale,
    softmax_rows,
    split,
    tensor,
    transpose_last_two,
)

NamedTensors = List[Tuple[str, Tensor]]


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_k // self.heads

    def named_parameters(self, prefix: str) -> NamedTensors:
        return [
            (f"{prefix}.w_q", self.w_q),
            (f"{prefix}.w_k", self.w_k),
            (f"{prefix}.w_v", self.w_v),
            (f"{prefix}.w_o", self.w_o),
        ]


@dataclass
class EncoderLayerParams:
    attention: AttentionParams
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    eps: float = 1e-5

    @property
    def d_in(self) -> int:
        return self.mlp_w1.shape[0]

    def named_parameters(self, prefix: str) -> NamedTensors:
        return self.attention.named_parameters(f"{prefix}.attention") + [
            (f"{prefix}.mlp_w1", self.mlp_w1),
            (f"{prefix}.mlp_b1", self.mlp_b1),
            (f"{prefix}.mlp_w2", self.mlp_w2),
            (f"{prefix}.mlp_b2", self.mlp_b2),
            (f"{prefix}.norm1_gain", self.norm1_gain),
            (f"{prefix}.norm1_bias", self.norm1_bias),
            (f"{prefix}.norm2_gain", self.norm2_gain),
            (f"{prefix}.norm2_bias", self.norm2_bias),
        ]


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def init_attention(rng: np.random.Generator, d_in: int, heads: int, d_k: Optional[int] = None) -> AttentionParams:
    d_k = d_k or d_in
    if d_k % heads:
        raise ShapeError(f"projection width {d_k} is not divisible by {heads} heads")
    return AttentionParams(
        w_q=uniform_init(rng, d_in, (d_in, d_k)),
        w_k=uniform_init(rng, d_in, (d_in, d_k)),
        w_v=uniform_init(rng, d_in, (d_in, d_k)),
        w_o=uniform_init(rng, d_k, (d_k, d_in)),
        heads=heads,
    )


def init_encoder_layer(
    rng: np.random.Generator,
    d_in: int,
    heads: int,
    d_ff: Optional[int] = None,
    d_k: Optional[int] = None,
    eps: float = 1e-5,
) -> EncoderLayerParams:
    """Weights uniform in +-1/sqrt(fan_in); layer-norm gain 1, bias 0. `d_ff` defaults to 2 * d_in."""
    d_ff = d_ff or 2 * d_in
    attention = init_attention(rng, d_in, heads, d_k)
    return EncoderLayerParams(
        attention=attention,
        mlp_w1=uniform_init(rng, d_in, (d_in, d_ff)),
        mlp_b1=uniform_init(rng, d_in, (d_ff,)),
        mlp_w2=uniform_init(rng, d_ff, (d_ff, d_in)),
        mlp_b2=uniform_init(rng, d_ff, (d_in,)),
        norm1_gain=parameter(np.ones(d_in)),
        norm1_bias=parameter(np.zeros(d_in)),
        norm2_gain=parameter(np.ones(d_in)),
        norm2_bias=parameter(np.zeros(d_in)),
        eps=eps,
    )


def encoder_parameter_count(d_in: int, d_k: int, heads: int, d_ff: int) -> int:
    if d_k % heads:
        raise ShapeError(f"projection width {d_k} is not divisible by {heads} heads")
    return 4 * d_in * d_k + 2 * d_in * d_ff + d_ff + d_in + 4 * d_in


def sinusoidal_pe(n_positions: int, d_model: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same)."""
    if d_model % 2:
        raise ShapeError(f"sinusoidal positional embedding needs an even width, got {d_model}")
    position = np.arange(n_positions, dtype=np.float64)[:, None]
    div_term = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(position / div_term)
    table[:, 1::2] = np.cos(position / div_term)
    return table


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"scaled_attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = scale(matmul(q, transpose_last_two(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax_rows(scores)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def multi_head_attention(x_q: Tensor, x_kv: Tensor, p: AttentionParams) -> Tensor:
    if p.d_k % p.heads:
        raise ShapeError(f"projection width {p.d_k} is not divisible by {p.heads} heads")
    q = matmul(x_q, p.w_q)
    k = matmul(x_kv, p.w_k)
    v = matmul(x_kv, p.w_v)

    if p.heads == 1:
        return matmul(scaled_attention(q, k, v), p.w_o)

    sizes = [p.head_dim] * p.heads
    heads = [
        scaled_attention(q_h, k_h, v_h)
        for q_h, k_h, v_h in zip(split(q, sizes, -1), split(k, sizes, -1), split(v, sizes, -1))
    ]
    return matmul(concat(heads, axis=-1), p.w_o)


def feed_forward(x: Tensor, p: EncoderLayerParams) -> Tensor:
    hidden = relu(add(matmul(x, p.mlp_w1), p.mlp_b1))
    return add(matmul(hidden, p.mlp_w2), p.mlp_b2)


def encoder_layer(x: Tensor, p: EncoderLayerParams, add_pe: bool = False) -> Tensor:
    if x.shape[-1] != p.d_in:
        raise ShapeError(f"encoder layer expects width {p.d_in}, got input of shape {x.shape}")
    if add_pe:
        # The residual below uses the embedded input
        x = add(x, tensor(sinusoidal_pe(x.shape[-2], x.shape[-1]), name="positional_embedding"))
    attended = layer_norm(add(multi_head_attention(x, x, p.attention), x), p.norm1_gain, p.norm1_bias, p.eps)
    return layer_norm(add(feed_forward(attended, p), attended), p.norm2_gain, p.norm2_bias, p.eps)
