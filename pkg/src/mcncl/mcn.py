"""Stacked triple-query multi-head cross-attention across text, audio and visual streams.

Each layer updates every modality stream with two sequential attention stages:
the stream is always the query, and its two partner modalities supply keys and
values in turn (text attends audio then visual, and so on). All three streams
of a layer read the previous layer's outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mcncl import numcore as nc
from mcncl.nn import Affine, uniform_fan_in
from mcncl.numcore import TapeTensor, parameter

MODALITIES = ("text", "audio", "visual")
DEFAULT_STREAM_ORDER = {
    "text": ("audio", "visual"),
    "audio": ("text", "visual"),
    "visual": ("text", "audio"),
}


@dataclass(frozen=True)
class McnConfig:
    dim: int = 256
    num_heads: int = 4
    num_layers: int = 2
    ffn_dim: Optional[int] = None  # None -> 4 * dim
    stream_order: dict = field(default_factory=lambda: dict(DEFAULT_STREAM_ORDER))
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim < 1 or self.num_heads < 1:
            raise ValueError("dim and num_heads must be positive")
        if self.dim % self.num_heads:
            raise ValueError(f"dim ({self.dim}) must be divisible by num_heads ({self.num_heads})")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if set(self.stream_order) != set(MODALITIES):
            raise ValueError(f"stream_order needs exactly the keys {MODALITIES}")
        for m, partners in self.stream_order.items():
            if len(partners) != 2 or m in partners or not set(partners) <= set(MODALITIES):
                raise ValueError(f"stream {m!r} needs two distinct partner modalities, got {partners}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.dim


@dataclass
class StageParams:
    """One attention stage. Head h uses columns [h*d_k, (h+1)*d_k) of w_q / w_k / w_v."""

    w_q: TapeTensor
    w_k: TapeTensor
    w_v: TapeTensor
    w_o: TapeTensor
    norm1_gain: TapeTensor
    norm1_bias: TapeTensor
    ffn1: Affine
    ffn2: Affine
    norm2_gain: TapeTensor
    norm2_bias: TapeTensor

    @classmethod
    def init(cls, dim: int, ffn: int, rng: np.random.Generator) -> "StageParams":
        def sq():
            return parameter(uniform_fan_in(rng, (dim, dim), dim))

        return cls(
            sq(), sq(), sq(), sq(),
            parameter(np.ones(dim)), parameter(np.zeros(dim)),
            Affine.init(rng, dim, ffn), Affine.init(rng, ffn, dim),
            parameter(np.ones(dim)), parameter(np.zeros(dim)),
        )

    @classmethod
    def zeros(cls, dim: int, ffn: int) -> "StageParams":
        z = lambda: parameter(np.zeros((dim, dim)))  # noqa: E731
        return cls(
            z(), z(), z(), z(),
            parameter(np.ones(dim)), parameter(np.zeros(dim)),
            Affine.zeros(dim, ffn), Affine.zeros(ffn, dim),
            parameter(np.ones(dim)), parameter(np.zeros(dim)),
        )


@dataclass
class McnParams:
    layers: list  # layers[j][modality] -> [stage1, stage2]

    @classmethod
    def init(cls, config: McnConfig, rng: np.random.Generator) -> "McnParams":
        layers = []
        for _ in range(config.num_layers):
            layers.append(
                {
                    m: [StageParams.init(config.dim, config.ffn_width, rng) for _ in range(2)]
                    for m in MODALITIES
                }
            )
        return cls(layers)


@dataclass
class ModalState:
    text: TapeTensor
    audio: TapeTensor
    visual: TapeTensor

    def __post_init__(self):
        shapes = {self.text.shape, self.audio.shape, self.visual.shape}
        if len(shapes) != 1 or self.text.values.ndim != 2:
            raise nc.ShapeError(
                f"modal streams must share (U, D); got {self.text.shape}, {self.audio.shape}, {self.visual.shape}"
            )

    def __getitem__(self, modality: str) -> TapeTensor:
        return getattr(self, modality)


def cross_attention_block(
    query_seq,
    kv_seq,
    params: StageParams,
    num_heads: int,
    mask: Optional[np.ndarray] = None,
    eps: float = 1e-5,
    attn_log: Optional[list] = None,
) -> TapeTensor:
    """Multi-head cross-attention, Add & Norm, then a residual feed-forward with Add & Norm.

    ``mask[i, j]`` False hides kv row j from query row i (used to keep attention
    inside each dialogue when several share a batch).
    """
    q_in, kv = nc.constant(query_seq), nc.constant(kv_seq)
    dim = q_in.shape[1]
    if dim % num_heads:
        raise ValueError(f"model dim {dim} not divisible by {num_heads} heads")
    if kv.shape[1] != dim:
        raise nc.ShapeError(f"query width {dim} != key/value width {kv.shape[1]}")
    d_k = dim // num_heads
    Q = nc.matmul(q_in, params.w_q)
    K = nc.matmul(kv, params.w_k)
    V = nc.matmul(kv, params.w_v)
    inv_sqrt = 1.0 / np.sqrt(d_k)
    heads = []
    for h in range(num_heads):
        lo, hi = h * d_k, (h + 1) * d_k
        scores = nc.scale(nc.matmul(nc.slice_cols(Q, lo, hi), nc.transpose(nc.slice_cols(K, lo, hi))), inv_sqrt)
        attn = nc.softmax_lastdim(scores, mask)
        if attn_log is not None:
            attn_log.append(attn.values)
        heads.append(nc.matmul(attn, nc.slice_cols(V, lo, hi)))
    mh = nc.matmul(heads[0] if num_heads == 1 else nc.concat_cols(heads), params.w_o)
    x = nc.layer_norm(nc.add(q_in, mh), params.norm1_gain, params.norm1_bias, eps)
    ffn = params.ffn2(nc.relu(params.ffn1(x)))
    return nc.layer_norm(nc.add(x, ffn), params.norm2_gain, params.norm2_bias, eps)


def mcn_layer(
    state: ModalState,
    layer_params: dict,
    config: McnConfig,
    mask: Optional[np.ndarray] = None,
    attn_log: Optional[list] = None,
) -> ModalState:
    updated = {}
    for m in MODALITIES:
        first, second = config.stream_order[m]
        stage1, stage2 = layer_params[m]
        x = cross_attention_block(state[m], state[first], stage1, config.num_heads, mask, config.ln_eps, attn_log)
        updated[m] = cross_attention_block(x, state[second], stage2, config.num_heads, mask, config.ln_eps, attn_log)
    return ModalState(**updated)


def mcn_forward(
    state: ModalState,
    params: McnParams,
    config: McnConfig,
    mask: Optional[np.ndarray] = None,
    attn_log: Optional[list] = None,
) -> ModalState:
    if len(params.layers) != config.num_layers:
        raise ValueError(f"{len(params.layers)} layer parameter sets for num_layers={config.num_layers}")
    for layer in params.layers:
        state = mcn_layer(state, layer, config, mask, attn_log)
    return state
