"""Pyramid squeeze attention over per-frame visual features.

Channels are split into ``num_branches`` contiguous groups; branch ``s`` runs a
same-padded temporal convolution of width ``2*(s+1)+1`` over its group. The
concatenated result is recalibrated per channel by a squeeze-excitation gate
computed from its time average, and finally averaged over frames to give one
vector per utterance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mcncl import numcore as nc
from mcncl.nn import Affine, uniform_fan_in
from mcncl.numcore import TapeTensor, parameter

POOLINGS = ("mean",)


@dataclass(frozen=True)
class PsaConfig:
    channels: int = 256
    num_branches: int = 4
    se_reduction: int = 4
    pooling: str = "mean"

    def __post_init__(self):
        if self.channels < 1 or self.num_branches < 1 or self.se_reduction < 1:
            raise ValueError("PSA sizes must be positive")
        if self.channels % self.num_branches:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by num_branches ({self.num_branches})"
            )
        if self.channels % self.se_reduction:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by se_reduction ({self.se_reduction})"
            )
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}; choose from {POOLINGS}")

    @property
    def group_width(self) -> int:
        return self.channels // self.num_branches

    @property
    def kernel_sizes(self) -> list[int]:
        return [2 * (s + 1) + 1 for s in range(self.num_branches)]

    @property
    def se_hidden(self) -> int:
        return self.channels // self.se_reduction


@dataclass
class PsaParams:
    branch_kernels: list  # branch s: (2(s+1)+1, C/S, C/S)
    branch_biases: list
    se_fc1: Affine
    se_fc2: Affine

    @classmethod
    def init(cls, config: PsaConfig, rng: np.random.Generator) -> "PsaParams":
        g = config.group_width
        kernels, biases = [], []
        for k in config.kernel_sizes:
            kernels.append(parameter(uniform_fan_in(rng, (k, g, g), k * g)))
            biases.append(parameter(np.zeros(g)))
        return cls(
            kernels,
            biases,
            Affine.init(rng, config.channels, config.se_hidden),
            Affine.init(rng, config.se_hidden, config.channels),
        )

    @property
    def channels(self) -> int:
        return self.se_fc1.d_in

    @property
    def num_branches(self) -> int:
        return len(self.branch_kernels)


def _check_input(X: TapeTensor, params: PsaParams) -> None:
    if X.values.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"expected a non-empty (L, C) clip, got shape {X.shape}")
    if X.shape[1] != params.channels:
        raise nc.ShapeError(f"clip has {X.shape[1]} channels, PSA expects {params.channels}")


def multi_scale_conv(X, params: PsaParams) -> TapeTensor:
    X = nc.constant(X)
    _check_input(X, params)
    return nc.conv1d_grouped(X, params.branch_kernels, params.branch_biases)


def _gate(Z: TapeTensor, params: PsaParams) -> TapeTensor:
    return nc.sigmoid(params.se_fc2(nc.relu(params.se_fc1(Z))))


def se_weight(Y, params: PsaParams) -> TapeTensor:
    """Channel gate in (0, 1) from the time-average of Y; returns shape (C,)."""
    Y = nc.constant(Y)
    Z = nc.reshape(nc.mean_rows(Y), (1, Y.shape[1]))
    return nc.reshape(_gate(Z, params), (Y.shape[1],))


def psa_forward(X, params: PsaParams) -> TapeTensor:
    Y = multi_scale_conv(X, params)
    return nc.mul(Y, se_weight(Y, params))


def temporal_pool(frames) -> TapeTensor:
    frames = nc.constant(frames)
    if frames.values.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"temporal_pool needs at least one frame, got shape {frames.shape}")
    return nc.mean_rows(frames)


@dataclass(frozen=True)
class ClipLayout:
    """Where each frame of a batch of clips sits once packed with zero gaps.

    Clips are laid end to end with ``gap`` zero rows between them, so one
    same-padded convolution over the packed sequence equals convolving each
    clip separately as long as ``gap`` covers the widest kernel's half-width.
    """

    lengths: tuple
    gap: int
    positions: np.ndarray = field(repr=False)
    clip_of_frame: np.ndarray = field(repr=False)
    packed_len: int = 0

    @classmethod
    def build(cls, lengths: Sequence[int], gap: int) -> "ClipLayout":
        lengths = tuple(int(n) for n in lengths)
        if not lengths or min(lengths) < 1:
            raise ValueError("every clip needs at least one frame")
        starts = gap + np.concatenate([[0], np.cumsum([n + gap for n in lengths[:-1]])])
        positions = np.concatenate([s + np.arange(n) for s, n in zip(starts, lengths)])
        clip_of_frame = np.repeat(np.arange(len(lengths)), lengths)
        packed = int(starts[-1] + lengths[-1] + gap)
        return cls(lengths, gap, positions.astype(np.int64), clip_of_frame, packed)

    @property
    def n_clips(self) -> int:
        return len(self.lengths)


def psa_pool_batch(frames, layout: ClipLayout, params: PsaParams) -> TapeTensor:
    """PSA then temporal mean for many clips at once: (sum L, C) -> (n_clips, C)."""
    frames = nc.constant(frames)
    if frames.shape[0] != len(layout.positions):
        raise nc.ShapeError(f"{frames.shape[0]} frames for a layout of {len(layout.positions)}")
    if layout.gap < params.num_branches:
        raise ValueError("layout gap narrower than the widest kernel half-width")
    packed = nc.scatter_rows(frames, layout.positions, layout.packed_len)
    Y = nc.gather_rows(multi_scale_conv(packed, params), layout.positions)
    Z = nc.segment_mean(Y, layout.clip_of_frame, layout.n_clips)
    W = nc.gather_rows(_gate(Z, params), layout.clip_of_frame)
    return nc.segment_mean(nc.mul(Y, W), layout.clip_of_frame, layout.n_clips)


def mean_pool_batch(frames, layout: ClipLayout) -> TapeTensor:
    """The PSA-free path: plain per-clip frame average."""
    return nc.segment_mean(nc.constant(frames), layout.clip_of_frame, layout.n_clips)
