"""Per-modality projection heads and supervised contrastive losses.

Each modality is contrasted only against itself. For anchor i with same-label
partners P_i, the loss is

    L_i = -(1/|P_i|) * sum_{p in P_i} log( e^{s_ip} / (sum_{n in N} e^{s_in} + sum_{p in P_i} e^{s_ip}) )

with s = cosine similarity / temperature. ``N`` holds every different-label
sample for the full loss and only the most similar fraction of them for the
hard-negative loss, so the hard loss can never exceed the full one. Anchors
without a partner in the batch are left out of the mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from mcncl import kernels
from mcncl import numcore as nc
from mcncl.nn import Affine, uniform_fan_in
from mcncl.numcore import TapeTensor

MODALITIES = ("text", "audio", "visual")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    hard_fraction: float = 0.3
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    proj_dim: Optional[int] = None  # None -> model dim

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.hard_fraction <= 1:
            raise ValueError("hard_fraction must lie in (0, 1]")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("modality weights must be non-negative")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ValueError("proj_dim must be positive")


@dataclass
class ProjectionHead:
    fc1: Affine
    fc2: Affine

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "ProjectionHead":
        fc1, fc2 = Affine.init(rng, d_in, d_out), Affine.init(rng, d_out, d_out)
        # a row whose ReLU units are all off lands on b2; zero b2 would make it unnormalizable
        fc2.bias.values[...] = uniform_fan_in(rng, d_out, d_out)
        return cls(fc1, fc2)


@dataclass
class ProjectionHeadParams:
    text: ProjectionHead
    audio: ProjectionHead
    visual: ProjectionHead

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "ProjectionHeadParams":
        return cls(*(ProjectionHead.init(rng, d_in, d_out) for _ in MODALITIES))

    def __getitem__(self, modality: str) -> ProjectionHead:
        return getattr(self, modality)


def project(F, head: ProjectionHead) -> TapeTensor:
    return head.fc2(nc.relu(head.fc1(F)))


def normalize_batch(z) -> TapeTensor:
    return nc.l2_normalize(nc.constant(z))


@dataclass
class EmbeddingBatch:
    embeddings: TapeTensor  # (N, D_p), unit rows
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = nc.constant(self.embeddings)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        v = self.embeddings.values
        if v.ndim != 2 or self.labels.shape != (v.shape[0],):
            raise nc.ShapeError(f"{self.labels.shape} labels for embeddings of shape {v.shape}")
        norms = np.sqrt((v * v).sum(axis=1))
        if v.shape[0] and np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("embedding rows must have unit norm")

    @classmethod
    def from_raw(cls, z, labels) -> "EmbeddingBatch":
        return cls(normalize_batch(z), labels)

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class SupConResult:
    loss: TapeTensor
    per_sample: np.ndarray
    contributing: np.ndarray
    degenerate: bool = False


def similarity(batch: EmbeddingBatch) -> TapeTensor:
    z = batch.embeddings
    return nc.matmul(z, nc.transpose(z))


def _supcon_from_similarity(sim: TapeTensor, labels, tau: float, neg_mask) -> SupConResult:
    per, contrib, coef = kernels.supcon_terms(sim.values, labels, float(tau), neg_mask)
    n_contrib = int(contrib.sum())
    if n_contrib == 0:
        return SupConResult(nc.constant(np.zeros(())), per, contrib)
    loss_val = np.asarray(per[contrib].sum() / n_contrib)
    loss = nc.apply_op(loss_val, (sim,), lambda g: (coef * (g / n_contrib),))
    return SupConResult(loss, per, contrib)


def _degenerate(n: int) -> SupConResult:
    return SupConResult(nc.constant(np.zeros(())), np.zeros(n), np.zeros(n, dtype=bool), True)


def supcon_loss_full(batch: EmbeddingBatch, tau: float) -> SupConResult:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if len(batch) < 2:
        return _degenerate(len(batch))
    neg = batch.labels[:, None] != batch.labels[None, :]
    return _supcon_from_similarity(similarity(batch), batch.labels, tau, neg)


def hard_negative_set(batch: EmbeddingBatch, i: int, hard_fraction: float) -> set:
    if not 0 < hard_fraction <= 1:
        raise ValueError("hard_fraction must lie in (0, 1]")
    if not 0 <= i < len(batch):
        raise IndexError(f"anchor {i} outside batch of {len(batch)}")
    z = batch.embeddings.values
    mask = kernels.hard_negative_mask(z @ z.T, batch.labels, float(hard_fraction))
    return {int(j) for j in np.flatnonzero(mask[i])}


def supcon_loss_hard(batch: EmbeddingBatch, tau: float, hard_fraction: float) -> SupConResult:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not 0 < hard_fraction <= 1:
        raise ValueError("hard_fraction must lie in (0, 1]")
    if len(batch) < 2:
        return _degenerate(len(batch))
    sim = similarity(batch)
    neg = kernels.hard_negative_mask(sim.values, batch.labels, float(hard_fraction))
    return _supcon_from_similarity(sim, batch.labels, tau, neg)


def total_contrastive(l_text, l_audio, l_visual, alpha: float, beta: float, gamma: float) -> TapeTensor:
    if min(alpha, beta, gamma) < 0:
        raise ValueError("modality weights must be non-negative")
    return nc.add(nc.add(nc.scale(l_text, alpha), nc.scale(l_audio, beta)), nc.scale(l_visual, gamma))
