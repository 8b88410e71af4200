"""The full fusion model: ingestion, PSA, cross-attention stack, contrastive heads, classifier."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mcncl import numcore as nc
from mcncl.conlearn import (
    ContrastiveConfig,
    EmbeddingBatch,
    ProjectionHeadParams,
    normalize_batch,
    project,
    supcon_loss_hard,
    total_contrastive,
)
from mcncl.data import Batch, IngestionParams, ingest_raw_features
from mcncl.head import ClassifierConfig, ClassifierParams, classifier_logits, cross_entropy, total_loss
from mcncl.mcn import MODALITIES, McnConfig, McnParams, ModalState, mcn_forward
from mcncl.nn import named_parameters
from mcncl.numcore import TapeTensor
from mcncl.psa import ClipLayout, PsaConfig, PsaParams, mean_pool_batch, psa_pool_batch


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    text_dim: int
    audio_dim: int
    visual_dim: int
    psa: PsaConfig = field(default_factory=PsaConfig)
    mcn: McnConfig = field(default_factory=McnConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    no_psa: bool = False
    no_mcn_cl: bool = False

    def __post_init__(self):
        if self.psa.channels != self.mcn.dim:
            raise ValueError(f"PSA channels ({self.psa.channels}) must equal model dim ({self.mcn.dim})")

    @property
    def dim(self) -> int:
        return self.mcn.dim

    @property
    def proj_dim(self) -> int:
        return self.contrastive.proj_dim or self.dim


@dataclass
class MCNCLParams:
    ingest: IngestionParams
    psa: PsaParams
    mcn: McnParams
    proj: ProjectionHeadParams
    classifier: ClassifierParams


@dataclass
class ForwardResult:
    logits: TapeTensor
    ce: TapeTensor
    contrast: TapeTensor
    loss: TapeTensor
    modality_losses: dict
    features: ModalState


class MCNCL:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(seed))
        D = config.dim
        self.params = MCNCLParams(
            ingest=IngestionParams.init(rng, config.text_dim, config.audio_dim, config.visual_dim, D),
            psa=PsaParams.init(config.psa, rng),
            mcn=McnParams.init(config.mcn, rng),
            proj=ProjectionHeadParams.init(rng, D, config.proj_dim),
            classifier=ClassifierParams.init(rng, D, config.num_classes, config.classifier),
        )
        self._named = named_parameters(self.params)

    def parameters(self) -> dict:
        return self._named

    def n_parameters(self) -> int:
        return sum(p.values.size for p in self._named.values())

    def encode(self, batch: Batch) -> ModalState:
        cfg = self.config
        text, audio, frames = ingest_raw_features(batch.text, batch.audio, batch.frames, self.params.ingest)
        layout = ClipLayout.build(batch.frame_lengths, gap=cfg.psa.num_branches)
        if cfg.no_psa:
            visual = mean_pool_batch(frames, layout)
        else:
            visual = psa_pool_batch(frames, layout, self.params.psa)
        state = ModalState(text, audio, visual)
        if cfg.no_mcn_cl:
            return state
        return mcn_forward(state, self.params.mcn, cfg.mcn, mask=batch.attention_mask)

    def forward(self, batch: Batch, lam: float = 1.0) -> ForwardResult:
        cfg = self.config
        state = self.encode(batch)
        modality_losses = {}
        if cfg.no_mcn_cl:
            contrast = nc.constant(np.zeros(()))
        else:
            cc = cfg.contrastive
            for m in MODALITIES:
                emb = EmbeddingBatch(normalize_batch(project(state[m], self.params.proj[m])), batch.labels)
                modality_losses[m] = supcon_loss_hard(emb, cc.temperature, cc.hard_fraction).loss
            contrast = total_contrastive(
                modality_losses["text"], modality_losses["audio"], modality_losses["visual"],
                cc.alpha, cc.beta, cc.gamma,
            )
        logits = classifier_logits(state.text, state.audio, state.visual, self.params.classifier)
        ce = cross_entropy(logits, batch.labels)
        loss = total_loss(ce, contrast, lam) if not cfg.no_mcn_cl else ce
        return ForwardResult(logits, ce, contrast, loss, modality_losses, state)

    def predict(self, batch: Batch) -> np.ndarray:
        state = self.encode(batch)
        logits = classifier_logits(state.text, state.audio, state.visual, self.params.classifier)
        return np.argmax(logits.values, axis=1)

    def state_arrays(self) -> dict:
        return {k: p.values for k, p in self._named.items()}

    def load_arrays(self, arrays: dict, strict: bool = True) -> None:
        if strict and set(arrays) != set(self._named):
            missing = set(self._named) - set(arrays)
            extra = set(arrays) - set(self._named)
            raise KeyError(f"parameter mismatch; missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for k, v in arrays.items():
            p = self._named[k]
            if p.values.shape != v.shape:
                raise ValueError(f"{k}: stored shape {v.shape} != model shape {p.values.shape}")
            p.values[...] = v
