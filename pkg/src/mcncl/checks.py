"""Finite-difference gradient checks for each model block and the assembled model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mcncl import numcore as nc
from mcncl.config import GradcheckSection
from mcncl.conlearn import (
    ContrastiveConfig,
    EmbeddingBatch,
    ProjectionHeadParams,
    normalize_batch,
    project,
    supcon_loss_full,
    supcon_loss_hard,
    total_contrastive,
)
from mcncl.data import DialogueSample, Utterance, make_batch
from mcncl.head import ClassifierConfig, ClassifierParams, classifier_logits, cross_entropy
from mcncl.mcn import MODALITIES, McnConfig, McnParams, ModalState, mcn_forward
from mcncl.model import MCNCL, ModelConfig
from mcncl.nn import named_parameters
from mcncl.numcore import GradCheckReport, grad_check_report
from mcncl.psa import PsaConfig, PsaParams, psa_forward


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.name:<16} max_rel_err={self.report.max_rel_err:.3e}  "
            f"scalars={self.report.n_checked:<6d} worst={self.report.worst_path}  [{status}]"
        )


def tiny_labels(n: int, k: int) -> np.ndarray:
    # every class appears at least twice once n >= 2k, so each anchor has positives
    return np.arange(n) % k


def tiny_batch(cfg: GradcheckSection, rng: np.random.Generator):
    """Two dialogues splitting ``cfg.utterances`` utterances, every clip ``cfg.frames`` long."""
    labels = tiny_labels(cfg.utterances, cfg.num_classes)
    d = cfg.raw_dim
    utts = [
        Utterance(
            speaker=i % 2,
            label=int(labels[i]),
            text=rng.standard_normal(d),
            audio=rng.standard_normal(d),
            visual=rng.standard_normal((cfg.frames, d)),
        )
        for i in range(cfg.utterances)
    ]
    half = cfg.utterances // 2
    return make_batch([DialogueSample(0, utts[:half]), DialogueSample(1, utts[half:])])


def tiny_model_config(cfg: GradcheckSection) -> ModelConfig:
    return ModelConfig(
        num_classes=cfg.num_classes,
        text_dim=cfg.raw_dim,
        audio_dim=cfg.raw_dim,
        visual_dim=cfg.raw_dim,
        psa=PsaConfig(cfg.dim, cfg.num_branches, se_reduction=2),
        mcn=McnConfig(cfg.dim, cfg.num_heads, cfg.num_layers),
        contrastive=ContrastiveConfig(temperature=0.5, hard_fraction=0.5),
        classifier=ClassifierConfig(cfg.classifier_hidden, cfg.classifier_hidden2),
    )


def _weighted_sum(out, weights: np.ndarray):
    return nc.sum_all(nc.mul(out, nc.constant(weights)))


def check_psa(cfg: GradcheckSection, rng) -> GradCheckReport:
    pcfg = PsaConfig(cfg.dim, cfg.num_branches, se_reduction=2)
    params = PsaParams.init(pcfg, rng)
    named = named_parameters(params, "psa")
    named["psa.input"] = nc.parameter(rng.standard_normal((cfg.frames, cfg.dim)))
    w = rng.standard_normal((cfg.frames, cfg.dim))
    return grad_check_report(lambda: _weighted_sum(psa_forward(named["psa.input"], params), w), named, cfg.step)


def check_mcn(cfg: GradcheckSection, rng) -> GradCheckReport:
    mcfg = McnConfig(cfg.dim, cfg.num_heads, cfg.num_layers)
    params = McnParams.init(mcfg, rng)
    named = named_parameters(params, "mcn")
    n = cfg.utterances
    inputs = {m: nc.parameter(rng.standard_normal((n, cfg.dim))) for m in MODALITIES}
    named.update({f"mcn.input.{m}": t for m, t in inputs.items()})
    dialogue = np.arange(n) >= n // 2
    mask = dialogue[:, None] == dialogue[None, :]
    ws = {m: rng.standard_normal((n, cfg.dim)) for m in MODALITIES}

    def loss():
        out = mcn_forward(ModalState(**inputs), params, mcfg, mask=mask)
        t, a, v = (_weighted_sum(out[m], ws[m]) for m in MODALITIES)
        return nc.add(nc.add(t, a), v)

    return grad_check_report(loss, named, cfg.step)


def check_conlearn(cfg: GradcheckSection, rng) -> GradCheckReport:
    proj = ProjectionHeadParams.init(rng, cfg.dim, cfg.dim)
    named = named_parameters(proj, "proj")
    n = cfg.utterances
    labels = tiny_labels(n, cfg.num_classes)
    feats = {m: nc.parameter(rng.standard_normal((n, cfg.dim))) for m in MODALITIES}
    named.update({f"proj.input.{m}": t for m, t in feats.items()})

    def loss():
        parts = []
        for m in MODALITIES:
            emb = EmbeddingBatch(normalize_batch(project(feats[m], proj[m])), labels)
            # full on one modality keeps the non-mined path under test too
            fn = supcon_loss_full if m == "text" else (lambda b, t: supcon_loss_hard(b, t, 0.5))
            parts.append(fn(emb, 0.5).loss)
        return total_contrastive(*parts, 1.0, 0.7, 0.4)

    return grad_check_report(loss, named, cfg.step)


def check_head(cfg: GradcheckSection, rng) -> GradCheckReport:
    params = ClassifierParams.init(
        rng, cfg.dim, cfg.num_classes, ClassifierConfig(cfg.classifier_hidden, cfg.classifier_hidden2)
    )
    named = named_parameters(params, "classifier")
    n = cfg.utterances
    feats = {m: nc.parameter(rng.standard_normal((n, cfg.dim))) for m in MODALITIES}
    named.update({f"classifier.input.{m}": t for m, t in feats.items()})
    labels = tiny_labels(n, cfg.num_classes)
    return grad_check_report(
        lambda: cross_entropy(classifier_logits(feats["text"], feats["audio"], feats["visual"], params), labels),
        named,
        cfg.step,
    )


def check_end_to_end(cfg: GradcheckSection, lam: float, seed: int = 0) -> GradCheckReport:
    rng = np.random.Generator(np.random.PCG64(seed))
    model = MCNCL(tiny_model_config(cfg), seed=seed)
    batch = tiny_batch(cfg, rng)
    return grad_check_report(lambda: model.forward(batch, lam).loss, model.parameters(), cfg.step)


def run_gradchecks(cfg: GradcheckSection, seed: int = 0, emit: Callable[[str], None] = print) -> list:
    """Check every block, then the whole model at each λ; returns the list of CheckResult."""
    if cfg.dim % cfg.num_branches or cfg.dim % cfg.num_heads:
        raise ValueError("gradcheck dim must be divisible by num_branches and num_heads")
    results = []
    blocks = [("psa", check_psa), ("mcn", check_mcn), ("conlearn", check_conlearn), ("head", check_head)]
    for i, (name, fn) in enumerate(blocks):
        rng = np.random.Generator(np.random.PCG64([seed, i]))
        results.append(CheckResult(name, fn(cfg, rng), cfg.tolerance))
        emit(results[-1].line())
    for lam in cfg.lambdas:
        results.append(CheckResult(f"e2e(lam={lam:g})", check_end_to_end(cfg, lam, seed), cfg.tolerance))
        emit(results[-1].line())
    worst = max(results, key=lambda r: r.report.max_rel_err)
    emit(f"worst offender: {worst.name} {worst.report.worst_path} rel_err={worst.report.max_rel_err:.3e}")
    return results
