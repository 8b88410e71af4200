"""Training loop, optimisers, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from mcncl.config import RunConfig, from_dict, to_dict
from mcncl.conlearn import ContrastiveConfig
from mcncl.data import Corpus, generate_corpus, load_corpus, make_batch, pack_dialogues
from mcncl.head import ClassifierConfig, EvalReport, weighted_f1
from mcncl.mcn import McnConfig
from mcncl.model import MCNCL, ModelConfig
from mcncl.numcore import Tape
from mcncl.psa import PsaConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MCNCKPT\x00"
CKPT_VERSION = 1
METRICS_HEADER = "epoch\ttrain_loss\tval_weighted_f1\n"


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


class SGD:
    kind = "sgd"

    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for p in self.params.values():
            if p.grad is not None:
                p.values -= self.lr * p.grad

    def state_arrays(self) -> dict:
        return {}

    def load_state(self, t: int, arrays: dict) -> None:
        self.t = t


class Adam:
    kind = "adam"

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.values -= lr_t * self.m[k] / (np.sqrt(self.v[k]) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, t: int, arrays: dict) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()


def make_optimizer(config: RunConfig, params: dict):
    o = config.optim
    if o.kind == "sgd":
        return SGD(params, o.lr)
    return Adam(params, o.lr, o.beta1, o.beta2, o.eps)


# ---------------------------------------------------------------------------
# model / corpus construction
# ---------------------------------------------------------------------------


def model_config(config: RunConfig, corpus: Corpus) -> ModelConfig:
    m = config.model
    return ModelConfig(
        num_classes=corpus.num_classes,
        text_dim=corpus.text_dim,
        audio_dim=corpus.audio_dim,
        visual_dim=corpus.visual_dim,
        psa=PsaConfig(m.dim, m.psa.num_branches, m.psa.se_reduction, m.psa.pooling),
        mcn=McnConfig(
            m.dim, m.mcn.num_heads, m.mcn.num_layers, m.mcn.ffn_dim,
            {k: tuple(v) for k, v in m.mcn.stream_order.items()},
        ),
        contrastive=ContrastiveConfig(
            m.contrastive.temperature, m.contrastive.hard_fraction, m.contrastive.alpha,
            m.contrastive.beta, m.contrastive.gamma, m.contrastive.proj_dim,
        ),
        classifier=ClassifierConfig(m.classifier.hidden, m.classifier.hidden2),
        no_psa=m.no_psa,
        no_mcn_cl=m.no_mcn_cl,
    )


def build_model(config: RunConfig, corpus: Corpus) -> MCNCL:
    return MCNCL(model_config(config, corpus), seed=config.seed)


def resolve_corpus(config: RunConfig) -> Corpus:
    if config.data.corpus_path:
        return load_corpus(config.data.corpus_path)
    return generate_corpus(config.data.corpus)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model: MCNCL, dialogues: list, batch_size: int) -> EvalReport:
    preds, labels = [], []
    for group in pack_dialogues(dialogues, batch_size):
        batch = make_batch(group)
        preds.append(model.predict(batch))
        labels.append(batch.labels)
    return weighted_f1(np.concatenate(preds), np.concatenate(labels), model.config.num_classes)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: RunConfig
    dims: dict
    epoch: int
    history: list
    best_val_f1: float
    optimizer_kind: str
    optimizer_t: int
    params: dict
    optimizer_arrays: dict = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors, offset = [], 0
    payload = []
    for group, arrays in (("param", ckpt.params), ("optim", ckpt.optimizer_arrays)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            payload.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "config": to_dict(ckpt.config),
        "dims": ckpt.dims,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "best_val_f1": ckpt.best_val_f1,
        "optimizer": {"kind": ckpt.optimizer_kind, "t": ckpt.optimizer_t},
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<HQ", CKPT_VERSION, len(head)) + head + b"".join(payload)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    pre = len(CKPT_MAGIC) + struct.calcsize("<HQ")
    if len(buf) < pre or buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, head_len = struct.unpack_from("<HQ", buf, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported")
    if len(buf) < pre + head_len:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(buf[pre : pre + head_len])
    base = pre + head_len
    params, optim = {}, {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        start = base + t["offset"]
        if start + 8 * count > len(buf):
            raise CheckpointError(f"truncated tensor {t['name']}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(t["shape"])
        (params if t["group"] == "param" else optim)[t["name"]] = arr
    return Checkpoint(
        config=from_dict(RunConfig, header["config"]),
        dims=header["dims"],
        epoch=header["epoch"],
        history=header["history"],
        best_val_f1=header["best_val_f1"],
        optimizer_kind=header["optimizer"]["kind"],
        optimizer_t=header["optimizer"]["t"],
        params=params,
        optimizer_arrays=optim,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def corpus_dims(corpus: Corpus) -> dict:
    return {
        "num_classes": corpus.num_classes,
        "text": corpus.text_dim,
        "audio": corpus.audio_dim,
        "visual": corpus.visual_dim,
    }


def model_from_checkpoint(ckpt: Checkpoint) -> MCNCL:
    d = ckpt.dims
    stub = Corpus(d["num_classes"], d["text"], d["audio"], d["visual"])
    model = build_model(ckpt.config, stub)
    model.load_arrays(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def epoch_batches(dialogues: list, seed: int, epoch: int, batch_size: int) -> list:
    """Shuffled dialogue groups for one epoch; a pure function of (seed, epoch)."""
    rng = np.random.Generator(np.random.PCG64([seed, epoch]))
    order = rng.permutation(len(dialogues))
    return pack_dialogues([dialogues[i] for i in order], batch_size)


@dataclass
class Trainer:
    config: RunConfig
    corpus: Corpus
    model: MCNCL
    optimizer: object
    epoch: int = 0
    history: list = field(default_factory=list)
    best_val_f1: float = -1.0

    @classmethod
    def create(cls, config: RunConfig, corpus: Optional[Corpus] = None) -> "Trainer":
        corpus = corpus if corpus is not None else resolve_corpus(config)
        model = build_model(config, corpus)
        return cls(config, corpus, model, make_optimizer(config, model.parameters()))

    @classmethod
    def resume(cls, ckpt: Checkpoint, corpus: Corpus) -> "Trainer":
        if corpus_dims(corpus) != ckpt.dims:
            raise CheckpointError(f"corpus dims {corpus_dims(corpus)} differ from checkpoint {ckpt.dims}")
        model = model_from_checkpoint(ckpt)
        opt = make_optimizer(ckpt.config, model.parameters())
        if opt.kind != ckpt.optimizer_kind:
            raise CheckpointError("optimizer kind differs from checkpoint")
        opt.load_state(ckpt.optimizer_t, ckpt.optimizer_arrays)
        return cls(ckpt.config, corpus, model, opt, ckpt.epoch, list(ckpt.history), ckpt.best_val_f1)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            dims=corpus_dims(self.corpus),
            epoch=self.epoch,
            history=list(self.history),
            best_val_f1=self.best_val_f1,
            optimizer_kind=self.optimizer.kind,
            optimizer_t=self.optimizer.t,
            params={k: v.copy() for k, v in self.model.state_arrays().items()},
            optimizer_arrays={k: v.copy() for k, v in self.optimizer.state_arrays().items()},
        )

    def step(self, group: list) -> float:
        batch = make_batch(group)
        self.optimizer.zero_grad()
        with Tape() as tape:
            result = self.model.forward(batch, self.config.lambda_contrast)
            loss = float(result.loss.values)
            if not np.isfinite(loss):
                raise NumericalError(
                    json.dumps(
                        {
                            "epoch": self.epoch,
                            "dialogue_ids": list(batch.dialogue_ids),
                            "ce": float(result.ce.values),
                            "contrast": float(result.contrast.values),
                            "input_max_abs": float(max(np.abs(batch.text).max(), np.abs(batch.audio).max(), np.abs(batch.frames).max())),
                        }
                    )
                )
            tape.backward(result.loss)
        self.optimizer.step()
        return loss

    def next_step_loss(self) -> float:
        """Loss of the first batch the next epoch would train on, without updating."""
        group = epoch_batches(self.corpus["train"], self.config.seed, self.epoch, self.config.optim.batch_size)[0]
        return float(self.model.forward(make_batch(group), self.config.lambda_contrast).loss.values)

    def run_epoch(self) -> dict:
        groups = epoch_batches(self.corpus["train"], self.config.seed, self.epoch, self.config.optim.batch_size)
        total, count = 0.0, 0
        for group in groups:
            n = sum(len(d) for d in group)
            total += self.step(group) * n
            count += n
        report = evaluate(self.model, self.corpus["val"], self.config.optim.batch_size) if self.corpus["val"] else None
        self.epoch += 1
        row = {
            "epoch": self.epoch,
            "train_loss": total / count,
            "val_weighted_f1": report.weighted_f1 if report else float("nan"),
        }
        self.history.append(row)
        return row

    def fit(self, out_dir=None, on_epoch: Optional[Callable[[dict], None]] = None, stop_at: Optional[float] = None) -> list:
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics = out / "metrics.tsv"
            if self.epoch == 0 or not metrics.exists():
                metrics.write_text(METRICS_HEADER + "".join(_metrics_line(r) for r in self.history))
        while self.epoch < self.config.optim.epochs:
            try:
                row = self.run_epoch()
            except NumericalError as exc:
                if out is not None:
                    (out / "nan_dump.json").write_text(str(exc) + "\n")
                raise
            improved = row["val_weighted_f1"] > self.best_val_f1
            if improved:
                self.best_val_f1 = row["val_weighted_f1"]
            if out is not None:
                with open(out / "metrics.tsv", "a") as fh:
                    fh.write(_metrics_line(row))
                ckpt = self.checkpoint()
                save_checkpoint(out / "last.ckpt", ckpt)
                if improved:
                    save_checkpoint(out / "best.ckpt", ckpt)
            log.info("epoch %d train_loss %.6f val_wF1 %.4f", row["epoch"], row["train_loss"], row["val_weighted_f1"])
            if on_epoch is not None:
                on_epoch(row)
            if stop_at is not None and row["val_weighted_f1"] >= stop_at:
                break
        return self.history


def _metrics_line(row: dict) -> str:
    return f"{row['epoch']}\t{row['train_loss']!r}\t{row['val_weighted_f1']!r}\n"


ABLATION_VARIANTS = (
    ("full", {}),
    ("no_psa", {"no_psa": True}),
    ("no_mcn_cl", {"no_mcn_cl": True}),
)


def run_ablation(config: RunConfig, seeds, out_dir=None, emit: Callable[[str], None] = print) -> dict:
    """Train every variant for every seed on one shared corpus.

    Returns ``{variant: [best val weighted F1 per seed]}``. The corpus and the
    evaluation path are identical across variants; only the model graph changes.
    """
    corpus = resolve_corpus(config)
    scores = {name: [] for name, _ in ABLATION_VARIANTS}
    for seed in seeds:
        for name, flags in ABLATION_VARIANTS:
            cfg = config.replace(seed=int(seed)).with_ablation(**flags)
            run_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            trainer = Trainer.create(cfg, corpus)
            trainer.fit(run_dir)
            scores[name].append(trainer.best_val_f1)
        emit(f"seed {seed}: " + "  ".join(f"{n}={scores[n][-1]:.4f}" for n, _ in ABLATION_VARIANTS))
    return scores


def ablation_table(scores: dict, seeds) -> str:
    names = [n for n, _ in ABLATION_VARIANTS]
    lines = ["seed\t" + "\t".join(names)]
    for i, seed in enumerate(seeds):
        lines.append(f"{seed}\t" + "\t".join(f"{scores[n][i]:.4f}" for n in names))
    lines.append("mean\t" + "\t".join(f"{np.mean(scores[n]):.4f}" for n in names))
    for n in names[1:]:
        wins = sum(f > a for f, a in zip(scores["full"], scores[n]))
        lines.append(f"# full > {n} on {wins}/{len(seeds)} seeds")
    return "\n".join(lines) + "\n"
