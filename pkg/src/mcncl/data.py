"""Multimodal dialogue corpora: data model, synthetic generator, file container, ingestion.

Random numbers come from numpy's PCG64 bit generator seeded with the corpus
seed, so a (spec, seed) pair always yields the same bytes.

Container layout (all integers and floats little-endian)::

    magic      8 bytes   b"MCNCORP\\0"
    version    u16
    K, text_dim, audio_dim, visual_dim, n_dialogues     5 x u32
    seed       i64       (-1 when unknown)
    index      n_dialogues x (dialogue_id u64, split u8, n_utterances u32, offset u64, nbytes u64)
    payload    per utterance: speaker u32, label u32, n_frames u32,
               text f8[text_dim], audio f8[audio_dim], visual f8[n_frames * visual_dim]

A JSON manifest with counts, class histogram, dims and seed sits beside it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mcncl.nn import Affine
from mcncl.numcore import ShapeError, TapeTensor, constant

SPLITS = ("train", "val", "test")
SIGNALS = ("static", "dynamics")
MAGIC = b"MCNCORP\x00"
FORMAT_VERSION = 1

_HEAD = struct.Struct("<8sH5Iq")
_INDEX = struct.Struct("<QBIQQ")
_UTT = struct.Struct("<3I")


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    speaker: int
    label: int
    text: np.ndarray  # (text_dim,)
    audio: np.ndarray  # (audio_dim,)
    visual: np.ndarray  # (L, visual_dim)

    @property
    def n_frames(self) -> int:
        return self.visual.shape[0]


@dataclass
class DialogueSample:
    dialogue_id: int
    utterances: list

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)

    def validate(self, num_classes: int, text_dim: int, audio_dim: int, visual_dim: int) -> None:
        if not self.utterances:
            raise ValueError(f"dialogue {self.dialogue_id} has no utterances")
        for i, u in enumerate(self.utterances):
            where = f"dialogue {self.dialogue_id} utterance {i}"
            if not 0 <= u.label < num_classes:
                raise ValueError(f"{where}: label {u.label} outside 0..{num_classes - 1}")
            if u.text.shape != (text_dim,) or u.audio.shape != (audio_dim,):
                raise ShapeError(f"{where}: text/audio shapes {u.text.shape}, {u.audio.shape}")
            if u.visual.ndim != 2 or u.visual.shape[1] != visual_dim or u.visual.shape[0] < 1:
                raise ShapeError(f"{where}: visual clip shape {u.visual.shape}")
            for arr in (u.text, u.audio, u.visual):
                if not np.isfinite(arr).all():
                    raise ValueError(f"{where}: non-finite feature value")


@dataclass
class Corpus:
    num_classes: int
    text_dim: int
    audio_dim: int
    visual_dim: int
    splits: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    seed: Optional[int] = None

    def __getitem__(self, split: str) -> list:
        return self.splits[split]

    def utterance_count(self, split: str) -> int:
        return sum(len(d) for d in self.splits[split])

    def labels(self, split: str) -> np.ndarray:
        ds = self.splits[split]
        return np.concatenate([d.labels for d in ds]) if ds else np.zeros(0, dtype=np.int64)

    def validate(self) -> None:
        seen = set()
        for split in SPLITS:
            for d in self.splits[split]:
                if d.dialogue_id in seen:
                    raise ValueError(f"dialogue id {d.dialogue_id} appears twice")
                seen.add(d.dialogue_id)
                d.validate(self.num_classes, self.text_dim, self.audio_dim, self.visual_dim)

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "num_classes": self.num_classes,
            "dims": {"text": self.text_dim, "audio": self.audio_dim, "visual": self.visual_dim},
            "seed": self.seed,
            "splits": {
                s: {
                    "dialogues": len(self.splits[s]),
                    "utterances": self.utterance_count(s),
                    "class_histogram": np.bincount(self.labels(s), minlength=self.num_classes).tolist(),
                }
                for s in SPLITS
            },
        }


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    """Recipe for a synthetic corpus.

    ``signal="static"``: each utterance draws its own label; all three modalities
    are noisy linear views of a class-conditional latent vector, and each
    modality only sees two thirds of the latent coordinates.

    ``signal="dynamics"``: every utterance of a dialogue shares one label, text
    and audio are pure noise, and the visual clip encodes the class
    only as the direction of a zero-mean linear trend across frames. A frame
    average therefore carries no class signal, and one utterance alone is a
    weak witness that improves when evidence is pooled over the dialogue.
    """

    dialogues: tuple = (40, 8, 8)
    utterances_per_dialogue: tuple = (6, 14)
    num_classes: int = 6
    class_prior: Optional[tuple] = None
    separation: float = 3.0
    noise_text: float = 1.0
    noise_audio: float = 1.0
    noise_visual: float = 1.0
    text_dim: int = 768
    audio_dim: int = 512
    visual_dim: int = 1000
    frames: tuple = (4, 12)
    latent_dim: int = 16
    num_speakers: int = 2
    signal: str = "static"
    min_support: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dialogues", tuple(int(v) for v in self.dialogues))
        object.__setattr__(self, "utterances_per_dialogue", tuple(int(v) for v in self.utterances_per_dialogue))
        object.__setattr__(self, "frames", tuple(int(v) for v in self.frames))
        if self.class_prior is not None:
            object.__setattr__(self, "class_prior", tuple(float(p) for p in self.class_prior))
        if len(self.dialogues) != 3 or min(self.dialogues) < 0 or self.dialogues[0] < 1:
            raise ValueError("dialogues must be (train, val, test) counts with at least one train dialogue")
        lo, hi = self.utterances_per_dialogue
        if not 1 <= lo <= hi:
            raise ValueError("utterances_per_dialogue must satisfy 1 <= min <= max")
        flo, fhi = self.frames
        if not 1 <= flo <= fhi:
            raise ValueError("frames must satisfy 1 <= min <= max")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        prior = self.prior
        if prior.shape != (self.num_classes,) or (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("class_prior must be K non-negative entries summing to 1")
        if self.min_support > 0 and (prior == 0).any():
            raise ValueError("class_prior has a zero-probability class but min_support > 0 was requested")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if min(self.noise_text, self.noise_audio, self.noise_visual) < 0:
            raise ValueError("noise levels must be >= 0")
        if min(self.text_dim, self.audio_dim, self.visual_dim, self.latent_dim, self.num_speakers) < 1:
            raise ValueError("dims, latent_dim and num_speakers must be positive")
        if self.signal not in SIGNALS:
            raise ValueError(f"signal must be one of {SIGNALS}")
        if self.signal == "dynamics" and self.frames[0] < 2:
            raise ValueError("dynamics signal needs at least two frames per clip")

    @property
    def prior(self) -> np.ndarray:
        if self.class_prior is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.class_prior, dtype=np.float64)


def _modality_masks(latent_dim: int) -> dict:
    idx = np.arange(latent_dim)
    return {m: (idx % 3 != i).astype(np.float64) for i, m in enumerate(("text", "audio", "visual"))}


def _draw_labels(spec: CorpusSpec, rng: np.random.Generator, sizes: list) -> list:
    prior = spec.prior
    if spec.signal == "dynamics":
        return [np.full(n, rng.choice(spec.num_classes, p=prior), dtype=np.int64) for n in sizes]
    return [rng.choice(spec.num_classes, size=n, p=prior).astype(np.int64) for n in sizes]


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    K, latent = spec.num_classes, spec.latent_dim
    directions = rng.standard_normal((K, latent))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    proj = {
        "text": rng.standard_normal((latent, spec.text_dim)) / np.sqrt(latent),
        "audio": rng.standard_normal((latent, spec.audio_dim)) / np.sqrt(latent),
        "visual": rng.standard_normal((latent, spec.visual_dim)) / np.sqrt(latent),
    }
    masks = _modality_masks(latent)
    means = spec.separation * directions

    n_dialogues = sum(spec.dialogues)
    lo, hi = spec.utterances_per_dialogue
    sizes = [int(n) for n in rng.integers(lo, hi + 1, size=n_dialogues)]
    n_train = spec.dialogues[0]
    for _ in range(100):
        labels = _draw_labels(spec, rng, sizes)
        train_counts = np.bincount(np.concatenate(labels[:n_train]), minlength=K)
        if train_counts.min() >= spec.min_support:
            break
    else:
        raise ValueError(f"could not reach min_support={spec.min_support} in 100 label draws")

    corpus = Corpus(K, spec.text_dim, spec.audio_dim, spec.visual_dim, seed=spec.seed)
    split_of = np.repeat(np.arange(3), spec.dialogues)
    flo, fhi = spec.frames
    for d, (n_utt, lab) in enumerate(zip(sizes, labels)):
        utts = []
        for u in range(n_utt):
            y = int(lab[u])
            L = int(rng.integers(flo, fhi + 1))
            speaker = int(rng.integers(spec.num_speakers))
            if spec.signal == "static":
                z = means[y] + rng.standard_normal(latent)
                text = (masks["text"] * z) @ proj["text"]
                audio = (masks["audio"] * z) @ proj["audio"]
                static = (masks["visual"] * z) @ proj["visual"]
                visual = np.broadcast_to(static, (L, spec.visual_dim)).copy()
            else:
                text = np.zeros(spec.text_dim)
                audio = np.zeros(spec.audio_dim)
                static = rng.standard_normal(latent) @ proj["visual"]
                ramp = np.linspace(-1.0, 1.0, L)
                trend = means[y] @ proj["visual"]
                visual = static[None, :] + ramp[:, None] * trend[None, :]
            text = text + spec.noise_text * rng.standard_normal(spec.text_dim)
            audio = audio + spec.noise_audio * rng.standard_normal(spec.audio_dim)
            visual = visual + spec.noise_visual * rng.standard_normal((L, spec.visual_dim))
            utts.append(Utterance(speaker, y, text, audio, visual))
        corpus.splits[SPLITS[split_of[d]]].append(DialogueSample(d, utts))
    return corpus


# ---------------------------------------------------------------------------
# file container
# ---------------------------------------------------------------------------


class CorpusFormatError(Exception):
    code = "E_FORMAT"


class MalformedHeaderError(CorpusFormatError):
    code = "E_HEADER"


class UnsupportedVersionError(CorpusFormatError):
    code = "E_VERSION"


class TruncatedDataError(CorpusFormatError):
    code = "E_LENGTH"


class DimensionMismatchError(CorpusFormatError):
    code = "E_DIM"


def _f8(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def corpus_bytes(corpus: Corpus) -> bytes:
    corpus.validate()
    entries = [(s, d) for s in SPLITS for d in corpus.splits[s]]
    blocks = []
    for _, d in entries:
        parts = []
        for u in d.utterances:
            parts.append(_UTT.pack(u.speaker, u.label, u.n_frames))
            parts.extend([_f8(u.text), _f8(u.audio), _f8(u.visual)])
        blocks.append(b"".join(parts))
    seed = -1 if corpus.seed is None else int(corpus.seed)
    head = _HEAD.pack(
        MAGIC, FORMAT_VERSION, corpus.num_classes, corpus.text_dim, corpus.audio_dim,
        corpus.visual_dim, len(entries), seed,
    )
    offset = _HEAD.size + _INDEX.size * len(entries)
    index = []
    for (split, d), block in zip(entries, blocks):
        index.append(_INDEX.pack(d.dialogue_id, SPLITS.index(split), len(d), offset, len(block)))
        offset += len(block)
    return head + b"".join(index) + b"".join(blocks)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(corpus_bytes(corpus))
    manifest_path(path).write_text(json.dumps(corpus.manifest(), indent=2, sort_keys=True) + "\n")
    return path


def parse_corpus(buf: bytes, expected_classes: Optional[int] = None, expected_dims: Optional[dict] = None) -> Corpus:
    if len(buf) < _HEAD.size:
        raise MalformedHeaderError(f"file is {len(buf)} bytes, shorter than the {_HEAD.size}-byte header")
    magic, version, K, dt, da, dv, n_dialogues, seed = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"container version {version}, this reader handles {FORMAT_VERSION}")
    if K < 2 or min(dt, da, dv) < 1:
        raise MalformedHeaderError(f"implausible header: K={K}, dims=({dt}, {da}, {dv})")
    if expected_classes is not None and K != expected_classes:
        raise DimensionMismatchError(f"corpus has K={K} classes, run expects {expected_classes}")
    if expected_dims:
        actual = {"text": dt, "audio": da, "visual": dv}
        for key, want in expected_dims.items():
            if want is not None and actual[key] != want:
                raise DimensionMismatchError(f"corpus {key} dim is {actual[key]}, run expects {want}")
    index_end = _HEAD.size + _INDEX.size * n_dialogues
    if len(buf) < index_end:
        raise TruncatedDataError(f"index needs {index_end} bytes, file has {len(buf)}")
    corpus = Corpus(K, dt, da, dv, seed=None if seed == -1 else seed)
    expected_offset = index_end
    for n in range(n_dialogues):
        did, split, n_utt, offset, nbytes = _INDEX.unpack_from(buf, _HEAD.size + n * _INDEX.size)
        if split >= len(SPLITS) or offset != expected_offset:
            raise MalformedHeaderError(f"corrupt index entry {n}")
        if offset + nbytes > len(buf):
            raise TruncatedDataError(f"dialogue {did} runs past end of file ({offset + nbytes} > {len(buf)})")
        pos, utts = offset, []
        for _ in range(n_utt):
            if pos + _UTT.size > offset + nbytes:
                raise TruncatedDataError(f"dialogue {did} block too short")
            speaker, label, L = _UTT.unpack_from(buf, pos)
            pos += _UTT.size
            count = dt + da + L * dv
            if pos + 8 * count > offset + nbytes:
                raise TruncatedDataError(f"dialogue {did} block too short")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            utts.append(Utterance(speaker, label, arr[:dt], arr[dt : dt + da], arr[dt + da :].reshape(L, dv)))
        if pos != offset + nbytes:
            raise MalformedHeaderError(f"dialogue {did} block length disagrees with its contents")
        corpus.splits[SPLITS[split]].append(DialogueSample(did, utts))
        expected_offset = offset + nbytes
    if expected_offset != len(buf):
        raise MalformedHeaderError(f"{len(buf) - expected_offset} trailing bytes after last dialogue")
    corpus.validate()
    return corpus


def load_corpus(path, expected_classes: Optional[int] = None, expected_dims: Optional[dict] = None) -> Corpus:
    return parse_corpus(Path(path).read_bytes(), expected_classes, expected_dims)


# ---------------------------------------------------------------------------
# ingestion and batching
# ---------------------------------------------------------------------------


@dataclass
class IngestionParams:
    """Learned affine maps taking raw modality features to the model width."""

    text: Affine
    audio: Affine
    visual: Affine

    @classmethod
    def init(cls, rng, text_dim: int, audio_dim: int, visual_dim: int, dim: int) -> "IngestionParams":
        return cls(Affine.init(rng, text_dim, dim), Affine.init(rng, audio_dim, dim), Affine.init(rng, visual_dim, dim))


def ingest_raw_features(text, audio, frames, params: IngestionParams) -> tuple:
    """Project (n, text_dim), (n, audio_dim) and stacked frames (F, visual_dim) to model width."""
    text, audio, frames = constant(text), constant(audio), constant(frames)
    for name, x, aff in (("text", text, params.text), ("audio", audio, params.audio), ("visual", frames, params.visual)):
        if x.values.ndim != 2 or x.shape[1] != aff.d_in:
            raise ShapeError(f"{name} features have shape {x.shape}, projection expects width {aff.d_in}")
    if text.shape[0] != audio.shape[0]:
        raise ShapeError("text and audio must have one row per utterance")
    return params.text(text), params.audio(audio), params.visual(frames)


@dataclass
class Batch:
    text: np.ndarray
    audio: np.ndarray
    frames: np.ndarray  # all clips stacked along time
    frame_lengths: tuple
    labels: np.ndarray
    dialogue_of: np.ndarray  # batch-local dialogue index per utterance
    dialogue_ids: tuple

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def attention_mask(self) -> np.ndarray:
        return self.dialogue_of[:, None] == self.dialogue_of[None, :]


def make_batch(dialogues: Sequence[DialogueSample]) -> Batch:
    utts = [u for d in dialogues for u in d.utterances]
    if not utts:
        raise ValueError("empty batch")
    return Batch(
        text=np.stack([u.text for u in utts]),
        audio=np.stack([u.audio for u in utts]),
        frames=np.concatenate([u.visual for u in utts], axis=0),
        frame_lengths=tuple(u.n_frames for u in utts),
        labels=np.array([u.label for u in utts], dtype=np.int64),
        dialogue_of=np.repeat(np.arange(len(dialogues)), [len(d) for d in dialogues]),
        dialogue_ids=tuple(d.dialogue_id for d in dialogues),
    )


def pack_dialogues(dialogues: Sequence[DialogueSample], batch_size: int) -> list:
    """Group whole dialogues, in order, into batches of roughly ``batch_size`` utterances."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    groups, current, count = [], [], 0
    for d in dialogues:
        if current and count + len(d) > batch_size:
            groups.append(current)
            current, count = [], 0
        current.append(d)
        count += len(d)
    if current:
        groups.append(current)
    return groups


def spec_to_dict(spec: CorpusSpec) -> dict:
    out = asdict(spec)
    for key in ("dialogues", "utterances_per_dialogue", "frames"):
        out[key] = list(out[key])
    if out["class_prior"] is not None:
        out["class_prior"] = list(out["class_prior"])
    return out
