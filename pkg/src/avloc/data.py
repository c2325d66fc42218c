"""Sequence/label data model, segment-level feature aggregation, synthetic
dataset generation, and the binary feature-file format.

A sequence is T one-second segments; each segment carries R spatial video
feature vectors and one audio feature vector plus a one-hot class label
(background is itself a class). The binary event vector marks segments
whose class is not background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"AVEF"
FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.txt"

_U32_MAX = 2**32 - 1
_U16_MAX = 2**16 - 1


class FeatureFileError(Exception):
    """Malformed or unreadable feature file."""


def derive_event_labels(y: np.ndarray, background_class: int) -> np.ndarray:
    """Binary event vector: 1 where the one-hot row is not background."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=1) == 1.0):
        raise ValueError("labels must be one-hot rows")
    if not 0 <= background_class < y.shape[1]:
        raise ValueError(f"background class {background_class} outside [0, {y.shape[1]})")
    return (np.argmax(y, axis=1) != background_class).astype(np.float64)


@dataclass
class AveLabels:
    """One-hot per-segment class matrix plus the derived event vector."""

    y: np.ndarray
    background_class: int
    event: np.ndarray = field(init=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.event = derive_event_labels(self.y, self.background_class)

    @classmethod
    def from_classes(cls, classes, n_classes: int, background_class: int) -> "AveLabels":
        classes = np.asarray(classes, dtype=np.int64)
        if np.any(classes < 0) or np.any(classes >= n_classes):
            raise ValueError(f"class indices out of range [0, {n_classes})")
        y = np.zeros((classes.size, n_classes))
        y[np.arange(classes.size), classes] = 1.0
        return cls(y, background_class)

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.y, axis=1)

    @property
    def n_classes(self) -> int:
        return self.y.shape[1]


@dataclass
class AveSequence:
    """Per-video feature arrays: video (T, R, Dv), audio (T, Da), labels."""

    id: str
    video_feats: np.ndarray
    audio_feats: np.ndarray
    labels: AveLabels

    def __post_init__(self):
        self.video_feats = np.asarray(self.video_feats, dtype=np.float64)
        self.audio_feats = np.asarray(self.audio_feats, dtype=np.float64)
        t = self.video_feats.shape[0]
        if self.video_feats.ndim != 3:
            raise ValueError(f"video features must be (T, R, Dv), got {self.video_feats.shape}")
        if self.audio_feats.ndim != 2 or self.audio_feats.shape[0] != t:
            raise ValueError("audio features must be (T, Da) sharing T with video")
        if self.labels.y.shape[0] != t or t < 1:
            raise ValueError("labels must share T >= 1 with features")

    @property
    def t_len(self) -> int:
        return self.video_feats.shape[0]


def mean_segment_features(frame_feats: list[np.ndarray]) -> np.ndarray:
    """Average each segment's per-frame features into one row per segment."""
    if not frame_feats:
        raise ValueError("no segments given")
    rows = []
    width = None
    for t, frames in enumerate(frame_feats):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"segment {t} must be a non-empty (P, D) array")
        if width is None:
            width = frames.shape[1]
        elif frames.shape[1] != width:
            raise ValueError(f"segment {t} width {frames.shape[1]} != {width}")
        rows.append(frames.mean(axis=0))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Extents, noise level, and span constraints for generated sequences.

    Everything downstream of (config, seed) is deterministic. Inside an
    event span both modalities carry the event class's signature; outside
    it the audio keeps carrying the signature while the video falls back
    to the background signature (audible but not visible).
    """

    t_len: int = 10
    n_classes: int = 6
    video_width: int = 64
    audio_width: int = 64
    regions: int = 4
    n_sequences: int = 100
    noise_sigma: float = 0.3
    min_span: int = 3
    max_span: int = 8
    background_class: int = 0
    seed: int = 0
    # train/val splits of one world must share signatures: give them the same
    # signature_seed and different seeds (None reuses `seed`)
    signature_seed: int | None = None

    def __post_init__(self):
        if not (1 <= self.min_span <= self.max_span <= self.t_len):
            raise ValueError(
                f"span bounds must satisfy 1 <= {self.min_span} <= {self.max_span} <= T={self.t_len}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.background_class < self.n_classes:
            raise ValueError("background class out of range")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class ClassSignatures:
    """Unit-norm prototype vectors per class for both modalities."""

    video: np.ndarray  # (C, Dv); the background row is the no-event appearance
    audio: np.ndarray  # (C, Da)


def class_signatures(cfg: SynthConfig) -> ClassSignatures:
    sig_seed = cfg.seed if cfg.signature_seed is None else cfg.signature_seed
    rng = np.random.default_rng(np.random.SeedSequence([sig_seed, 0]))
    def unit_rows(n, d):
        m = rng.normal(size=(n, d))
        return m / np.linalg.norm(m, axis=1, keepdims=True)
    return ClassSignatures(video=unit_rows(cfg.n_classes, cfg.video_width),
                           audio=unit_rows(cfg.n_classes, cfg.audio_width))


def _f32_round(x: np.ndarray) -> np.ndarray:
    # features are stored as float32 on disk; quantize at generation time so
    # write/read round trips are bit-exact
    return x.astype(np.float32).astype(np.float64)


def make_sequence(cfg: SynthConfig, sigs: ClassSignatures, seq_id: str,
                  rng: np.random.Generator, event_class: int,
                  span: tuple[int, int]) -> AveSequence:
    """One sequence with the given event class active on [span). An empty
    span yields a pure-background sequence whose audio still carries the
    (never visible) event class."""
    start, stop = span
    classes = np.full(cfg.t_len, cfg.background_class, dtype=np.int64)
    classes[start:stop] = event_class

    video = np.empty((cfg.t_len, cfg.regions, cfg.video_width))
    audio = np.empty((cfg.t_len, cfg.audio_width))
    for t in range(cfg.t_len):
        vid_sig = sigs.video[classes[t]]
        for r in range(cfg.regions):
            video[t, r] = vid_sig + cfg.noise_sigma * rng.normal(size=cfg.video_width)
        audio[t] = sigs.audio[event_class] + cfg.noise_sigma * rng.normal(size=cfg.audio_width)

    labels = AveLabels.from_classes(classes, cfg.n_classes, cfg.background_class)
    return AveSequence(seq_id, _f32_round(video), _f32_round(audio), labels)


def synth_dataset(cfg: SynthConfig) -> list[AveSequence]:
    """Generate `cfg.n_sequences` sequences, each with one event class on a
    single contiguous span; fully determined by `cfg.seed`."""
    sigs = class_signatures(cfg)
    event_classes = [c for c in range(cfg.n_classes) if c != cfg.background_class]
    seqs = []
    for i in range(cfg.n_sequences):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, i]))
        event_class = event_classes[rng.integers(len(event_classes))]
        length = int(rng.integers(cfg.min_span, cfg.max_span + 1))
        start = int(rng.integers(0, cfg.t_len - length + 1))
        seqs.append(make_sequence(cfg, sigs, f"synth-{cfg.seed}-{i:05d}", rng,
                                  event_class, (start, start + length)))
    return seqs


def nearest_signature_accuracy(seqs: list[AveSequence], sigs: ClassSignatures) -> float:
    """Per-segment accuracy of the trivial classifier that assigns each
    segment the class whose video signature is nearest to the region-mean
    video feature. Used to calibrate dataset difficulty."""
    correct = 0
    total = 0
    for seq in seqs:
        mean_video = seq.video_feats.mean(axis=1)
        d2 = ((mean_video[:, None, :] - sigs.video[None, :, :]) ** 2).sum(axis=2)
        pred = np.argmin(d2, axis=1)
        correct += int(np.sum(pred == seq.labels.classes))
        total += seq.t_len
    return correct / total


# ---------------------------------------------------------------------------
# feature-file IO
# ---------------------------------------------------------------------------


def write_features(path, seq: AveSequence) -> None:
    """Binary little-endian layout: magic, version, six u32 extents, then
    float32 video, float32 audio, u16 per-segment class labels."""
    t, r, dv = seq.video_feats.shape
    da = seq.audio_feats.shape[1]
    c = seq.labels.n_classes
    for name, value in (("T", t), ("R", r), ("Dv", dv), ("Da", da), ("C", c),
                        ("background_class", seq.labels.background_class)):
        if not 0 <= value <= _U32_MAX:
            raise FeatureFileError(f"{name}={value} does not fit in u32")
    classes = seq.labels.classes
    if np.any(classes > _U16_MAX):
        raise FeatureFileError("class indices do not fit in u16")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<7I", FEATURE_VERSION, t, r, dv, da, c,
                             seq.labels.background_class))
        fh.write(seq.video_feats.astype("<f4").tobytes())
        fh.write(seq.audio_feats.astype("<f4").tobytes())
        fh.write(classes.astype("<u2").tobytes())


def read_features(path) -> AveSequence:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < 4 + 7 * 4:
        raise FeatureFileError(f"{path}: truncated header")
    version, t, r, dv, da, c, background = struct.unpack_from("<7I", raw, 4)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: format version {version}, expected {FEATURE_VERSION}")
    offset = 4 + 7 * 4
    n_video = t * r * dv
    n_audio = t * da
    expected = offset + 4 * (n_video + n_audio) + 2 * t
    if len(raw) != expected:
        raise FeatureFileError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    video = np.frombuffer(raw, dtype="<f4", count=n_video, offset=offset)
    offset += 4 * n_video
    audio = np.frombuffer(raw, dtype="<f4", count=n_audio, offset=offset)
    offset += 4 * n_audio
    classes = np.frombuffer(raw, dtype="<u2", count=t, offset=offset).astype(np.int64)
    if np.any(classes >= c):
        raise FeatureFileError(f"{path}: class label outside [0, {c})")
    labels = AveLabels.from_classes(classes, c, background)
    return AveSequence(path.stem, video.astype(np.float64).reshape(t, r, dv),
                       audio.astype(np.float64).reshape(t, da), labels)


def write_dataset(dirpath, seqs: list[AveSequence]) -> Path:
    """A directory of .avef files plus a manifest listing them in order."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    names = []
    for seq in seqs:
        name = f"{seq.id}.avef"
        write_features(dirpath / name, seq)
        names.append(name)
    (dirpath / MANIFEST_NAME).write_text("".join(n + "\n" for n in names))
    return dirpath


def read_dataset(dirpath) -> list[AveSequence]:
    dirpath = Path(dirpath)
    manifest = dirpath / MANIFEST_NAME
    if not manifest.exists():
        raise FeatureFileError(f"{dirpath}: missing {MANIFEST_NAME}")
    seqs = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if line:
            seqs.append(read_features(dirpath / line))
    return seqs
