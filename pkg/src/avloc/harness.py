"""End-to-end model assembly, training loop, evaluation, ablation grids,
and binary checkpointing.

The forward path per sequence: audio-guided pooling of video regions, one
BiLSTM per modality, channel concat into the aggregate feature F,
multi-window fusion, event gate, masked refinement, per-segment classifier.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numkit as nk
from .data import AveSequence
from .layers import AgvaParams, BiLstmParams, agva, bilstm
from .losses import hybrid_loss
from .mwtf import (FusionConfig, LayoutError, create_fusion_params, load_fusion_params,
                   mwtf_forward, parse_layouts)
from .numkit import NonFiniteError, ParamStore, ShapeError, Tensor
from .postproc import locality_filter
from .refine import RefineParams, apply_mask, egta, refine_classify

CHECKPOINT_MAGIC = b"AVEC"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable or malformed checkpoint file."""


class ConfigConflictError(CheckpointError):
    """Checkpoint config disagrees with the requested shapes."""


class TrainingDivergedError(Exception):
    """Loss became non-finite during optimization."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_DEFAULT_LAYOUTS = [[10], [5, 5], [3, 3, 4], [2, 2, 2, 2, 2]]


@dataclass
class PipelineConfig:
    """Everything that determines the model, its training run, and inference.

    The desk preset keeps every width at 1/4 of the full-scale model so the
    whole pipeline trains in minutes on a CPU; `full` matches the published
    shape grammar (F is T x 512, fusion width 256, 29 classes).
    """

    # data shapes
    t_len: int = 10
    n_classes: int = 6
    video_width: int = 64
    audio_width: int = 64
    regions: int = 4
    # model widths
    agva_width: int = 32
    lstm_hidden: int = 32      # each modality encoder emits 2*lstm_hidden channels
    fusion_width: int = 64
    gate_width: int = 64
    cls_width: int = 64
    # fusion structure
    fusion_layouts: list[list[int]] = field(default_factory=lambda: [list(l) for l in _DEFAULT_LAYOUTS])
    shared_weights: bool = True
    attention_mode: str = "multi_domain"
    refiner_layouts: list[list[int]] = field(default_factory=lambda: [[10]])
    refiner_shared: bool = True
    # loss
    lambda_event: float = 0.3
    lambda_class: float = 0.7
    # optimizer
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    stop_at_accuracy: float | None = None
    # inference
    post_window: int | None = 3
    seed: int = 0

    SHAPE_FIELDS = ("t_len", "n_classes", "video_width", "audio_width", "regions",
                    "agva_width", "lstm_hidden", "fusion_width", "gate_width", "cls_width")

    def __post_init__(self):
        if self.lambda_event < 0 or self.lambda_class < 0:
            raise ValueError("loss weights must be >= 0")
        self.fusion_config().check(self.t_len)
        self.refiner_config().check(self.t_len)

    @property
    def feature_width(self) -> int:
        return 4 * self.lstm_hidden

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(parse_layouts(self.fusion_layouts), self.fusion_width,
                            self.shared_weights, self.attention_mode)

    def refiner_config(self) -> FusionConfig:
        return FusionConfig(parse_layouts(self.refiner_layouts), self.fusion_width,
                            self.refiner_shared, self.attention_mode)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = preset_config(preset) if preset else cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return replace(base, **d)


def preset_config(name: str) -> PipelineConfig:
    if name == "desk":
        return PipelineConfig()
    if name == "full":
        return PipelineConfig(n_classes=29, video_width=1024, audio_width=1024,
                              agva_width=128, lstm_hidden=128, fusion_width=256,
                              gate_width=256, cls_width=256)
    raise ValueError(f"unknown preset {name!r}; expected 'desk' or 'full'")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Model:
    """Parameter store plus typed views, with the full forward pass."""

    def __init__(self, cfg: PipelineConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store
        self.agva_params = AgvaParams.from_store(store, "agva")
        self.av_lstm = BiLstmParams.from_store(store, "av_lstm", cfg.video_width,
                                               cfg.lstm_hidden)
        self.audio_lstm = BiLstmParams.from_store(store, "audio_lstm", cfg.audio_width,
                                                  cfg.lstm_hidden)
        self.fusion_cfg = cfg.fusion_config()
        self.fusion_params = load_fusion_params(store, "fusion", self.fusion_cfg)
        self.refiner_cfg = cfg.refiner_config()
        self.refine_params = RefineParams.from_store(
            store, "refine", self.fusion_cfg.output_width, cfg.gate_width,
            self.refiner_cfg, cfg.cls_width)

    @classmethod
    def create(cls, cfg: PipelineConfig) -> "Model":
        store = ParamStore(cfg.seed)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        AgvaParams.create(store, "agva", cfg.video_width, cfg.audio_width,
                          cfg.agva_width, rng)
        BiLstmParams.create(store, "av_lstm", cfg.video_width, cfg.lstm_hidden, rng)
        BiLstmParams.create(store, "audio_lstm", cfg.audio_width, cfg.lstm_hidden, rng)
        fusion_cfg = cfg.fusion_config()
        create_fusion_params(store, "fusion", cfg.feature_width, fusion_cfg, rng)
        RefineParams.create(store, "refine", fusion_cfg.output_width, cfg.gate_width,
                            cfg.refiner_config(), cfg.cls_width, cfg.n_classes, rng)
        store.finalize()
        return cls(cfg, store)

    def _check_sequence(self, seq: AveSequence) -> None:
        cfg = self.cfg
        t, r, dv = seq.video_feats.shape
        # the region count is data-dependent: region attention pools any R >= 1
        if (t, dv) != (cfg.t_len, cfg.video_width) or r < 1:
            raise ShapeError(f"input: video features {seq.video_feats.shape}, expected "
                             f"({cfg.t_len}, R>=1, {cfg.video_width})")
        ashape = (cfg.t_len, cfg.audio_width)
        if seq.audio_feats.shape != ashape:
            raise ShapeError(f"input: audio features {seq.audio_feats.shape}, expected {ashape}")
        if seq.labels.n_classes != cfg.n_classes:
            raise ShapeError(f"input: {seq.labels.n_classes} classes, expected {cfg.n_classes}")

    def forward(self, seq: AveSequence) -> tuple[Tensor, Tensor]:
        """Event gate (T, 1) and class probabilities (T, C)."""
        self._check_sequence(seq)
        video = nk.constant(seq.video_feats)
        audio = nk.constant(seq.audio_feats)

        def stage(name, fn, *args):
            try:
                return fn(*args)
            except (ShapeError, LayoutError) as exc:
                raise type(exc)(f"{name}: {exc}") from exc

        pooled = stage("agva", agva, video, audio, self.agva_params)
        v_enc = stage("video encoder", bilstm, pooled, self.av_lstm)
        a_enc = stage("audio encoder", bilstm, audio, self.audio_lstm)
        aggregate = stage("aggregate", nk.concat_cols, [v_enc, a_enc])
        fused = stage("fusion", mwtf_forward, aggregate, self.fusion_cfg, self.fusion_params)
        alpha = stage("event gate", egta, fused, self.refine_params)
        y_pred = stage("refine/classify", refine_classify,
                       apply_mask(fused, alpha), self.refine_params, self.refiner_cfg)
        return alpha, y_pred

    def loss(self, seq: AveSequence) -> tuple[Tensor, Tensor, Tensor]:
        alpha, y_pred = self.forward(seq)
        total = hybrid_loss(alpha, seq.labels.event, y_pred, seq.labels.y,
                            self.cfg.lambda_event, self.cfg.lambda_class)
        return total, alpha, y_pred

    def predict(self, seq: AveSequence) -> np.ndarray:
        """Per-segment argmax labels, graph-free."""
        with nk.no_grad():
            _, y_pred = self.forward(seq)
        return np.argmax(y_pred.data, axis=1)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a ParamStore.

    Runs on the store's flat arena when finalized (one vectorized update),
    falling back to per-tensor updates otherwise.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        if store.flat_data is not None:
            self._m = np.zeros_like(store.flat_data)
            self._v = np.zeros_like(store.flat_data)
        else:
            self._m = {name: np.zeros_like(p.data) for name, p in store.items()}
            self._v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def _update(self, data, grad, m, v, b1c, b2c) -> None:
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)
        data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        if self.store.flat_data is not None:
            self._update(self.store.flat_data, self.store.flat_grad, self._m, self._v,
                         b1c, b2c)
        else:
            for name, p in self.store.items():
                self._update(p.data, p.grad, self._m[name], self._v[name], b1c, b2c)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class TrainResult:
    model: "Model"
    history: list[EpochStats]
    epochs_run: int
    stopped_early: bool


def train(train_seqs: list[AveSequence], cfg: PipelineConfig,
          val_seqs: list[AveSequence] | None = None,
          metrics_path=None, log=None) -> TrainResult:
    """Minimize the hybrid loss with Adam, one sequence per step.

    Deterministic given cfg.seed: parameter init, per-epoch shuffling, and
    every numeric op. Stops early once validation accuracy reaches
    cfg.stop_at_accuracy, if set. A non-finite loss aborts with the
    offending epoch/sequence reported.
    """
    if not train_seqs:
        raise ValueError("training dataset is empty")
    model = Model.create(cfg)
    opt = Adam(model.store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))

    history: list[EpochStats] = []
    stopped = False
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_seqs))
        total_loss = 0.0
        correct = 0
        segments = 0
        for step, idx in enumerate(order):
            seq = train_seqs[idx]
            model.store.zero_grad()
            try:
                loss, _, y_pred = model.loss(seq)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}, sequence {seq.id}: {exc}"
                ) from exc
            loss.backward()
            opt.step()
            total_loss += loss.item()
            correct += int(np.sum(np.argmax(y_pred.data, axis=1) == seq.labels.classes))
            segments += seq.t_len
        val_acc = evaluate(model, val_seqs) if val_seqs else None
        stats = EpochStats(epoch, total_loss / len(train_seqs), correct / segments, val_acc)
        history.append(stats)
        if log:
            val_txt = "-" if val_acc is None else f"{val_acc:.4f}"
            log(f"epoch {epoch:3d}  loss {stats.train_loss:.5f}  "
                f"train acc {stats.train_accuracy:.4f}  val acc {val_txt}")
        if cfg.stop_at_accuracy is not None:
            reached = val_acc if val_acc is not None else stats.train_accuracy
            if reached >= cfg.stop_at_accuracy:
                stopped = True
                break

    if metrics_path is not None:
        write_metrics_csv(metrics_path, history)
    return TrainResult(model, history, len(history), stopped)


def write_metrics_csv(path, history: list[EpochStats]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_accuracy", "val_accuracy"])
        for s in history:
            writer.writerow([s.epoch, f"{s.train_loss:.10g}", f"{s.train_accuracy:.10g}",
                             "" if s.val_accuracy is None else f"{s.val_accuracy:.10g}"])


def evaluate(model: Model, seqs: list[AveSequence],
             post_window: int | None = None) -> float:
    """Per-segment accuracy of argmax predictions, optionally run through
    the locality filter first."""
    correct = 0
    total = 0
    for seq in seqs:
        pred = model.predict(seq)
        if post_window is not None:
            pred = locality_filter(pred, post_window)
        correct += int(np.sum(pred == seq.labels.classes))
        total += seq.t_len
    return correct / total


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: PipelineConfig
    tensors: dict[str, np.ndarray]
    metadata: dict
    version: int = CHECKPOINT_VERSION

    @classmethod
    def of_model(cls, model: Model, metadata: dict | None = None) -> "Checkpoint":
        tensors = {name: p.data.copy() for name, p in model.store.items()}
        return cls(model.cfg, tensors, metadata or {})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout: magic, u32 version, u32-length JSON blob holding the
    config snapshot and training metadata, then the named tensors as
    (u16 name length, name, u8 ndims, u32 dims..., float64 payload)."""
    blob = json.dumps({"config": ckpt.config.to_dict(), "metadata": ckpt.metadata},
                      sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    view = memoryview(raw)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")

    offset = 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        vals = struct.unpack_from(fmt, raw, offset)
        offset += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    (blob_len,) = take("<I")
    if offset + blob_len > len(raw):
        raise CheckpointError(f"{path}: truncated config blob")
    blob = json.loads(bytes(view[offset:offset + blob_len]))
    offset += blob_len
    config = PipelineConfig.from_dict(blob["config"])
    metadata = blob.get("metadata", {})

    (n_tensors,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = take("<H")
        if offset + name_len > len(raw):
            raise CheckpointError(f"{path}: truncated tensor name")
        name = bytes(view[offset:offset + name_len]).decode()
        offset += name_len
        (ndims,) = take("<B")
        dims = take(f"<{ndims}I")
        count = int(np.prod(dims)) if dims else 1
        size = 8 * count
        if offset + size > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(dims)
        tensors[name] = arr.astype(np.float64)
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(config, tensors, metadata, version)


def model_from_checkpoint(ckpt: Checkpoint,
                          expect: PipelineConfig | None = None) -> Model:
    """Rebuild a model with the checkpoint's parameters, bit-exactly."""
    if expect is not None:
        for name in PipelineConfig.SHAPE_FIELDS:
            if getattr(expect, name) != getattr(ckpt.config, name):
                raise ConfigConflictError(
                    f"checkpoint {name}={getattr(ckpt.config, name)} conflicts with "
                    f"requested {name}={getattr(expect, name)}")
    model = Model.create(ckpt.config)
    names = set(model.store.names())
    saved = set(ckpt.tensors)
    if names != saved:
        missing = sorted(names - saved)
        extra = sorted(saved - names)
        raise CheckpointError(f"tensor name mismatch: missing {missing}, unexpected {extra}")
    for name, arr in ckpt.tensors.items():
        dest = model.store[name]
        if dest.data.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r}: shape {arr.shape}, expected {dest.data.shape}")
        dest.data[...] = arr
    return model


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_HEADER = ("attention_mode", "fusion_layouts", "shared_weights",
                   "egta_supervision", "post_window", "val_accuracy")


def _layouts_label(layouts: list[list[int]]) -> str:
    return "+".join("(" + ",".join(str(w) for w in blocks) + ")" for blocks in layouts)


def ablate(base: PipelineConfig, train_seqs: list[AveSequence],
           val_seqs: list[AveSequence],
           attention_modes: list[str] | None = None,
           layout_sets: list[list[list[int]]] | None = None,
           shared_options: list[bool] | None = None,
           egta_supervision: list[bool] | None = None,
           post_windows: list[int | None] | None = None,
           log=None) -> list[dict]:
    """Train/evaluate one model per grid point; seeds held fixed across rows.

    Invalid combinations (e.g. a layout that does not tile T) are skipped
    with a warning. Returns one result dict per completed row.
    """
    attention_modes = attention_modes or [base.attention_mode]
    layout_sets = layout_sets or [base.fusion_layouts]
    shared_options = shared_options if shared_options is not None else [base.shared_weights]
    egta_supervision = egta_supervision if egta_supervision is not None else [True]
    post_windows = post_windows if post_windows is not None else [base.post_window]

    rows = []
    for mode in attention_modes:
        for layouts in layout_sets:
            for shared in shared_options:
                for supervised in egta_supervision:
                    try:
                        cfg = replace(base, attention_mode=mode,
                                      fusion_layouts=[list(l) for l in layouts],
                                      shared_weights=shared,
                                      lambda_event=base.lambda_event if supervised else 0.0)
                    except (LayoutError, ValueError) as exc:
                        warnings.warn(f"skipping invalid grid entry "
                                      f"{mode}/{_layouts_label(layouts)}: {exc}")
                        continue
                    result = train(train_seqs, cfg, val_seqs)
                    for window in post_windows:
                        acc = evaluate(result.model, val_seqs, post_window=window)
                        row = {"attention_mode": mode,
                               "fusion_layouts": _layouts_label(layouts),
                               "shared_weights": shared,
                               "egta_supervision": supervised,
                               "post_window": "" if window is None else window,
                               "val_accuracy": acc}
                        rows.append(row)
                        if log:
                            log(" ".join(f"{k}={v}" for k, v in row.items()))
    return rows


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
