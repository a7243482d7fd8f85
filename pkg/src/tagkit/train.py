"""Training loop: Adam, plateau lr decay, early stopping, best-val checkpoint."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp
from .data import DatasetError, DatasetSplit
from .model import (AudioEncoderConfig, GroundingModel, Vocabulary, bce_loss, frames_from_segments,
                    pad_features, similarity)
from .tensor import core as tc
from .tensor.core import Tensor
from .tensor.optim import AdamState, adam_step, zero_grads

log = logging.getLogger(__name__)

IMPROVE_EPS = 1e-6


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    lr: float = 0.001
    lr_reduce_patience: int = 5
    lr_reduce_factor: float = 0.1
    early_stop_patience: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.early_stop_patience < self.lr_reduce_patience:
            raise ValueError("early_stop_patience must be >= lr_reduce_patience")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


@dataclass
class Sample:
    clip_id: str
    mel: dsp.MelSpectrogram
    phrase: str
    labels: np.ndarray


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: GroundingModel
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e in self.history:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])
        return buf.getvalue()


def clip_features(ds: DatasetSplit) -> dict[str, dsp.MelSpectrogram]:
    return {c.audio_id: dsp.log_mel(dsp.read_wav(ds.resolve(c))) for c in ds.clips}


def build_samples(ds: DatasetSplit, features: dict[str, dsp.MelSpectrogram] | None = None) -> list[Sample]:
    """One Sample per (clip, phrase), labelled on the 20 ms frame grid."""
    features = clip_features(ds) if features is None else features
    out = []
    for c in ds.clips:
        mel = features[c.audio_id]
        T = mel.num_frames
        dur = c.duration_s if c.duration_s is not None else T * dsp.HOP_S + (dsp.WIN_S - dsp.HOP_S)
        for p in c.phrases:
            for on, off in p.segments:
                if off > dur + 1e-9:
                    raise DatasetError(f"{c.audio_id}: segment ({on}, {off}) of {p.text!r} "
                                       f"beyond clip duration {dur:.3f}s")
            out.append(Sample(c.audio_id, mel, p.text, frames_from_segments(p.segments, T)))
    return out


def batch_loss(model: GroundingModel, batch: list[Sample], training: bool) -> Tensor:
    """Mean over samples of frame-averaged BCE; each distinct clip is encoded once."""
    clip_ids = list(dict.fromkeys(s.clip_id for s in batch))
    pos = {cid: i for i, cid in enumerate(clip_ids)}
    mels = {s.clip_id: s.mel.frames for s in batch}
    feats, lengths = pad_features([mels[c] for c in clip_ids])
    e_audio = model.encode_audio(feats, lengths, training=training)
    rows = np.array([pos[s.clip_id] for s in batch])
    if len(clip_ids) != len(batch) or np.any(np.diff(rows) != 1):
        e_audio = e_audio[rows]
    e_phrase = model.encode_phrase([model.vocab.encode(s.phrase) for s in batch])
    scores = similarity(e_audio, e_phrase)
    T = feats.shape[1]
    labels = np.zeros((len(batch), T))
    for i, s in enumerate(batch):
        labels[i, :len(s.labels)] = s.labels
    mask = np.arange(T)[None, :] < lengths[rows][:, None]
    return bce_loss(scores, labels, mask)


def train_step(model: GroundingModel, batch: list[Sample], opt: AdamState, lr: float) -> float:
    zero_grads(model.params)
    loss = batch_loss(model, batch, training=True)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss {value} on clips "
                           f"{sorted({s.clip_id for s in batch})}")
    tc.backward(loss)
    adam_step(model.params, opt, lr)
    return value


def evaluate_loss(model: GroundingModel, samples: list[Sample], batch_size: int = 8) -> float:
    total = 0.0
    with tc.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            total += float(batch_loss(model, chunk, training=False).data) * len(chunk)
    return total / len(samples)


def epoch_batches(samples: list[Sample], rng: np.random.Generator, batch_size: int) -> list[list[Sample]]:
    """Shuffle clips, then their phrases, and cut the resulting order into batches.

    Keeping a clip's phrases adjacent lets a batch share one audio encoding.
    """
    by_clip: dict[str, list[Sample]] = {}
    for s in samples:
        by_clip.setdefault(s.clip_id, []).append(s)
    order = []
    for cid in rng.permutation(sorted(by_clip)):
        group = by_clip[str(cid)]
        order.extend(group[j] for j in rng.permutation(len(group)))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def build_vocab(ds: DatasetSplit) -> Vocabulary:
    return Vocabulary.from_texts([c.caption for c in ds.clips] + [p.text for c in ds.clips for p in c.phrases])


def train(train_samples: list[Sample], val_samples: list[Sample], vocab: Vocabulary,
          cfg: TrainConfig = TrainConfig(), model_cfg: AudioEncoderConfig = AudioEncoderConfig(),
          progress=None) -> TrainResult:
    """Fit a fresh model and return the checkpoint with the lowest validation loss."""
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must be non-empty")
    log.info("run header: %s", asdict(cfg))
    rng = np.random.default_rng(cfg.seed)
    model = GroundingModel(vocab, model_cfg, seed=cfg.seed)
    opt = AdamState()
    lr = cfg.lr
    result = TrainResult(model)
    best_records = model.state_records()
    stale = stale_lr = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for batch in epoch_batches(train_samples, rng, cfg.batch_size):
            total += train_step(model, batch, opt, lr) * len(batch)
        train_loss = total / len(train_samples)
        val_loss = evaluate_loss(model, val_samples, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        result.history.append(EpochLog(epoch, train_loss, val_loss, lr))
        log.info("epoch %d train %.5f val %.5f lr %g (%.1fs)", epoch, train_loss, val_loss, lr,
                 time.perf_counter() - t0)
        if progress is not None:
            progress(result.history[-1])
        if val_loss < result.best_val_loss - IMPROVE_EPS:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            best_records = model.state_records()
            stale = stale_lr = 0
        else:
            stale += 1
            stale_lr += 1
            if stale >= cfg.early_stop_patience:
                break
            if stale_lr >= cfg.lr_reduce_patience:
                lr *= cfg.lr_reduce_factor
                stale_lr = 0
    result.model = GroundingModel.from_records(best_records)
    return result
