"""CRNN audio encoder + mean word-embedding phrase encoder, scored by exp(-l2)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import dsp
from .chunk import tokenize
from .tensor import core as tc
from .tensor import nn as tnn
from .tensor import checkpoint
from .tensor.core import Tensor, TensorError
from .tensor.optim import glorot_uniform, orthogonal_blocks

UNK = "<unk>"
SCORE_CLAMP = 1e-7
FRAME_SHIFT = Fraction(1, 50)


@dataclass(frozen=True)
class AudioEncoderConfig:
    conv_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    temporal_pool: tuple[int, ...] = (1, 2, 2, 1, 1)
    freq_pool: tuple[int, ...] = (2, 2, 2, 2, 2)
    gru_hidden: int = 128
    embed_dim: int = 256
    n_mels: int = dsp.N_MELS
    leaky_slope: float = 0.1

    def __post_init__(self):
        n = len(self.conv_channels)
        if not (len(self.temporal_pool) == len(self.freq_pool) == n):
            raise ValueError("pooling factors must list one entry per conv block")
        if 2 * self.gru_hidden != self.embed_dim:
            raise ValueError("embed_dim must equal 2 * gru_hidden")
        if self.n_mels % math.prod(self.freq_pool):
            raise ValueError("n_mels not divisible by the total frequency pooling")

    @property
    def time_factor(self) -> int:
        return math.prod(self.temporal_pool)


@dataclass(frozen=True)
class GroundingConfig:
    threshold: float = 0.5
    score_clamp: float = SCORE_CLAMP
    median_width: int = 1

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.median_width < 1 or self.median_width % 2 == 0:
            raise ValueError("median_width must be a positive odd integer")


@dataclass
class FrameScores:
    scores: np.ndarray
    frame_shift_s: float = dsp.HOP_S


class Vocabulary:
    def __init__(self, words):
        words = list(words)
        if not words or words[0] != UNK:
            words = [UNK] + [w for w in words if w != UNK]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        seen = sorted({w for t in texts for w in tokenize(t)})
        return cls([UNK] + seen)

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, phrase: str) -> list[int]:
        ids = [self.index.get(w, 0) for w in tokenize(phrase)]
        if not ids:
            raise ValueError(f"empty query: {phrase!r}")
        return ids


def pad_ids(id_lists):
    n = max(len(x) for x in id_lists)
    ids = np.zeros((len(id_lists), n), dtype=np.int64)
    mask = np.zeros((len(id_lists), n), dtype=bool)
    for i, x in enumerate(id_lists):
        ids[i, :len(x)] = x
        mask[i, :len(x)] = True
    return ids, mask


def pad_features(feats):
    """Stack [T_i, D] arrays into a zero-padded [B, T_max, D] batch plus lengths."""
    lengths = np.array([f.shape[0] for f in feats])
    out = np.zeros((len(feats), lengths.max(), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, :len(f)] = f
    return out, lengths


class GroundingModel:
    """Parameters live in ``self.params`` (name -> Tensor); batch-norm running
    statistics in ``self.bn``."""

    def __init__(self, vocab: Vocabulary, cfg: AudioEncoderConfig = AudioEncoderConfig(), seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, tnn.BatchNormState] = {}
        rng = np.random.default_rng(seed)
        c_in = 1
        for k, c_out in enumerate(cfg.conv_channels):
            self._add(f"conv{k}.w", glorot_uniform(rng, (c_out, c_in, 3, 3), 9 * c_in, 9 * c_out))
            self._add(f"conv{k}.b", np.zeros(c_out))
            self._add(f"bn{k}.gamma", np.ones(c_out))
            self._add(f"bn{k}.beta", np.zeros(c_out))
            self.bn[f"bn{k}"] = tnn.BatchNormState(np.zeros(c_out), np.ones(c_out))
            c_in = c_out
        H = cfg.gru_hidden
        for d in ("fwd", "bwd"):
            w_ih = np.concatenate([glorot_uniform(rng, (H, c_in), c_in, H) for _ in range(3)])
            self._add(f"gru.{d}.w_ih", w_ih)
            self._add(f"gru.{d}.w_hh", orthogonal_blocks(rng, 3, H))
            self._add(f"gru.{d}.b_ih", np.zeros(3 * H))
            self._add(f"gru.{d}.b_hh", np.zeros(3 * H))
        self._add("embed.table", rng.uniform(-0.1, 0.1, size=(len(vocab), cfg.embed_dim)))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    # -- encoders ---------------------------------------------------------
    def encode_audio(self, feats: np.ndarray, lengths=None, training: bool = False) -> Tensor:
        """[B, T, n_mels] log-mel batch -> [B, T, embed_dim] frame embeddings.

        Time is zero-padded to a multiple of the pooling factor and truncated
        after upsampling; frames beyond each ``lengths[i]`` are masked.
        """
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        B, T, D = feats.shape
        if D != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {D}")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        f = self.cfg.time_factor
        Tp = -(-T // f) * f
        x = np.zeros((B, Tp, D, 1))
        valid = tnn.time_mask(lengths, T)
        x[:, :T, :, 0] = feats * valid[:, :, None]
        h = Tensor(x)
        cur_len = lengths.copy()
        for k in range(len(self.cfg.conv_channels)):
            p = self.params
            mask = tnn.time_mask(cur_len, h.shape[1])
            h = tnn.conv3x3_same_nhwc(h, p[f"conv{k}.w"], p[f"conv{k}.b"])
            h = tnn.batch_norm(h, p[f"bn{k}.gamma"], p[f"bn{k}.beta"], self.bn[f"bn{k}"],
                               training, mask=mask, channels_last=True)
            h = tc.leaky_relu(h, self.cfg.leaky_slope)
            kt, kf = self.cfg.temporal_pool[k], self.cfg.freq_pool[k]
            h = tnn.lp_pool(h, kt, kf, p=4, channels_last=True)
            cur_len = -(-cur_len // kt)
        h = tnn.mean_over_axis(h, axis=2)  # [B, T/f, C]
        h = tnn.bigru(h, self.params, mask=tnn.time_mask(cur_len, h.shape[1]))
        h = tnn.nearest_upsample_time(h, f)
        return h[:, :T, :]

    def encode_phrase(self, id_lists) -> Tensor:
        """Mean word embedding per phrase -> [B, embed_dim]."""
        if any(len(x) == 0 for x in id_lists):
            raise ValueError("empty query")
        ids, mask = pad_ids(id_lists)
        emb = tnn.embedding_lookup(self.params["embed.table"], ids)
        return tnn.mean_over_axis(emb, axis=1, mask=mask)

    def score(self, feats, lengths, id_lists, training: bool = False) -> Tensor:
        return similarity(self.encode_audio(feats, lengths, training), self.encode_phrase(id_lists))

    def predict(self, mel: dsp.MelSpectrogram, phrase: str) -> FrameScores:
        with tc.no_grad():
            s = self.score(mel.frames[None], None, [self.vocab.encode(phrase)])
        return FrameScores(s.data[0], mel.frame_shift_s)

    def predict_many(self, mel: dsp.MelSpectrogram, phrases) -> list[FrameScores]:
        """Scores for several phrases sharing one audio encoding."""
        with tc.no_grad():
            e_a = self.encode_audio(mel.frames[None])
            e_p = self.encode_phrase([self.vocab.encode(p) for p in phrases])
            B = len(phrases)
            s = similarity(Tensor(np.broadcast_to(e_a.data, (B,) + e_a.shape[1:])), e_p)
        return [FrameScores(row, mel.frame_shift_s) for row in s.data]

    # -- persistence ------------------------------------------------------
    def state_records(self) -> dict[str, np.ndarray]:
        c = self.cfg
        rec = {
            "config.conv_channels": np.array(c.conv_channels, dtype=np.float64),
            "config.temporal_pool": np.array(c.temporal_pool, dtype=np.float64),
            "config.freq_pool": np.array(c.freq_pool, dtype=np.float64),
            "config.gru_hidden": np.array([c.gru_hidden], dtype=np.float64),
            "config.embed_dim": np.array([c.embed_dim], dtype=np.float64),
            "config.n_mels": np.array([c.n_mels], dtype=np.float64),
            "config.leaky_slope": np.array([c.leaky_slope]),
            "vocab": checkpoint.encode_strings(self.vocab.words),
        }
        for name, t in self.params.items():
            rec[f"param.{name}"] = t.data
        for name, st in self.bn.items():
            rec[f"bn_state.{name}.running_mean"] = st.running_mean
            rec[f"bn_state.{name}.running_var"] = st.running_var
        return rec

    @classmethod
    def from_records(cls, rec: dict[str, np.ndarray]) -> "GroundingModel":
        ints = lambda k: tuple(int(v) for v in rec[k])  # noqa: E731
        cfg = AudioEncoderConfig(
            conv_channels=ints("config.conv_channels"), temporal_pool=ints("config.temporal_pool"),
            freq_pool=ints("config.freq_pool"), gru_hidden=ints("config.gru_hidden")[0],
            embed_dim=ints("config.embed_dim")[0], n_mels=ints("config.n_mels")[0],
            leaky_slope=float(rec["config.leaky_slope"][0]))
        model = cls(Vocabulary(checkpoint.decode_strings(rec["vocab"])), cfg)
        for name in model.params:
            arr = rec[f"param.{name}"]
            if arr.shape != model.params[name].shape:
                raise checkpoint.CheckpointError(f"shape mismatch for {name}")
            model.params[name].data = arr.copy()
        for name, st in model.bn.items():
            st.running_mean = rec[f"bn_state.{name}.running_mean"].copy()
            st.running_var = rec[f"bn_state.{name}.running_var"].copy()
        return model

    def save(self, path) -> None:
        checkpoint.save(path, self.state_records())

    @classmethod
    def load(cls, path) -> "GroundingModel":
        return cls.from_records(checkpoint.load(path))


# -- scoring, loss, decoding ------------------------------------------------

def similarity(e_audio: Tensor, e_phrase: Tensor) -> Tensor:
    """s_t = exp(-||e_audio[t] - e_phrase||_2); [B,T,D] x [B,D] -> [B,T]
    (or [T,D] x [D] -> [T])."""
    if e_audio.shape[-1] != e_phrase.shape[-1]:
        raise TensorError("embedding dims differ")
    if e_audio.ndim == 2:
        diff = e_audio - e_phrase.reshape(1, -1)
    else:
        diff = e_audio - e_phrase.reshape(e_phrase.shape[0], 1, -1)
    return tc.exp(-tnn.l2_norm_over_axis(diff, axis=-1))


def bce_loss(scores: Tensor, labels, mask=None, eps: float = SCORE_CLAMP) -> Tensor:
    """Frame-averaged binary cross-entropy on clamped scores.

    For batched [B,T] input the per-sequence means (over unmasked frames) are
    averaged over the batch.
    """
    scores = tc.as_tensor(scores)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != scores.shape:
        raise ValueError(f"length mismatch: scores {scores.shape} vs labels {y.shape}")
    s = tc.clip(scores, eps, 1.0 - eps)
    per_frame = -(tc.log(s) * y + tc.log(1.0 - s) * (1.0 - y))
    if per_frame.ndim == 1:
        per_frame = per_frame.reshape(1, -1)
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(per_frame.shape, dtype=bool)
    return tnn.mean_over_axis(per_frame, axis=1, mask=np.asarray(mask, dtype=bool)).mean()


def _median_binary(y: np.ndarray, width: int) -> np.ndarray:
    if width == 1:
        return y
    h = width // 2
    padded = np.pad(y.astype(np.int64), h, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, width)
    return win.sum(axis=1) > h


def frame_runs(active: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as (first, last + 1) frame index pairs."""
    a = np.concatenate([[False], np.asarray(active, dtype=bool), [False]]).astype(np.int8)
    d = np.diff(a)
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def threshold_segments(scores, threshold: float, median_width: int = 1,
                       frame_shift_s: float = dsp.HOP_S) -> list[tuple[float, float]]:
    """Segments where s_t > threshold; accepts any threshold (1.0 gives none)."""
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if median_width < 1 or median_width % 2 == 0:
        raise ValueError("median width must be a positive odd integer")
    active = _median_binary(s > threshold, median_width)
    shift = Fraction(str(frame_shift_s))
    return [(float(a * shift), float(b * shift)) for a, b in frame_runs(active)]


def decode_segments(scores, cfg: GroundingConfig = GroundingConfig(),
                    frame_shift_s: float = dsp.HOP_S) -> list[tuple[float, float]]:
    """Threshold (s_t > phi), optionally median-filter, and return (onset, offset) seconds."""
    if isinstance(scores, FrameScores):
        frame_shift_s = scores.frame_shift_s
    return threshold_segments(scores, cfg.threshold, cfg.median_width, frame_shift_s)


def frames_from_segments(segments, T: int, frame_shift_s: float = dsp.HOP_S) -> np.ndarray:
    """Binary length-T labels: frame t is 1 iff its centre lies in some [on, off)."""
    shift = Fraction(str(frame_shift_s))
    y = np.zeros(T, dtype=np.float64)
    for on, off in segments:
        on_q, off_q = Fraction(repr(float(on))), Fraction(repr(float(off)))
        if on_q < 0 or off_q < on_q:
            raise ValueError(f"invalid segment ({on}, {off})")
        # centre (t + 1/2) * shift in [on, off)  <=>  on/shift - 1/2 <= t < off/shift - 1/2
        lo = math.ceil(on_q / shift - Fraction(1, 2))
        hi = math.ceil(off_q / shift - Fraction(1, 2))
        y[max(lo, 0):max(min(hi, T), 0)] = 1.0
    return y
