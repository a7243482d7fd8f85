"""Glue between trained models, datasets and the metrics."""
from __future__ import annotations

from .data import DatasetSplit
from .metrics import EventMetricConfig, PsdsConfig, event_f1, psds
from .model import FrameScores, GroundingConfig, GroundingModel, decode_segments
from .train import clip_features


def predict_dataset(model: GroundingModel, ds: DatasetSplit, features=None) -> dict:
    """(audio_id, phrase) -> FrameScores for every phrase in the split."""
    features = clip_features(ds) if features is None else features
    out = {}
    for c in ds.clips:
        if not c.phrases:
            continue
        texts = [p.text for p in c.phrases]
        for t, s in zip(texts, model.predict_many(features[c.audio_id], texts)):
            out[(c.audio_id, t)] = s
    return out


def decode_all(scores: dict, cfg: GroundingConfig = GroundingConfig()) -> dict:
    return {k: decode_segments(s, cfg) for k, s in scores.items()}


def evaluate_scores(ds: DatasetSplit, scores: dict[tuple, FrameScores],
                    grounding: GroundingConfig = GroundingConfig(),
                    event_cfg: EventMetricConfig = EventMetricConfig(),
                    psds_cfg: PsdsConfig = PsdsConfig()) -> dict:
    ref = ds.event_list()
    ev = event_f1(ref, decode_all(scores, grounding), event_cfg)
    value, roc = psds(ref, scores, ds.total_duration_s(), psds_cfg)
    return {"event": {"f1": ev.f1, "precision": ev.precision, "recall": ev.recall,
                      "tp": ev.tp, "fp": ev.fp, "fn": ev.fn},
            "psds": value, "roc": roc}
