"""Event-based precision/recall/F1 and the polyphonic sound detection score.

Event lists map a ``(clip_id, phrase)`` key to ``(onset_s, offset_s)`` pairs.
Interval arithmetic is exact: times are read as the decimal they print as
and scaled onto a common integer tick grid.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import dsp
from .model import frame_runs


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EventMetricConfig:
    t_collar: float = 0.100
    duration_tolerance: float = 0.20

    def __post_init__(self):
        if self.t_collar <= 0 or not 0 <= self.duration_tolerance < 1:
            raise ValueError("need t_collar > 0 and 0 <= duration_tolerance < 1")


@dataclass(frozen=True)
class PsdsConfig:
    dtc: float = 0.5
    gtc: float = 0.5
    cttc: float = 0.3
    alpha_ct: float = 0.0
    alpha_st: float = 0.0
    e_max: float = 100.0
    thresholds: tuple[float, ...] = tuple(np.round(np.linspace(0.02, 0.98, 50), 10).tolist())

    def __post_init__(self):
        for r in (self.dtc, self.gtc, self.cttc):
            if not 0 <= r <= 1:
                raise ValueError("PSDS ratios must lie in [0, 1]")
        if self.e_max <= 0:
            raise ValueError("e_max must be positive")
        if any(not 0 < t < 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1)")


@dataclass(frozen=True)
class EventScores:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def _q(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(repr(float(x)))


def _check_segments(key, segs):
    out = []
    for on, off in segs:
        on_q, off_q = _q(on), _q(off)
        if not on_q < off_q:
            raise MetricError(f"malformed segment {key}: ({on}, {off})")
        out.append((on_q, off_q))
    return sorted(out)


def greedy_match(ref, hyp, cfg: EventMetricConfig = EventMetricConfig()) -> list[tuple[int, int]]:
    """One-to-one matching for a single (clip, class).

    Hypotheses are visited in onset order; each takes the first still-unmatched
    eligible reference in onset order.  Returns (hyp_index, ref_index) pairs into
    the onset-sorted lists.
    """
    collar = _q(cfg.t_collar)
    tol = _q(cfg.duration_tolerance)
    taken = [False] * len(ref)
    pairs = []
    for hi, (h_on, h_off) in enumerate(hyp):
        for ri, (r_on, r_off) in enumerate(ref):
            if not taken[ri] and event_eligible((r_on, r_off), (h_on, h_off), collar, tol):
                taken[ri] = True
                pairs.append((hi, ri))
                break
    return pairs


def event_eligible(ref, hyp, collar, tol) -> bool:
    (r_on, r_off), (h_on, h_off) = ref, hyp
    off_collar = max(collar, tol * (r_off - r_on))
    return abs(h_on - r_on) <= collar and abs(h_off - r_off) <= off_collar


def _safe_div(a, b) -> float:
    return a / b if b else 0.0


def event_f1(ref: dict, hyp: dict, cfg: EventMetricConfig = EventMetricConfig()) -> EventScores:
    """Micro-averaged event-based P/R/F1 (percent) over all (clip, class) keys."""
    tp = fp = fn = 0
    for key in sorted(set(ref) | set(hyp), key=str):
        r = _check_segments(key, ref.get(key, ()))
        h = _check_segments(key, hyp.get(key, ()))
        n = len(greedy_match(r, h, cfg))
        tp += n
        fp += len(h) - n
        fn += len(r) - n
    p = _safe_div(tp, tp + fp)
    rc = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * p * rc, p + rc)
    return EventScores(100 * p, 100 * rc, 100 * f1, tp, fp, fn)


# -- PSDS -----------------------------------------------------------------

@dataclass
class PsdRoc:
    efpr: np.ndarray
    etpr: np.ndarray
    thresholds: np.ndarray
    e_max: float
    tp_counts: list = field(default_factory=list)
    fp_counts: list = field(default_factory=list)
    ct_counts: list = field(default_factory=list)

    def envelope(self, e: float) -> float:
        ok = self.efpr <= e
        return float(self.etpr[ok].max()) if ok.any() else 0.0

    def on_envelope(self) -> np.ndarray:
        return np.array([self.etpr[i] >= self.envelope(self.efpr[i]) for i in range(len(self.efpr))],
                        dtype=bool)

    def area(self) -> float:
        """Normalised area under the monotone envelope on [0, e_max]."""
        xs = sorted({float(x) for x in self.efpr if x <= self.e_max})
        total = 0.0
        for i, x in enumerate(xs):
            right = xs[i + 1] if i + 1 < len(xs) else self.e_max
            total += self.envelope(x) * (right - x)
        return total / self.e_max


def _scores_array(s):
    return np.asarray(getattr(s, "scores", s), dtype=np.float64)


def psds(ref: dict, scores: dict, total_audio_s: float, cfg: PsdsConfig = PsdsConfig(),
         frame_shift_s: float = dsp.HOP_S) -> tuple[float, PsdRoc]:
    """PSDS over a threshold sweep of per-(clip, class) frame scores.

    FP rate is the total count of DTC-invalid detections per hour of audio; the
    TP rate is averaged over classes with at least one reference event.
    """
    if total_audio_s <= 0:
        raise MetricError("total_audio_s must be positive")
    missing = [k for k in ref if k not in scores]
    if missing:
        raise MetricError(f"scores missing for {missing[:3]}")
    ref_q = {k: _check_segments(k, v) for k, v in ref.items()}
    shift = Fraction(str(frame_shift_s))
    # common integer tick grid
    dens = {shift.denominator} | {x.denominator for v in ref_q.values() for seg in v for x in seg}
    scale = math.lcm(*dens)
    tick = int(shift * scale)
    ref_ticks = {k: np.array([(int(a * scale), int(b * scale)) for a, b in v], dtype=np.int64).reshape(-1, 2)
                 for k, v in ref_q.items()}
    keys = sorted(set(ref) | set(scores), key=str)
    classes = sorted({k[1] for k in keys})
    n_ref = {c: 0 for c in classes}
    for k, v in ref_ticks.items():
        n_ref[k[1]] += len(v)
    by_clip: dict = {}
    for k in keys:
        by_clip.setdefault(k[0], []).append(k)
    score_arrays = {k: _scores_array(scores[k]) for k in keys}
    ratios = {name: Fraction(repr(float(getattr(cfg, name)))) for name in ("dtc", "gtc", "cttc")}
    hours = total_audio_s / 3600.0
    thresholds = np.array(sorted(cfg.thresholds))

    efpr, etpr, tps, fps, cts = [], [], [], [], []
    for theta in thresholds:
        tp = {c: 0 for c in classes}
        fp = {c: 0 for c in classes}
        ct = {c: {c2: 0 for c2 in classes if c2 != c} for c in classes}
        for k in keys:
            runs = frame_runs(score_arrays[k] > theta)
            if not runs:
                continue
            det = np.array(runs, dtype=np.int64) * tick
            gt = ref_ticks.get(k, np.zeros((0, 2), dtype=np.int64))
            inter = _overlap(det, gt)
            dur = det[:, 1] - det[:, 0]
            dtc_ok = _ratio_at_least(inter.sum(axis=1), dur, ratios["dtc"])
            if len(gt):
                cover = (inter * dtc_ok[:, None]).sum(axis=0)
                tp[k[1]] += int(_ratio_at_least(cover, gt[:, 1] - gt[:, 0], ratios["gtc"]).sum())
            fp[k[1]] += int((~dtc_ok).sum())
            bad = det[~dtc_ok]
            if len(bad):
                for k2 in by_clip[k[0]]:
                    gt2 = ref_ticks.get(k2)
                    if k2[1] == k[1] or gt2 is None or not len(gt2):
                        continue
                    hit = _ratio_at_least(_overlap(bad, gt2).sum(axis=1), bad[:, 1] - bad[:, 0], ratios["cttc"])
                    ct[k[1]][k2[1]] += int(hit.sum())
        tprs = np.array([tp[c] / n_ref[c] for c in classes if n_ref[c] > 0])
        e_tpr = float(tprs.mean() - cfg.alpha_st * tprs.std()) if tprs.size else 0.0
        ct_term = sum(np.mean(list(ct[c].values())) for c in classes if ct[c]) if cfg.alpha_ct else 0.0
        efpr.append((sum(fp.values()) + cfg.alpha_ct * ct_term) / hours)
        etpr.append(e_tpr)
        tps.append(tp)
        fps.append(fp)
        cts.append(ct)
    roc = PsdRoc(np.array(efpr), np.array(etpr), thresholds, cfg.e_max, tps, fps, cts)
    return roc.area(), roc


def _overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection lengths of half-open tick intervals [len(a), len(b)]."""
    lo = np.maximum(a[:, None, 0], b[None, :, 0])
    hi = np.minimum(a[:, None, 1], b[None, :, 1])
    return np.maximum(hi - lo, 0)


def _ratio_at_least(num: np.ndarray, den: np.ndarray, r: Fraction) -> np.ndarray:
    return num * r.denominator >= den * r.numerator


def export_roc(roc: PsdRoc) -> list[tuple[float, float, bool]]:
    """(eFPR, eTPR, on_envelope) rows sorted by eFPR."""
    flags = roc.on_envelope()
    order = sorted(range(len(roc.efpr)), key=lambda i: (roc.efpr[i], roc.etpr[i]))
    return [(float(roc.efpr[i]), float(roc.etpr[i]), bool(flags[i])) for i in order]


def roc_csv(roc: PsdRoc) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["efpr_per_hour", "etpr", "on_envelope"])
    for e, t, f in export_roc(roc):
        w.writerow([repr(e), repr(t), int(f)])
    return buf.getvalue()
