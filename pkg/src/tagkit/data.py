"""Grounding datasets: JSON schema, validation, synthetic corpus, baselines."""
from __future__ import annotations

import json
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .model import FrameScores

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CLIP_S = 10.0


class DatasetError(ValueError):
    pass


@dataclass
class Phrase:
    text: str
    segments: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class GroundingClip:
    audio_id: str
    audio_path: str
    caption: str
    phrases: list[Phrase]
    duration_s: float | None = None


@dataclass
class DatasetSplit:
    name: str
    clips: list[GroundingClip]
    root: Path = Path(".")

    def resolve(self, clip: GroundingClip) -> Path:
        p = Path(clip.audio_path)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {"split": self.name, "clips": [
            {"audio_id": c.audio_id, "audio_path": c.audio_path, "caption": c.caption,
             "phrases": [{"text": p.text, "segments": [[on, off] for on, off in p.segments]}
                         for p in c.phrases]}
            for c in self.clips]}

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    def event_list(self) -> dict:
        return {(c.audio_id, p.text): list(p.segments) for c in self.clips for p in c.phrases}

    def total_duration_s(self) -> float:
        return sum(c.duration_s if c.duration_s is not None else CLIP_S for c in self.clips)


# -- loading ----------------------------------------------------------------

def _req(obj, key, typ, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"{where}: missing key {key!r}")
    val = obj[key]
    if typ is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    else:
        ok = isinstance(val, typ)
    if not ok:
        raise DatasetError(f"{where}.{key}: expected {typ.__name__}")
    return val


def wav_duration(path) -> float:
    try:
        with wave.open(str(path), "rb") as wf:
            return wf.getnframes() / wf.getframerate()
    except (wave.Error, EOFError) as exc:
        raise DatasetError(f"{path}: unreadable WAV header ({exc})") from None


def _clean_segments(segs, where, audio_id):
    out = []
    for j, seg in enumerate(segs):
        w = f"{where}[{j}]"
        if not (isinstance(seg, (list, tuple)) and len(seg) == 2
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in seg)):
            raise DatasetError(f"{w}: segment must be [onset, offset]")
        on, off = float(seg[0]), float(seg[1])
        if not (np.isfinite(on) and np.isfinite(off)) or on < 0 or not on < off:
            raise DatasetError(f"{w}: invalid segment [{on}, {off}] in {audio_id}")
        out.append((on, off))
    out.sort()
    merged = []
    for on, off in out:
        if merged and on < merged[-1][1]:
            log.warning("%s: overlapping segments in %s merged", where, audio_id)
            merged[-1] = (merged[-1][0], max(merged[-1][1], off))
        elif merged and (on, off) == merged[-1]:
            continue
        else:
            merged.append((on, off))
    return merged


def parse_dataset(obj, root=Path("."), check_audio: bool = False) -> DatasetSplit:
    split = _req(obj, "split", str, "$")
    if split not in SPLITS:
        raise DatasetError(f"$.split: must be one of {SPLITS}")
    clips_raw = _req(obj, "clips", list, "$")
    root = Path(root)
    clips, seen = [], set()
    for i, c in enumerate(clips_raw):
        w = f"$.clips[{i}]"
        aid = _req(c, "audio_id", str, w)
        if aid in seen:
            raise DatasetError(f"{w}.audio_id: duplicate audio_id {aid!r}")
        seen.add(aid)
        apath = _req(c, "audio_path", str, w)
        caption = _req(c, "caption", str, w)
        phrases: dict[str, Phrase] = {}
        for j, p in enumerate(_req(c, "phrases", list, w)):
            pw = f"{w}.phrases[{j}]"
            text = _req(p, "text", str, pw).strip()
            if not text:
                raise DatasetError(f"{pw}.text: empty phrase text")
            segs = _clean_segments(_req(p, "segments", list, pw), f"{pw}.segments", aid)
            if text in phrases:
                log.warning("%s: repeated phrase %r in %s merged", pw, text, aid)
                segs = _clean_segments(phrases[text].segments + segs, f"{pw}.segments", aid)
            phrases[text] = Phrase(text, segs)
        clip = GroundingClip(aid, apath, caption, list(phrases.values()))
        full = Path(apath) if Path(apath).is_absolute() else root / apath
        if full.exists():
            clip.duration_s = wav_duration(full)
        elif check_audio:
            raise DatasetError(f"{w}.audio_path: missing audio file {full}")
        if check_audio:
            dsp.read_wav(full)
        if clip.duration_s is not None:
            for p in clip.phrases:
                for on, off in p.segments:
                    if off > clip.duration_s + 1e-9:
                        raise DatasetError(
                            f"{w}: segment [{on}, {off}] of {p.text!r} exceeds duration "
                            f"{clip.duration_s:.3f}s of {aid}")
        clips.append(clip)
    return DatasetSplit(split, clips, root)


def load_dataset(path, check_audio: bool = False) -> DatasetSplit:
    """Read and validate a dataset JSON; relative audio paths resolve against its folder."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    return parse_dataset(obj, path.parent, check_audio)


def convert_audiogrounding(records, split: str) -> dict:
    """Best-effort mapping of released-corpus style records into our schema.

    Unverified guess at the upstream layout: each record carries ``audio_id``,
    ``caption`` (or ``tokens``) and ``phrases`` entries holding ``phrase`` plus
    ``segments`` (or ``timestamps``).  Audio is expected at ``audio/<id>.wav``.
    """
    clips = []
    for r in records:
        caption = r.get("caption") or " ".join(r.get("tokens", []))
        phrases = []
        for p in r.get("phrases", []):
            text = p.get("phrase") or p.get("text") or ""
            segs = p.get("segments") or p.get("timestamps") or []
            phrases.append({"text": text, "segments": [[float(a), float(b)] for a, b in segs]})
        aid = str(r["audio_id"])
        clips.append({"audio_id": aid, "audio_path": r.get("audio_path", f"audio/{aid}.wav"),
                      "caption": caption, "phrases": phrases})
    return {"split": split, "clips": clips}


# -- synthetic corpus ---------------------------------------------------------

ADJECTIVES = ("deep", "low", "dull", "mellow", "bright", "high", "sharp", "shrill")
BASE_FREQS = tuple(np.geomspace(250.0, 4000.0, 8).round(1).tolist())
# family -> (noun, third-person verb, progressive verb)
FAMILIES = {
    "beep": ("alarm", "beeps", "beeping"),
    "noise": ("vent", "hisses", "hissing"),
    "chirp": ("bird", "chirps", "chirping"),
    "am": ("motor", "hums", "humming"),
}


@dataclass(frozen=True)
class EventType:
    family: str
    variant: int

    @property
    def freq(self) -> float:
        return BASE_FREQS[self.variant]

    def phrase(self, progressive: bool) -> str:
        noun, vbz, vbg = FAMILIES[self.family]
        verb = f"is {vbg}" if progressive else vbz
        return f"a {ADJECTIVES[self.variant]} {noun} {verb}"


EVENT_BANK = tuple(EventType(f, v) for f in FAMILIES for v in range(8))


def _fade(n, sr):
    env = np.ones(n)
    k = min(int(0.005 * sr), n // 2)
    if k:
        ramp = np.linspace(0.0, 1.0, k, endpoint=False)
        env[:k] = ramp
        env[n - k:] = ramp[::-1]
    return env


def _bandnoise(rng, n, sr, center):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sr)
    lo, hi = center / 2 ** 0.25, center * 2 ** 0.25
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x / (np.abs(x).max() + 1e-12)


def render_event(ev: EventType, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    f = ev.freq
    if ev.family == "beep":
        x = np.sin(2 * np.pi * f * t)
    elif ev.family == "noise":
        x = _bandnoise(rng, n, sr, f)
    elif ev.family == "chirp":
        period = 0.25
        tau = np.mod(t, period)
        # repeated linear sweeps f -> 1.6 f
        x = np.sin(2 * np.pi * (f * tau + 0.6 * f * tau ** 2 / (2 * period)))
    else:
        x = np.sin(2 * np.pi * f * t) * (0.5 + 0.5 * np.sin(2 * np.pi * 8.0 * t))
    return x * _fade(n, sr)


def pink_noise(rng, n):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size)
    spec[1:] /= np.sqrt(f[1:])
    spec[0] = 0
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x ** 2))


def _draw_layout(rng, n_events: int) -> list[list[tuple[float, float]]]:
    """1-4 segments of 0.3-3.0 s per event on a 10 ms grid, all events sharing one timeline.

    Segments of different events never overlap and are separated by at least
    0.1 s, so every frame belongs to at most one of the laid-out events.
    """
    durs = [list(rng.integers(30, 301, size=int(rng.integers(1, 5))).tolist()) for _ in range(n_events)]
    total = lambda: sum(map(sum, durs)) + 10 * (sum(map(len, durs)) - 1)  # noqa: E731
    while total() > CLIP_S * 100:
        j = max(range(n_events), key=lambda e: (len(durs[e]), sum(durs[e])))
        durs[j].pop()
    owner = rng.permutation([e for e, d in enumerate(durs) for _ in d])
    queue = [list(d) for d in durs]
    k = len(owner)
    slack = int(CLIP_S * 100) - total()
    gaps = np.diff(np.concatenate([[0], np.sort(rng.integers(0, slack + 1, size=k))]))
    out = [[] for _ in range(n_events)]
    pos = 0
    for e, g in zip(owner.tolist(), gaps.tolist()):
        d = queue[e].pop(0)
        on = pos + g
        out[e].append((on / 100, (on + d) / 100))
        pos = on + d + 10
    return out


def _mix_captions(phrases, rng):
    parts = [phrases[0]]
    for p in phrases[1:]:
        parts.append(str(rng.choice(["while", "and"])))
        parts.append(p)
    text = " ".join(parts)
    return text[0].upper() + text[1:] + "."


def synth_clip(i: int, seed: int, split: str, full_clip_prob: float = 0.1):
    """Render one clip; returns (GroundingClip, Waveform)."""
    rng = np.random.default_rng([seed, i])
    sr = dsp.SAMPLE_RATE
    n = int(CLIP_S * sr)
    k = int(rng.integers(1, 4))
    types = [EVENT_BANK[j] for j in rng.choice(len(EVENT_BANK), size=k, replace=False)]
    audio = pink_noise(rng, n) * 10 ** (-30 / 20)
    full = rng.random(k) < full_clip_prob
    layout = iter(_draw_layout(rng, int((~full).sum())))
    phrases = []
    for ev, whole in zip(types, full.tolist()):
        segs = [(0.0, CLIP_S)] if whole else next(layout)
        amp = rng.uniform(0.15, 0.3)
        for on, off in segs:
            a, b = int(round(on * sr)), int(round(off * sr))
            audio[a:b] += amp * render_event(ev, b - a, sr, rng)
        phrases.append(Phrase(ev.phrase(progressive=bool(rng.random() < 0.3)), segs))
    caption = _mix_captions([p.text for p in phrases], rng)
    audio_id = f"{split}_{i:04d}"
    clip = GroundingClip(audio_id, f"audio/{audio_id}.wav", caption, phrases, CLIP_S)
    return clip, dsp.Waveform(np.clip(audio, -1.0, 32767 / 32768), sr)


def generate_synthetic(n_clips: int, seed: int, out_dir=None, split: str = "train") -> DatasetSplit:
    """Build a seeded synthetic split; with ``out_dir`` the WAVs and ``<split>.json`` are written."""
    if n_clips < 1:
        raise DatasetError("n_clips must be >= 1")
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}")
    root = Path(out_dir) if out_dir is not None else Path(".")
    clips = []
    if out_dir is not None:
        (root / "audio").mkdir(parents=True, exist_ok=True)
    for i in range(n_clips):
        clip, wav = synth_clip(i, seed, split)
        if out_dir is not None:
            dsp.write_wav(root / clip.audio_path, wav)
        clips.append(clip)
    ds = DatasetSplit(split, clips, root)
    if out_dir is not None:
        ds.save(root / f"{split}.json")
    return ds


# -- baselines and probes -----------------------------------------------------

def clip_num_frames(clip: GroundingClip) -> int:
    dur = clip.duration_s if clip.duration_s is not None else CLIP_S
    win = int(round(dsp.WIN_S * dsp.SAMPLE_RATE))
    hop = int(round(dsp.HOP_S * dsp.SAMPLE_RATE))
    return dsp.num_frames(int(round(dur * dsp.SAMPLE_RATE)), win, hop)


def random_baseline(clips, seed: int) -> dict:
    """Uniform (0, 1) frame scores for every (clip, phrase)."""
    rng = np.random.default_rng(seed)
    out = {}
    for c in clips:
        T = clip_num_frames(c)
        for p in c.phrases:
            u = rng.integers(1, 2 ** 53, size=T) / float(2 ** 53)
            out[(c.audio_id, p.text)] = FrameScores(u)
    return out


def shuffle_phrase_probe(ds: DatasetSplit, seed: int) -> DatasetSplit:
    """Swap phrase queries among each clip's own phrases, keeping the segments.

    Within every clip holding two or more phrases the texts are deranged, so no
    query keeps its original segments; single-phrase clips are left as they are.
    """
    if not any(len({p.text for p in c.phrases}) >= 2 for c in ds.clips):
        raise DatasetError("probe needs a clip with at least two distinct phrases")
    rng = np.random.default_rng(seed)
    clips = []
    for c in ds.clips:
        texts = [p.text for p in c.phrases]
        if len(texts) >= 2:
            perm = rng.permutation(len(texts))
            # cyclic shift along a random order is a derangement
            new = list(texts)
            for a, b in zip(perm, np.roll(perm, -1)):
                new[a] = texts[b]
            phrases = [Phrase(t, list(p.segments)) for t, p in zip(new, c.phrases)]
        else:
            phrases = [Phrase(p.text, list(p.segments)) for p in c.phrases]
        clips.append(GroundingClip(c.audio_id, c.audio_path, c.caption, phrases, c.duration_s))
    return DatasetSplit(ds.name, clips, ds.root)
