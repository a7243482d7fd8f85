"""Command-line entry point: ``tagkit <subcommand> ...``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import chunk, dsp
from .data import DatasetError, clip_num_frames, generate_synthetic, load_dataset, random_baseline, \
    shuffle_phrase_probe
from .metrics import MetricError, event_f1, psds, roc_csv
from .model import FrameScores, GroundingModel, threshold_segments
from .pipeline import decode_all, predict_dataset
from .tensor.checkpoint import CheckpointError
from .train import NumericError, TrainConfig, build_samples, build_vocab, clip_features, train

log = logging.getLogger("tagkit")


class UsageError(Exception):
    pass


def _pct(x: float) -> float:
    return round(float(x), 2)


def _write_jsonl(path, rows) -> None:
    text = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _read_jsonl(path) -> list[dict]:
    rows = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}:{i}: invalid JSON ({exc})") from None
    return rows


def _need_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_model(path) -> GroundingModel:
    try:
        return GroundingModel.load(_need_file(path, "model checkpoint"))
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.clips < 1:
        raise UsageError("--clips must be >= 1")
    try:
        generate_synthetic(args.clips, args.seed, args.out, args.split)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc}") from None
    print(json.dumps({"dataset": str(Path(args.out) / f"{args.split}.json"), "clips": args.clips}))
    return 0


def cmd_extract_phrases(args) -> int:
    if args.caption is not None:
        captions = [args.caption]
    elif args.input is not None:
        captions = []
        for row in _read_jsonl(_need_file(args.input, "caption file")):
            if not isinstance(row.get("caption"), str):
                raise UsageError(f"{args.input}: every line needs a string 'caption'")
            captions.append(row["caption"])
    else:
        raise UsageError("give --caption or --input")
    _write_jsonl(args.out, [{"caption": c, "phrases": chunk.extract_phrases(c)} for c in captions])
    return 0


def cmd_train(args) -> int:
    if not args.lr > 0:
        raise UsageError("--lr must be positive")
    if args.epochs < 1 or args.batch_size < 1:
        raise UsageError("--epochs and --batch-size must be positive")
    tr = load_dataset(_need_file(args.train, "train set"), check_audio=True)
    va = load_dataset(_need_file(args.val, "validation set"), check_audio=True)
    cfg = TrainConfig(max_epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    samples_tr = build_samples(tr)
    samples_va = build_samples(va)
    if not samples_tr or not samples_va:
        raise UsageError("train and validation sets need at least one phrase")
    result = train(samples_tr, samples_va, build_vocab(tr), cfg)
    result.model.save(args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    log_path.write_text(result.log_csv(), encoding="utf-8")
    print(json.dumps({"checkpoint": str(args.out), "log": str(log_path), "best_epoch": result.best_epoch,
                      "best_val_loss": result.best_val_loss}))
    return 0


def _score_rows(scores: dict, threshold: float, median: int) -> list[dict]:
    rows = []
    for (aid, phrase), s in scores.items():
        segs = threshold_segments(s.scores, threshold, median, s.frame_shift_s)
        rows.append({"audio_id": aid, "phrase": phrase, "segments": [list(x) for x in segs],
                     "scores": [float(v) for v in s.scores]})
    return rows


def cmd_ground(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    if args.dataset:
        ds = load_dataset(_need_file(args.dataset, "dataset"), check_audio=not args.random_baseline)
        if args.random_baseline:
            scores = random_baseline(ds.clips, args.seed)
        else:
            scores = predict_dataset(_load_model(args.model), ds)
        _write_jsonl(args.out, _score_rows(scores, args.threshold, args.median))
        return 0
    if args.audio is None or args.phrase is None:
        raise UsageError("ground needs --audio and --phrase (or --dataset)")
    if not chunk.tokenize(args.phrase):
        raise UsageError("phrase is empty after tokenization")
    model = _load_model(args.model)
    wav = dsp.read_wav(_need_file(args.audio, "audio"))
    scores = model.predict(dsp.log_mel(wav), args.phrase)
    segs = threshold_segments(scores.scores, args.threshold, args.median, scores.frame_shift_s)
    segs = [(on, min(off, wav.duration_s)) for on, off in segs]
    _write_jsonl(args.out, [{"audio_id": Path(args.audio).stem, "phrase": args.phrase,
                             "segments": [list(x) for x in segs]}])
    if args.emit_scores:
        lines = ["time_s,score"] + [f"{t * dsp.HOP_S:.2f},{v!r}" for t, v in enumerate(scores.scores)]
        Path(args.emit_scores).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if not wanted or any(m not in ("event", "psds") for m in wanted):
        raise UsageError("--metrics takes a comma list of: event, psds")
    ds = load_dataset(_need_file(args.ref, "reference"))
    known = {c.audio_id for c in ds.clips}
    hyp_rows = _read_jsonl(_need_file(args.hyp, "hypothesis"))
    segs, scores = {}, {}
    for i, row in enumerate(hyp_rows, 1):
        aid, phrase = row.get("audio_id"), row.get("phrase")
        if not isinstance(aid, str) or not isinstance(phrase, str):
            raise UsageError(f"{args.hyp}:{i}: needs string 'audio_id' and 'phrase'")
        if aid not in known:
            raise UsageError(f"{args.hyp}:{i}: unknown audio_id {aid!r}")
        key = (aid, phrase)
        if "scores" in row:
            scores[key] = FrameScores(np.asarray(row["scores"], dtype=np.float64))
        if "segments" in row:
            segs[key] = [tuple(x) for x in row["segments"]]
        elif key in scores:
            s = scores[key]
            segs[key] = threshold_segments(s.scores, args.threshold, 1, s.frame_shift_s)
    ref = ds.event_list()
    out: dict = {}
    if "event" in wanted:
        ev = event_f1(ref, segs)
        out["event"] = {"f1": _pct(ev.f1), "precision": _pct(ev.precision), "recall": _pct(ev.recall)}
    if "psds" in wanted:
        missing = [k for k in ref if k not in scores]
        if missing:
            raise UsageError(f"PSDS needs score-form hypotheses; none for {missing[0]}")
        total = 0.0
        for c in ds.clips:
            if c.duration_s is not None:
                total += c.duration_s
            else:
                total += clip_num_frames(c) * dsp.HOP_S + (dsp.WIN_S - dsp.HOP_S)
        value, roc = psds(ref, scores, total)
        out["psds"] = _pct(100 * value)
        if args.roc_out:
            Path(args.roc_out).write_text(roc_csv(roc), encoding="utf-8")
    text = json.dumps(out, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_probe(args) -> int:
    model = _load_model(args.model)
    ds = load_dataset(_need_file(args.test, "test set"), check_audio=True)
    feats = clip_features(ds)
    f1s = []
    for split in (ds, shuffle_phrase_probe(ds, args.seed)):
        hyp = decode_all(predict_dataset(model, split, feats))
        f1s.append(event_f1(split.event_list(), hyp).f1)
    print(json.dumps({"original_f1": _pct(f1s[0]), "shuffled_f1": _pct(f1s[1]),
                      "difference": _pct(f1s[0] - f1s[1])}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tagkit", description="Text-to-audio grounding toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic grounding split")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract-phrases", help="chunk captions into NP / NP+VP phrases")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--caption")
    g.add_argument("--input", help="JSONL with a 'caption' per line")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_extract_phrases)

    p = sub.add_parser("train", help="train a grounding model")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--log", help="CSV training log (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ground", help="locate a phrase in audio")
    p.add_argument("--model")
    p.add_argument("--audio")
    p.add_argument("--phrase")
    p.add_argument("--dataset", help="ground every phrase of a dataset JSON instead")
    p.add_argument("--random-baseline", action="store_true",
                   help="with --dataset: uniform random frame scores instead of a model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--median", type=int, default=1, help="odd median-filter width in frames")
    p.add_argument("--emit-scores", help="per-frame score CSV (time_s, score)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("evaluate", help="event-F1 and PSDS against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--metrics", default="event,psds")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--roc-out")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="shuffled-query sensitivity probe")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_probe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ground" and args.dataset is None and args.model is None:
        print("tagkit: error: ground needs --model", file=sys.stderr)
        return 2
    if args.command == "ground" and args.dataset and not args.random_baseline and args.model is None:
        print("tagkit: error: ground --dataset needs --model or --random-baseline", file=sys.stderr)
        return 2
    if args.median < 1 if hasattr(args, "median") else False:
        print("tagkit: error: --median must be a positive odd integer", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, DatasetError, dsp.AudioError, MetricError, ValueError) as exc:
        print(f"tagkit: error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"tagkit: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
