"""Acceptance checks, one PASS/FAIL line per criterion.

Under pytest the lines are repeated in the terminal summary. The module also
runs on its own:

    python tests/test_acceptance.py

``TAGKIT_ACCEPT_EPOCHS`` overrides the epoch cap of the end-to-end run.
"""
from __future__ import annotations

import itertools
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import greedy_trace, max_matching, psds_reference
from tagkit import cli
from tagkit.chunk import extract_phrases
from tagkit.data import generate_synthetic, random_baseline, shuffle_phrase_probe, synth_clip
from tagkit.metrics import PsdsConfig, event_f1, psds
from tagkit.model import (AudioEncoderConfig, FrameScores, GroundingModel, Vocabulary, bce_loss, decode_segments,
                          frames_from_segments, similarity)
from tagkit.pipeline import decode_all, evaluate_scores, predict_dataset
from tagkit.tensor import core as tc
from tagkit.tensor import nn as tnn
from tagkit.tensor.core import Tensor
from tagkit.tensor.gradcheck import check_gradients
from tagkit.train import TrainConfig, build_samples, build_vocab, clip_features, train

RESULTS: dict[int, str] = {}
E2E_EPOCHS = int(os.environ.get("TAGKIT_ACCEPT_EPOCHS", "20"))


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n} ({title}): {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


# -- 1. gradient fidelity -------------------------------------------------------

def _signed(rng, shape, lo=0.1):
    return rng.uniform(lo, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _bigru_inputs(rng, In, H):
    ps = {}
    for d in ("fwd", "bwd"):
        ps[f"{d}_w_ih"] = rng.normal(size=(3 * H, In)) * 0.5
        ps[f"{d}_w_hh"] = rng.normal(size=(3 * H, H)) * 0.5
        ps[f"{d}_b_ih"] = rng.normal(size=3 * H) * 0.1
        ps[f"{d}_b_hh"] = rng.normal(size=3 * H) * 0.1
    return ps


def _kernel_cases(seed):
    """(name, fn, inputs) for every differentiable kernel at one seed."""
    rng = np.random.default_rng(seed)
    x3 = rng.normal(size=(2, 3, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    bn_state = tnn.BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    ids = rng.integers(0, 5, size=(2, 3))
    labels = np.array([[1, 0, 1, 1], [0, 1, 0, 0]])
    cases = [
        ("add", lambda a, b: a + b, {"a": x3, "b": rng.normal(size=(3, 1))}),
        ("sub", lambda a, b: a - b, {"a": x3, "b": rng.normal(size=(4,))}),
        ("mul", lambda a, b: a * b, {"a": x3, "b": rng.normal(size=x3.shape)}),
        ("div", lambda a, b: a / (b * b + 1.0), {"a": x3, "b": rng.normal(size=x3.shape)}),
        ("power", lambda a: tc.power(a * a + 1.0, 1.5), {"a": x3}),
        ("exp", tc.exp, {"a": x3}),
        ("log", lambda a: tc.log(a * a + 0.5), {"a": x3}),
        ("sigmoid", tc.sigmoid, {"a": x3}),
        ("tanh", tc.tanh, {"a": x3}),
        ("leaky_relu", lambda a: tc.leaky_relu(a, 0.1), {"a": _signed(rng, (3, 4))}),
        ("clip", lambda a: tc.clip(a, -0.5, 0.5),
         {"a": np.concatenate([rng.uniform(-0.4, 0.4, 6), rng.uniform(0.6, 2.0, 6) * rng.choice([-1, 1], 6)])}),
        ("matmul", lambda a, b: a @ b, {"a": x3, "b": rng.normal(size=(4, 5))}),
        ("sum", lambda a: a.sum(axis=1), {"a": x3}),
        ("mean", lambda a: a.mean(axis=(0, 2), keepdims=True), {"a": x3}),
        ("reshape_transpose", lambda a: a.reshape(6, 4).transpose(1, 0), {"a": x3}),
        ("getitem", lambda a: a[:, [0, 2, 0], 1:], {"a": x3}),
        ("concat", lambda a, b: tc.concat([a, b], axis=1), {"a": x3, "b": rng.normal(size=(2, 2, 4))}),
        ("stack", lambda a, b: tc.stack([a, b]), {"a": x3, "b": rng.normal(size=x3.shape)}),
        ("conv3x3", tnn.conv2d_3x3_same,
         {"x": rng.normal(size=(1, 2, 5, 4)), "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}),
        ("lp_pool", lambda x: tnn.lp_pool(x, 2, 2, p=4, channels_last=True), {"x": _signed(rng, (2, 4, 4, 2))}),
        ("batch_norm_train_masked",
         lambda x, g, b: tnn.batch_norm(x, g, b, bn_state, True, mask=mask, channels_last=True),
         {"x": rng.normal(size=(2, 4, 2, 3)), "g": rng.normal(size=3), "b": rng.normal(size=3)}),
        ("batch_norm_eval",
         lambda x, g, b: tnn.batch_norm(x, g, b, bn_state, False, channels_last=True),
         {"x": rng.normal(size=(2, 4, 2, 3)), "g": rng.normal(size=3), "b": rng.normal(size=3)}),
        ("linear", tnn.linear, {"x": x3, "w": rng.normal(size=(5, 4)), "b": rng.normal(size=5)}),
        ("embedding", lambda t: tnn.embedding_lookup(t, ids), {"t": rng.normal(size=(5, 3))}),
        ("mean_over_axis_masked", lambda x: tnn.mean_over_axis(x, axis=1, mask=mask[:, :3]), {"x": x3}),
        ("l2_norm", lambda x: tnn.l2_norm_over_axis(x, axis=-1), {"x": x3}),
        ("nearest_upsample", lambda x: tnn.nearest_upsample_time(x, 3), {"x": x3}),
        ("bigru_masked",
         lambda x, **p: tnn.bigru(x, {"gru." + k.replace("_", ".", 1): v for k, v in p.items()}, mask=mask),
         {"x": rng.normal(size=(2, 4, 3)), **_bigru_inputs(rng, 3, 2)}),
        ("similarity", similarity, {"e_audio": rng.normal(size=(2, 5, 4)) * 0.3,
                                    "e_phrase": rng.normal(size=(2, 4)) * 0.3}),
        ("bce_masked", lambda s: bce_loss(s, labels, mask),
         {"s": rng.uniform(0.05, 0.95, size=(2, 4))}),
    ]
    return cases


def _full_model_case(seed):
    cfg = AudioEncoderConfig(conv_channels=(2, 2, 2, 2, 2), gru_hidden=3, embed_dim=6)
    model = GroundingModel(Vocabulary(["<unk>", "a", "dog", "barks", "bird"]), cfg, seed=seed)
    rng = np.random.default_rng(seed)
    T = 8 + seed % 3
    feats = rng.normal(size=(2, T, 64))
    labels = (rng.random((2, T)) < 0.5).astype(float)
    lengths = [T, T - 3]
    mask = tnn.time_mask(lengths, T)
    names = sorted(model.params)

    def loss_fn(**ps):
        saved = dict(model.params)
        try:
            for k in names:
                model.params[k] = ps[k.replace(".", "__")]
            return bce_loss(model.score(feats, lengths, [[1, 2, 3], [4]], training=True), labels, mask)
        finally:
            model.params.update(saved)

    return "full_model_loss", loss_fn, {k.replace(".", "__"): model.params[k].data.copy() for k in names}


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    worst, worst_name, n = 0.0, "", 0
    for seed in (0, 1):
        for name, fn, inputs in _kernel_cases(seed) + [_full_model_case(seed)]:
            err = max(check_gradients(fn, inputs, seed=seed).values())
            n += 1
            if err > worst:
                worst, worst_name = err, f"{name}@seed{seed}"
    elapsed = time.perf_counter() - t0
    report(1, "gradient fidelity", worst < 1e-4 and n >= 20 and elapsed < 120,
           f"{n} configurations, max rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s")


# -- 2. event-F1 vs exhaustive matcher --------------------------------------------

def _small_instance(rng):
    """Up to 4 events a side; every third instance crowds onsets so greedy can fall short."""
    spread = 8 if rng.random() < 1 / 3 else 60

    def events(k):
        out = []
        for _ in range(k):
            on = rng.integers(0, spread) * 0.05
            out.append((round(on, 2), round(on + rng.integers(2, 40) * 0.05, 2)))
        return out
    ref = events(int(rng.integers(0, 5)))
    hyp = [(round(a + rng.integers(-3, 4) * 0.05, 2), round(b + rng.integers(-6, 7) * 0.05, 2))
           for a, b in ref if rng.random() < 0.8]
    hyp += events(int(rng.integers(0, 5 - len(hyp)))) if len(hyp) < 4 else []
    hyp = [(max(a, 0.0), b) for a, b in hyp if b > max(a, 0.0)]
    return ref, hyp


def test_criterion_2_metric_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    agree = diverge = unexplained = 0
    for _ in range(1000):
        ref, hyp = _small_instance(rng)
        got = event_f1({("c", "x"): ref}, {("c", "x"): hyp})
        best = max_matching(ref, hyp)
        pairs, blocked = greedy_trace(ref, hyp)
        consistent = got.tp == len(pairs) and got.fp == len(hyp) - got.tp and got.fn == len(ref) - got.tp
        if got.tp == best and consistent:
            agree += 1
        elif got.tp < best and consistent and blocked:
            diverge += 1  # an earlier-onset hypothesis took the only reference a later one could match
        else:
            unexplained += 1
    elapsed = time.perf_counter() - t0
    report(2, "metric oracle equivalence", unexplained == 0 and elapsed < 60,
           f"1000 instances: {agree} equal to maximum matching, {diverge} order-rule divergences "
           f"confirmed by trace, {unexplained} unexplained, {elapsed:.1f}s")


# -- 3. PSDS definitional checks ----------------------------------------------------

def _indicator(segs, T=500):
    return frames_from_segments(segs, T).astype(float)


def _fuzz_case(rng):
    ref, scores = {}, {}
    for c, cls in itertools.product(range(3), ("x", "y")):
        segs, t = [], 0.0
        for _ in range(rng.integers(0, 3)):
            on = round(t + rng.integers(1, 100) * 0.02, 2)
            off = round(on + rng.integers(5, 100) * 0.02, 2)
            if off > 10.0:
                break
            segs.append((on, off))
            t = off
        if segs:
            ref[(f"c{c}", cls)] = segs
        noise = rng.uniform(0, 1, 500) * rng.uniform(0, 1)
        scores[(f"c{c}", cls)] = np.clip(_indicator(segs) * rng.uniform(0.3, 1) + noise, 0, 1)
    return ref, scores


def test_criterion_3_psds_definitions():
    t0 = time.perf_counter()
    ref = {("c1", "x"): [(1.0, 2.5)], ("c1", "y"): [(3.0, 9.0)], ("c2", "x"): [(0.0, 10.0)]}
    perfect, _ = psds(ref, {k: _indicator(v) for k, v in ref.items()}, 20.0)
    zero, _ = psds(ref, {k: np.zeros(500) for k in ref}, 20.0)
    dtc, roc = psds({("c", "x"): [(2.0, 4.0)]}, {("c", "x"): np.full(500, 0.8)}, 10.0)
    dtc_ok = dtc == 0.0 and (roc.etpr == 0).all() and all(
        roc.fp_counts[i]["x"] == 1 for i in np.flatnonzero(roc.thresholds < 0.8))
    rng = np.random.default_rng(33)
    thresholds = tuple(np.round(np.linspace(0.05, 0.95, 12), 6).tolist())
    fuzz_bad = []
    for i in range(20):
        r, s = _fuzz_case(rng)
        cfg = PsdsConfig(thresholds=thresholds, e_max=1000.0)
        v, _ = psds(r, s, 30.0, cfg)
        v_perm, _ = psds(r, s, 30.0, PsdsConfig(thresholds=tuple(rng.permutation(thresholds).tolist()),
                                                e_max=1000.0))
        v_ref = psds_reference(r, s, 30.0, thresholds, e_max=1000.0)
        if not (0.0 <= v <= 1.0 and v_perm == v and abs(v - v_ref) <= 1e-12):
            fuzz_bad.append(i)
    elapsed = time.perf_counter() - t0
    ok = abs(perfect - 1.0) <= 1e-9 and zero == 0.0 and dtc_ok and not fuzz_bad and elapsed < 60
    report(3, "PSDS definitional checks", ok,
           f"perfect {perfect:.12f}, zeros {zero}, DTC counterexample {'ok' if dtc_ok else 'WRONG'}, "
           f"fuzz failures {fuzz_bad or 'none'} of 20, {elapsed:.1f}s")


# -- 4 and 5. end-to-end learning and the query probe ---------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    splits = {name: generate_synthetic(n, seed=seed, out_dir=root, split=name)
              for name, n, seed in (("train", 200, 1), ("val", 20, 2), ("test", 40, 3))}
    feats = {k: clip_features(v) for k, v in splits.items()}
    result = train(build_samples(splits["train"], feats["train"]), build_samples(splits["val"], feats["val"]),
                   build_vocab(splits["train"]), TrainConfig(max_epochs=E2E_EPOCHS, seed=0))
    test = splits["test"]
    model_scores = evaluate_scores(test, predict_dataset(result.model, test, feats["test"]))
    rand_scores = evaluate_scores(test, random_baseline(test.clips, seed=0))
    return {"model": result.model, "result": result, "test": test, "feats": feats["test"],
            "model_scores": model_scores, "rand_scores": rand_scores, "elapsed": time.perf_counter() - t0}


def test_criterion_4_end_to_end_learning(trained):
    m, r = trained["model_scores"], trained["rand_scores"]
    res = trained["result"]
    f1, p = m["event"]["f1"], m["psds"]  # event-F1 is already in percent
    rf1, rp = r["event"]["f1"], r["psds"]
    elapsed = trained["elapsed"]
    ok = f1 >= 60 and p >= 0.30 and rf1 < 2 and rp < 0.02 and elapsed < 1800
    report(4, "end-to-end learning", ok,
           f"model F1 {f1:.2f}% PSDS {p:.3f}; random F1 {rf1:.2f}% PSDS {rp:.3f}; "
           f"{len(res.history)} epochs (best {res.best_epoch}), {elapsed / 60:.1f} min")


def test_criterion_5_query_probe(trained):
    t0 = time.perf_counter()
    model, test, feats = trained["model"], trained["test"], trained["feats"]
    f1s = []
    for split in (test, shuffle_phrase_probe(test, seed=0)):
        f1s.append(event_f1(split.event_list(), decode_all(predict_dataset(model, split, feats))).f1)
    elapsed = time.perf_counter() - t0
    report(5, "query-sensitivity probe", f1s[1] < f1s[0] and elapsed < 120,
           f"original F1 {f1s[0]:.2f}%, shuffled F1 {f1s[1]:.2f}%, {elapsed:.1f}s")


# -- 6. similarity and loss closed forms -----------------------------------------------

def test_criterion_6_similarity_and_loss():
    rng = np.random.default_rng(6)
    lo, hi = 1.0, 0.0
    for _ in range(500):
        d = int(rng.integers(1, 257))
        scale = 10 ** rng.uniform(-3, 1)
        s = similarity(Tensor(rng.normal(size=(7, d)) * scale), Tensor(rng.normal(size=d) * scale)).data
        lo, hi = min(lo, s.min()), max(hi, s.max())
    same = similarity(Tensor(np.ones((1, 4))), Tensor(np.ones(4))).data[0]
    worst_half = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 257))
        e_p = rng.normal(size=d)
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        s = similarity(Tensor((e_p + math.log(2) * u)[None]), Tensor(e_p)).data[0]
        worst_half = max(worst_half, abs(s - 0.5))
    bce = float(bce_loss(Tensor(np.full(50, 0.5)), rng.integers(0, 2, 50)).data)
    ok = lo > 0 and hi <= 1 and same == 1.0 and worst_half <= 1e-12 and abs(bce - math.log(2)) <= 1e-12
    report(6, "similarity/loss analytics", ok,
           f"s in [{lo:.3e}, {hi}], |s(ln2) - 0.5| <= {worst_half:.1e}, |BCE(0.5) - ln2| = {abs(bce - math.log(2)):.1e}")


# -- 7. round-trips -------------------------------------------------------------------

def _grid_layout(rng, T=500):
    segs, pos = [], 0
    for _ in range(rng.integers(0, 8)):
        on = pos + int(rng.integers(1 if segs else 0, 30))
        off = on + int(rng.integers(1, 60))
        if off > T:
            break
        segs.append((round(on * 0.02, 2), round(off * 0.02, 2)))
        pos = off
    return segs


def test_criterion_7_round_trips(tmp_path):
    model = GroundingModel(Vocabulary(["<unk>", "a", "dog", "barks"]), seed=7)
    rng = np.random.default_rng(7)
    for st in model.bn.values():
        st.running_mean = rng.normal(size=st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, size=st.running_var.shape)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    model.save(a)
    back = GroundingModel.load(a)
    back.save(b)
    rec, rec_back = model.state_records(), back.state_records()
    ckpt_ok = a.read_bytes() == b.read_bytes() and rec.keys() == rec_back.keys() and all(
        rec[k].tobytes() == rec_back[k].tobytes() for k in rec)
    decode_fail = 0
    for _ in range(500):
        segs = _grid_layout(rng)
        if decode_segments(FrameScores(_indicator(segs))) != segs:
            decode_fail += 1
    missed = []
    for i in range(100):
        clip, _ = synth_clip(i, seed=7, split="test")
        got = {p["text"] for p in extract_phrases(clip.caption)}
        missed += [p.text for p in clip.phrases if p.text not in got]
    ok = ckpt_ok and decode_fail == 0 and not missed
    report(7, "round-trips", ok,
           f"checkpoint bit-exact {ckpt_ok}, decode∘frames failures {decode_fail}/500, "
           f"chunker missed {len(missed)} phrases over 100 clips")


# -- 8. determinism -------------------------------------------------------------------

def _pipeline(root: Path) -> dict[str, bytes]:
    def run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv
    for split, n, seed in (("train", 8, 1), ("val", 4, 2), ("test", 4, 3)):
        run("gen-data", "--out", root, "--clips", n, "--seed", seed, "--split", split)
    ck = root / "model.ckpt"
    run("train", "--train", root / "train.json", "--val", root / "val.json", "--out", ck, "--seed", 5,
        "--epochs", 2)
    run("ground", "--model", ck, "--dataset", root / "test.json", "--out", root / "hyp.jsonl")
    run("evaluate", "--ref", root / "test.json", "--hyp", root / "hyp.jsonl", "--out", root / "metrics.json")
    return {name: (root / name).read_bytes()
            for name in ("model.ckpt", "model.ckpt.log.csv", "hyp.jsonl", "metrics.json")}


def test_criterion_8_determinism(tmp_path, capsys):
    first, second = _pipeline(tmp_path / "run1"), _pipeline(tmp_path / "run2")
    capsys.readouterr()
    differ = [k for k in first if first[k] != second[k]]
    with capsys.disabled():
        report(8, "determinism", not differ,
               f"checkpoint, log, hypotheses and metrics identical across runs"
               if not differ else f"differing artifacts: {differ}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
