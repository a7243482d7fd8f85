"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def q(x) -> Fraction:
    return Fraction(repr(float(x)))


def eligible(ref, hyp, collar=Fraction(1, 10), tol=Fraction(1, 5)) -> bool:
    (r_on, r_off), (h_on, h_off) = (tuple(map(q, ref)), tuple(map(q, hyp)))
    return abs(h_on - r_on) <= collar and abs(h_off - r_off) <= max(collar, tol * (r_off - r_on))


def max_matching(ref, hyp) -> int:
    """Maximum one-to-one matching size by exhaustive search over assignments."""
    best = 0
    n, m = len(ref), len(hyp)
    for k in range(min(n, m), 0, -1):
        for refs in itertools.permutations(range(n), k):
            for hyps in itertools.combinations(range(m), k):
                if all(eligible(ref[r], hyp[h]) for r, h in zip(refs, hyps)):
                    return k
    return best


def greedy_trace(ref, hyp):
    """Step-by-step record of the onset-order greedy rule.

    Returns (pairs, blocked): pairs are (hyp_idx, ref_idx) into onset-sorted
    lists; blocked lists hypotheses that had an eligible reference which an
    earlier hypothesis had already taken.
    """
    ref = sorted(ref, key=lambda s: (q(s[0]), q(s[1])))
    hyp = sorted(hyp, key=lambda s: (q(s[0]), q(s[1])))
    owner = {}
    pairs, blocked = [], []
    for h, hs in enumerate(hyp):
        options = [r for r, rs in enumerate(ref) if eligible(rs, hs)]
        free = [r for r in options if r not in owner]
        if free:
            owner[free[0]] = h
            pairs.append((h, free[0]))
        elif options:
            blocked.append(h)
    return pairs, blocked


def brute_event_counts(ref: dict, hyp: dict):
    tp = fp = fn = 0
    for key in set(ref) | set(hyp):
        r, h = ref.get(key, []), hyp.get(key, [])
        n = len(greedy_trace(r, h)[0])
        tp, fp, fn = tp + n, fp + len(h) - n, fn + len(r) - n
    return tp, fp, fn


def psds_reference(ref, scores, total_s, thresholds, dtc=0.5, gtc=0.5, e_max=100.0, shift=0.02):
    """Float-free (Fraction) PSDS for a single class per key, alpha_ct = alpha_st = 0."""
    shift = Fraction(str(shift))
    classes = sorted({k[1] for k in ref} | {k[1] for k in scores})
    n_ref = {c: sum(len(v) for k, v in ref.items() if k[1] == c) for c in classes}
    points = []
    for th in thresholds:
        tp = {c: 0 for c in classes}
        fp = 0
        for key, s in scores.items():
            active = np.asarray(s) > th
            dets, t = [], 0
            while t < len(active):
                if active[t]:
                    u = t
                    while u < len(active) and active[u]:
                        u += 1
                    dets.append((t * shift, u * shift))
                    t = u
                else:
                    t += 1
            gts = [(q(a), q(b)) for a, b in ref.get(key, [])]
            valid = []
            for d in dets:
                inter = sum(max(Fraction(0), min(d[1], g[1]) - max(d[0], g[0])) for g in gts)
                if inter >= Fraction(str(dtc)) * (d[1] - d[0]):
                    valid.append(d)
                else:
                    fp += 1
            for g in gts:
                cov = sum(max(Fraction(0), min(d[1], g[1]) - max(d[0], g[0])) for d in valid)
                if cov >= Fraction(str(gtc)) * (g[1] - g[0]):
                    tp[key[1]] += 1
        tprs = [tp[c] / n_ref[c] for c in classes if n_ref[c]]
        points.append((fp / (total_s / 3600.0), float(np.mean(tprs)) if tprs else 0.0))
    xs = sorted({p[0] for p in points if p[0] <= e_max})
    area = 0.0
    for i, x in enumerate(xs):
        right = xs[i + 1] if i + 1 < len(xs) else e_max
        env = max(t for e, t in points if e <= x)
        area += env * (right - x)
    return area / e_max
