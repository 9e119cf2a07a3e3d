"""Brute-force reference implementations used by the metric tests."""

import itertools
import math
from fractions import Fraction

GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_youden(scores, labels):
    """Sweep every cut of the descending score order that does not split a tie."""
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    order = sorted(zip(scores, labels), key=lambda t: -t[0])
    best = None
    for k in range(len(order) + 1):
        if 0 < k < len(order) and order[k - 1][0] == order[k][0]:
            continue
        predicted = order[:k]
        tp = sum(y for _, y in predicted)
        tn = n_neg - (k - tp)
        j = Fraction(tp, n_pos) + Fraction(tn, n_neg) - 1
        if k == 0:
            thr = math.inf
        elif k == len(order):
            thr = -math.inf
        else:
            thr = (order[k - 1][0] + order[k][0]) / 2.0
        key = (j, tp, -thr)
        if best is None or key > best[0]:
            best = (key, thr, Fraction(tp, n_pos), Fraction(tn, n_neg))
    return best[1], best[2], best[3]


def all_multisets(max_size):
    """Every multiset of (score, label) pairs over ``GRID`` with both classes present."""
    pairs = [(s, y) for s in GRID for y in (0, 1)]
    for n in range(2, max_size + 1):
        for combo in itertools.combinations_with_replacement(pairs, n):
            labels = [y for _, y in combo]
            if 0 < sum(labels) < n:
                yield [s for s, _ in combo], labels
