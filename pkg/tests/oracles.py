"""Independent slow reference implementations used as test oracles."""

import math

import numpy as np


def brute_window_sim(x, window):
    """max over the window's clips of exp(-|x - y|^2), by explicit loops."""
    best = 0.0
    for y in window:
        d = 0.0
        for a, b in zip(x, y):
            d += (float(a) - float(b)) ** 2
        best = max(best, math.exp(-d))
    return best


def brute_plan_loss(pull, push, emb):
    """Loss of a batch plan with plain loops.

    ``pull``/``push`` map identity -> list of window keys, ``emb`` maps a
    window key to its (5, D) embeddings. Each pull slot is an anchor; its
    pull set is the rest of the identity's pull list.
    """
    total = []
    for ident, slots in pull.items():
        for k, anchor in enumerate(slots):
            others = slots[:k] + slots[k + 1 :]
            for t in range(5):
                x = emb[anchor][t]
                n = math.fsum(brute_window_sim(x, emb[w]) for w in others)
                q = math.fsum(brute_window_sim(x, emb[w]) for w in push[ident])
                total.append(-math.log(n / (n + q)))
    return math.fsum(total)


def mann_whitney_auc(genuine, impostor):
    """P(g < i) + 0.5 P(g == i) by counting every pair."""
    wins = 0.0
    for g in genuine:
        for i in impostor:
            if g < i:
                wins += 1.0
            elif g == i:
                wins += 0.5
    return wins / (len(genuine) * len(impostor))
