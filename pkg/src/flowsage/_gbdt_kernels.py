"""Compiled hot loop for the oblivious-tree split search.

A level's search is one pass per feature: fill (leaf, bin) gradient,
hessian, and count histograms, prefix-sum along bins, then scan the
candidate thresholds. Everything is sequential, so results are
bit-deterministic for identical inputs.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def best_oblivious_split(
    codes_t, n_cuts, leaf, g, h, n_leaves, n_bins, min_leaf, min_split, lam
):
    """Best feasible (feature, bin) split for one level of an oblivious tree.

    Feasibility: every non-empty child leaf must get >= min_leaf rows and
    a leaf may only be truly split (both children non-empty) when it holds
    >= min_split rows. Returns (gain, feature, bin); feature -1 when no
    candidate has positive feasible gain. Ties keep the lowest (feature,
    bin).
    """
    n_features, n = codes_t.shape
    best_gain = 0.0
    best_f = -1
    best_b = -1
    hist_g = np.empty((n_leaves, n_bins))
    hist_h = np.empty((n_leaves, n_bins))
    hist_n = np.empty((n_leaves, n_bins), dtype=np.int64)
    for f in range(n_features):
        nb = n_cuts[f]
        if nb == 0:
            continue
        hist_g[:, :] = 0.0
        hist_h[:, :] = 0.0
        hist_n[:, :] = 0
        row = codes_t[f]
        for i in range(n):
            l = leaf[i]
            c = row[i]
            hist_g[l, c] += g[i]
            hist_h[l, c] += h[i]
            hist_n[l, c] += 1
        for l in range(n_leaves):
            for b in range(1, n_bins):
                hist_g[l, b] += hist_g[l, b - 1]
                hist_h[l, b] += hist_h[l, b - 1]
                hist_n[l, b] += hist_n[l, b - 1]
        parent = 0.0
        for l in range(n_leaves):
            tg = hist_g[l, n_bins - 1]
            th = hist_h[l, n_bins - 1]
            parent += tg * tg / (th + lam)
        for b in range(nb):
            gain = -parent
            feasible = True
            for l in range(n_leaves):
                cl = hist_n[l, b]
                ct = hist_n[l, n_bins - 1]
                cr = ct - cl
                if (0 < cl < min_leaf) or (0 < cr < min_leaf):
                    feasible = False
                    break
                if cl > 0 and cr > 0 and ct < min_split:
                    feasible = False
                    break
                gl = hist_g[l, b]
                hl = hist_h[l, b]
                gr = hist_g[l, n_bins - 1] - gl
                hr = hist_h[l, n_bins - 1] - hl
                gain += gl * gl / (hl + lam) + gr * gr / (hr + lam)
            if feasible and gain > best_gain:
                best_gain = gain
                best_f = f
                best_b = b
    return best_gain, best_f, best_b
