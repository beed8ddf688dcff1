"""Independent straight-line oracles used by the tests.

Everything here is deliberately written as plain loops over scalars, without
reusing any package internals, so each oracle stays independent of the code
path it checks.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# Forward-pass oracle (scalar loops, no vectorization)


def forward_straightline(params, slide):
    """Recompute every trace field with explicit per-element loops."""
    Wp, bp = params.patch_proj_w, params.patch_proj_b
    Vp, Up, wp = params.patch_attn.V, params.patch_attn.U, params.patch_attn.w
    Wr, br = params.region_proj_w, params.region_proj_b
    Wm, bm = params.region_mlp_w, params.region_mlp_b
    Vs, Us, ws = params.slide_attn.V, params.slide_attn.U, params.slide_attn.w
    Wg = params.align_g
    Wh, bh = params.head_w, params.head_b

    d_model = Wp.shape[1]
    d_attn = Vp.shape[1]
    n_r = slide.regions.shape[0]
    k2 = slide.patches.shape[1]
    d_vis = slide.regions.shape[1]
    c_total = Wh.shape[1]
    c_text = Wg.shape[1]

    def sigmoid(x):
        return 1.0 / (1.0 + math.exp(-x))

    patch_att = np.zeros((n_r, k2))
    Z = np.zeros((n_r, d_model))
    for r in range(n_r):
        toks = np.zeros((k2, d_model))
        for j in range(k2):
            for d in range(d_model):
                acc = bp[d]
                for v in range(d_vis):
                    acc += float(slide.patches[r, j, v]) * Wp[v, d]
                toks[j, d] = math.tanh(acc)
        scores = np.zeros(k2)
        for j in range(k2):
            s = 0.0
            for a in range(d_attn):
                t = sum(toks[j, d] * Vp[d, a] for d in range(d_model))
                u = sum(toks[j, d] * Up[d, a] for d in range(d_model))
                s += wp[a] * math.tanh(t) * sigmoid(u)
            scores[j] = s
        mx = max(scores)
        exps = [math.exp(s - mx) for s in scores]
        tot = sum(exps)
        for j in range(k2):
            patch_att[r, j] = exps[j] / tot
        pooled = np.zeros(d_model)
        for d in range(d_model):
            pooled[d] = sum(patch_att[r, j] * toks[j, d] for j in range(k2))
        proj = np.zeros(d_model)
        for d in range(d_model):
            acc = br[d]
            for v in range(d_vis):
                acc += float(slide.regions[r, v]) * Wr[v, d]
            proj[d] = math.tanh(acc)
        token = pooled + proj
        for d in range(d_model):
            acc = bm[d]
            for d2 in range(d_model):
                acc += token[d2] * Wm[d2, d]
            Z[r, d] = math.tanh(acc)

    scores = np.zeros(n_r)
    for r in range(n_r):
        s = 0.0
        for a in range(d_attn):
            t = sum(Z[r, d] * Vs[d, a] for d in range(d_model))
            u = sum(Z[r, d] * Us[d, a] for d in range(d_model))
            s += ws[a] * math.tanh(t) * sigmoid(u)
        scores[r] = s
    mx = max(scores)
    exps = [math.exp(s - mx) for s in scores]
    tot = sum(exps)
    slide_att = np.array([e / tot for e in exps])
    h = np.zeros(d_model)
    for d in range(d_model):
        h[d] = sum(slide_att[r] * Z[r, d] for r in range(n_r))

    logits = np.zeros(c_total)
    for c in range(c_total):
        logits[c] = bh[c] + sum(h[d] * Wh[d, c] for d in range(d_model))
    mx = max(logits)
    exps = [math.exp(l - mx) for l in logits]
    tot = sum(exps)
    probs = np.array([e / tot for e in exps])

    gz = np.zeros((n_r, c_text))
    for r in range(n_r):
        raw = np.zeros(c_text)
        for c in range(c_text):
            raw[c] = sum(Z[r, d] * Wg[d, c] for d in range(d_model))
        norm = math.sqrt(sum(x * x for x in raw))
        gz[r] = raw / norm
    return dict(patch_attention=patch_att, region_features_z=Z,
                aligned_gz=gz, slide_attention=slide_att, slide_embedding=h,
                logits=logits, probs=probs)


# ---------------------------------------------------------------------------
# Finite differences


def fd_gradient_entry(fn, arr, index, step=1e-5):
    old = arr.flat[index]
    arr.flat[index] = old + step
    fp = fn()
    arr.flat[index] = old - step
    fm = fn()
    arr.flat[index] = old
    return (fp - fm) / (2.0 * step)


def rel_err(a, b, floor=1e-4):
    """|a-b| relative to the larger magnitude, absolute below ``floor``."""
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# Loss oracles


def infonce_enumeration(gz_rows, cls_vecs, neg_vecs, target, tau,
                        include_positive):
    """Brute-force enumeration of every score term, region by region."""
    total = 0.0
    for g in gz_rows:
        num = math.exp(tau * float(np.dot(g, cls_vecs[target])))
        denom = 0.0
        for k, p in enumerate(cls_vecs):
            if k == target and not include_positive:
                continue
            denom += math.exp(tau * float(np.dot(g, p)))
        if not include_positive:
            pass
        for p in neg_vecs:
            denom += math.exp(tau * float(np.dot(g, p)))
        total += -math.log(num / denom)
    return total / len(gz_rows)


def self_similarity_elementwise(z, gz):
    n = len(z)
    total = 0.0
    for a in range(n):
        for b in range(n):
            gg = float(np.dot(gz[a], gz[b]))
            zz = float(np.dot(z[a], z[b]))
            total += (gg - zz) ** 2
    return total


# ---------------------------------------------------------------------------
# Metric oracles (ten-line loop translations)


def class_il_count(logit_rows, truths):
    hits = 0
    for row, y in zip(logit_rows, truths):
        best, arg = -math.inf, -1
        for j, v in enumerate(row):
            if v > best:
                best, arg = v, j
        hits += int(arg == y)
    return hits / len(truths)


def masked_count(logit_rows, truths, task_ids, ranges):
    hits = 0
    for row, y, t in zip(logit_rows, truths, task_ids):
        s, e = ranges[t]
        best, arg = -math.inf, -1
        for j in range(s, e):
            if row[j] > best:
                best, arg = row[j], j
        hits += int(arg == y)
    return hits / len(truths)


def auc_pair_counting(scores, truths, cls):
    """All-pairs counting oracle; ties count one half."""
    pos = [s for s, y in zip(scores, truths) if y == cls]
    neg = [s for s, y in zip(scores, truths) if y != cls]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def macro_auc_oracle(score_rows, truths):
    vals = []
    for c in range(len(score_rows[0])):
        v = auc_pair_counting([row[c] for row in score_rows], truths, c)
        if v is not None:
            vals.append(v)
    return sum(vals) / len(vals)


def mean_accuracy_oracle(acc):
    n = len(acc)
    total = 0.0
    for t in range(1, n + 1):
        total += sum(acc[t - 1][i - 1] for i in range(1, t + 1)) / t
    return total / n


def bwt_oracle(acc):
    n = len(acc)
    return sum(acc[n - 1][t - 1] - acc[t - 1][t - 1]
               for t in range(1, n)) / (n - 1)


def fwt_oracle(acc, rand):
    n = len(acc)
    return sum(acc[t - 2][t - 1] - rand[t - 1] for t in range(2, n + 1)) / (n - 1)


def fgt_oracle(acc):
    n = len(acc)
    total = 0.0
    for t in range(1, n + 1):
        best = max(acc[d - 1][t - 1] for d in range(t, n + 1))
        total += best - acc[n - 1][t - 1]
    return total / n
