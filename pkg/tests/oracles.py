"""Independent reference implementations: straight loops and dense algebra only."""
from __future__ import annotations

import itertools
import math
from collections import deque
from fractions import Fraction

import numpy as np


def dense_norm_adj(n, edges, weights=None):
    a = np.zeros((n, n))
    for idx, (u, v) in enumerate(edges):
        w = 1.0 if weights is None else weights[idx]
        a[u, v] = a[v, u] = w
    a += np.eye(n)
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def layer_norm(x, gain, bias, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[i] = gain * (row - mu) / math.sqrt(var + eps) + bias
    return out


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def local_fusion(Z, A_hat, W_qL, gain, bias, l, hidden):
    n = len(Z)
    H = [np.linalg.matrix_power(A_hat, t) @ Z for t in range(1, l + 1)]
    out = np.zeros_like(Z)
    weights = np.zeros((n, l))
    for i in range(n):
        pooled = np.array([max(H[t][i, c] for t in range(l)) for c in range(Z.shape[1])])
        q = pooled @ W_qL
        scores = [float(q @ H[t][i]) / math.sqrt(hidden) for t in range(l)]
        w = softmax(scores)
        weights[i] = w
        out[i] = sum(w[t] * H[t][i] for t in range(l)) + Z[i]
    return layer_norm(out, gain, bias), weights


def global_fusion(Z_L, C, W_qG, gain, bias, beta, heads):
    n, hidden = Z_L.shape
    k = len(C)
    dh = hidden // heads
    Q = Z_L @ W_qG
    G = np.zeros_like(Z_L)
    weights = np.zeros((n, heads, k))
    for i in range(n):
        for m in range(heads):
            sl = slice(m * dh, (m + 1) * dh)
            scores = [float(Q[i, sl] @ C[c, sl]) / math.sqrt(dh) for c in range(k)]
            w = softmax(scores)
            weights[i, m] = w
            G[i, sl] = sum(w[c] * C[c, sl] for c in range(k))
    return layer_norm(beta * G + (1 - beta) * Z_L, gain, bias), weights


def infonce(z1, z2):
    views = [z1, z2]
    n = len(z1)
    total = 0.0
    for e in range(2):
        a, b = views[e], views[1 - e]
        for i in range(n):
            pos = math.exp(float(a[i] @ b[i]))
            neg = 0.0
            for j in range(n):
                if j != i:
                    neg += math.exp(float(a[i] @ a[j])) + math.exp(float(a[i] @ b[j]))
            total += -math.log(pos / (pos + neg))
    return total / (2 * n)


def neighbor_supervised(z1, z2, a, eps=1e-7):
    n = len(z1)
    total = 0.0
    for i in range(n):
        for j in range(n):
            p = min(max((float(z1[i] @ z2[j]) + 1) / 2, eps), 1 - eps)
            total += -a[i][j] * math.log(p) - (1 - a[i][j]) * math.log(1 - p)
    return total / n ** 2


def soft_assignment(z, c):
    q = np.zeros((len(z), len(c)))
    for i in range(len(z)):
        for j in range(len(c)):
            q[i, j] = 1.0 / (1.0 + float(((z[i] - c[j]) ** 2).sum()))
        q[i] /= q[i].sum()
    return q


def clustering_alignment(zs, cs, ps):
    total = 0.0
    for z, c, p in zip(zs, cs, ps):
        q = soft_assignment(z, c)
        kl = 0.0
        for i in range(len(z)):
            for j in range(len(c)):
                if p[i, j] > 0:
                    kl += p[i, j] * math.log(p[i, j] / q[i, j])
        total += kl / len(z)
    return total / 2


def edge_betweenness(n, edges):
    """Sum over unordered pairs of the fraction of shortest paths using each edge."""
    nbrs = {u: set() for u in range(n)}
    for u, v in edges:
        nbrs[u].add(v)
        nbrs[v].add(u)

    def dist_from(s):
        d = {s: 0}
        dq = deque([s])
        while dq:
            u = dq.popleft()
            for w in nbrs[u]:
                if w not in d:
                    d[w] = d[u] + 1
                    dq.append(w)
        return d

    def paths(s, t, d):
        # enumerate every shortest path by walking strictly outward
        if s == t:
            return [[s]]
        out = []
        for w in sorted(nbrs[s]):
            if d.get(w) == d[s] + 1 and t in dist_from(w) and dist_from(w)[t] == d[t] - d[w]:
                out.extend([s] + p for p in paths(w, t, d))
        return out

    score = {tuple(sorted(e)): 0.0 for e in edges}
    for s, t in itertools.combinations(range(n), 2):
        d = dist_from(s)
        if t not in d:
            continue
        ps = paths(s, t, d)
        for p in ps:
            for u, v in zip(p, p[1:]):
                score[(min(u, v), max(u, v))] += 1.0 / len(ps)
    return score


def best_matching(pred, truth):
    """Exhaustive search: most agreements, then highest macro F1, then lexicographically smallest."""
    kp, kt = max(pred) + 1, max(truth) + 1
    counts = np.zeros((kp, kt), dtype=int)
    for p, t in zip(pred, truth):
        counts[p, t] += 1
    best, best_key = None, None
    for choice in itertools.product(range(kt + 1), repeat=kp):
        used = [c for c in choice if c < kt]
        if len(used) != len(set(used)):
            continue
        total = sum(counts[r, c] for r, c in enumerate(choice) if c < kt)
        f1 = sum(Fraction(2 * int(counts[r, c]), int(counts[r].sum() + counts[:, c].sum()))
                 for r, c in enumerate(choice) if c < kt)
        key = (-total, -f1, choice)
        if best_key is None or key < best_key:
            best, best_key = choice, key
    return {r: c for r, c in enumerate(best) if c < kt}


def accuracy(pred, truth, matching):
    return sum(1 for p, t in zip(pred, truth) if matching.get(p) == t) / len(pred)


def macro_f1(pred, truth, matching):
    scores = []
    for cls in sorted(set(truth)):
        tp = sum(1 for p, t in zip(pred, truth) if t == cls and matching.get(p) == cls)
        npred = sum(1 for p in pred if matching.get(p) == cls)
        ntrue = sum(1 for t in truth if t == cls)
        scores.append(Fraction(0) if tp == 0 else Fraction(2 * tp, npred + ntrue))
    return float(sum(scores) / len(scores))


def nmi(pred, truth):
    n = len(pred)
    cp, ct, joint = {}, {}, {}
    for p, t in zip(pred, truth):
        cp[p] = cp.get(p, 0) + 1
        ct[t] = ct.get(t, 0) + 1
        joint[p, t] = joint.get((p, t), 0) + 1
    hp = -sum(c / n * math.log(c / n) for c in cp.values())
    ht = -sum(c / n * math.log(c / n) for c in ct.values())
    if hp == 0 and ht == 0:
        return 1.0
    if hp == 0 or ht == 0:
        return 0.0
    mi = sum(c / n * math.log((c / n) / (cp[p] / n * ct[t] / n)) for (p, t), c in joint.items())
    return mi / ((hp + ht) / 2)


def optimal_inertia(z, k):
    best = math.inf
    for labels in itertools.product(range(k), repeat=len(z)):
        if len(set(labels)) != k:
            continue
        labels = np.array(labels)
        inertia = sum(((z[labels == j] - z[labels == j].mean(0)) ** 2).sum() for j in range(k))
        best = min(best, inertia)
    return best
