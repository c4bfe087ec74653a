"""Shared oracles for the test suite.

Everything here is deliberately written as a second, independent route:
finite differences instead of analytic gradients, eigendecomposition
instead of SVD, explicit loops instead of vectorized updates. Keep it slow
and obvious.
"""

import numpy as np


def central_diff(f, X, h=1e-5):
    """Central finite differences of scalar f at array X, entry by entry."""
    X = np.asarray(X, dtype=np.float64)
    g = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        Xp = X.copy()
        Xp[idx] += h
        Xm = X.copy()
        Xm[idx] -= h
        g[idx] = (f(Xp) - f(Xm)) / (2.0 * h)
    return g


def net_central_diff(loss_fn, net, h=1e-5):
    """Central differences of loss_fn(net) for every parameter, in
    net.params() order. Mutates parameters in place and restores them."""
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            fp = loss_fn(net)
            p[idx] = orig - h
            fm = loss_fn(net)
            p[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(approx, ref):
    """Frobenius-norm relative error, guarded against a tiny reference."""
    approx = np.asarray(approx, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    denom = max(float(np.linalg.norm(ref.ravel())), 1e-12)
    return float(np.linalg.norm((approx - ref).ravel()) / denom)


def eig_svd(M):
    """Singular values from the eigendecomposition of the Gram matrix,
    descending. Independent route used to check svd_values."""
    M = np.asarray(M, dtype=np.float64)
    G = M.T @ M if M.shape[0] >= M.shape[1] else M @ M.T
    w = np.linalg.eigvalsh(G)
    return np.sqrt(np.clip(w, 0.0, None))[::-1]


def entropy_rank(spectrum):
    """Literal -sum(p log p) evaluation with a python loop."""
    s = [float(v) for v in spectrum if v > 1e-12 * max(spectrum)]
    total = sum(s)
    acc = 0.0
    for v in s:
        p = v / total
        acc -= p * np.log(p)
    return acc


def loop_rank_loss(Z, eps=1e-8):
    """Direct two-step evaluation of the decorrelation penalty: build each
    correlation entry with explicit dot products, then sum the squares."""
    Z = np.asarray(Z, dtype=np.float64)
    Zc = Z - Z.mean(axis=0)
    d = Z.shape[1]
    total = 0.0
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            num = float(Zc[:, i] @ Zc[:, j])
            den = np.sqrt(float(Zc[:, i] @ Zc[:, i]) + eps) * np.sqrt(
                float(Zc[:, j] @ Zc[:, j]) + eps
            )
            total += (num / den) ** 2
    return -total


def naive_average_linkage_order(C):
    """Agglomerative average linkage recomputed from the original distances
    at every step (no incremental update), with the same smallest-index
    tie-break: scan candidate pairs in list order, keep the first minimum."""
    C = np.asarray(C, dtype=np.float64)
    d = C.shape[0]
    D0 = 1.0 - np.abs(C)
    clusters = [[i] for i in range(d)]
    while len(clusters) > 1:
        best = None
        for p in range(len(clusters)):
            for q in range(p + 1, len(clusters)):
                pairs = [D0[i, j] for i in clusters[p] for j in clusters[q]]
                avg = float(np.sum(pairs) / len(pairs))
                if best is None or avg < best[0]:
                    best = (avg, p, q)
        _, p, q = best
        clusters[p] = clusters[p] + clusters[q]
        del clusters[q]
    return np.array(clusters[0])


def softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def per_sample_xent(logits, labels):
    """Per-sample cross-entropy via log-softmax, one row at a time."""
    out = []
    for row, lab in zip(np.asarray(logits, dtype=np.float64), labels):
        z = row - row.max()
        out.append(float(np.log(np.exp(z).sum()) - z[int(lab)]))
    return np.array(out)


def lstsq_probe(train_X, train_y, test_X, test_y, classes):
    """Least-squares one-vs-all linear probe accuracy, in percent.

    Closed form and deterministic, which makes it a convenient reference
    classifier for certifying which blocks of a dataset are linearly
    decodable.
    """
    A = np.hstack([train_X, np.ones((train_X.shape[0], 1))])
    T = np.eye(classes)[train_y]
    W, *_ = np.linalg.lstsq(A, T, rcond=None)
    At = np.hstack([test_X, np.ones((test_X.shape[0], 1))])
    pred = np.argmax(At @ W, axis=1)
    return 100.0 * float(np.mean(pred == test_y))
