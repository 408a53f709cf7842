"""Reference implementations shared by the test modules.

These are deliberately naive: plain loops, no shared code with the package
internals they are used to check.
"""

import numpy as np


def brute_force_kmeans(points, n_centroids, restarts, seed, iters=100):
    """Best inertia over many random-restart Lloyd runs, all scalar loops.

    ``points`` is (dim, n) column-point data like the package uses.
    """
    x = [points[:, i].astype(float) for i in range(points.shape[1])]
    n = len(x)
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        start = rng.choice(n, size=n_centroids, replace=False)
        cent = [x[i].copy() for i in start]
        assign = [-1] * n
        for _ in range(iters):
            new_assign = []
            for p in x:
                dists = [float(((p - c) ** 2).sum()) for c in cent]
                new_assign.append(dists.index(min(dists)))
            if new_assign == assign:
                break
            assign = new_assign
            for j in range(n_centroids):
                members = [p for p, a in zip(x, assign) if a == j]
                if members:
                    cent[j] = sum(members[1:], members[0].copy()) / len(members)
        inertia = sum(float(((p - cent[a]) ** 2).sum()) for p, a in zip(x, assign))
        best = min(best, inertia)
    return best


def naive_decode(msg):
    """Scalar-loop reconstruction of a quantized message."""
    q = msg.config.subvectors
    sub_dim = msg.dim // q
    per_group = q // msg.config.groups
    out = np.zeros((msg.dim, msg.batch))
    for j in range(msg.batch):
        for s in range(q):
            centroid = msg.codebook[s // per_group, msg.codewords[j, s]]
            for t in range(sub_dim):
                out[s * sub_dim + t, j] = centroid[t]
    return out


def two_blob_points():
    """Two well-separated integer-coordinate blobs in the plane.

    Integer coordinates keep every mean and squared distance exactly
    representable, so independent implementations agree bit for bit.
    """
    blob_a = [(0, 0), (1, 0), (0, 1), (1, 1)]
    blob_b = [(10, 10), (11, 10), (10, 11), (11, 11)]
    return np.array(blob_a + blob_b, dtype=float).T
