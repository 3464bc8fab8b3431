"""Pure numpy k-NN scan. Reference for, and fallback to, the compiled kernel."""
import numpy as np

FEATURE_DIM = 27


def pairwise_distance(features, query, weights):
    """Weighted distance from ``query`` (27,) to every row of ``features`` (n, 27).

    ``weights`` is ``[u_pos x3, u_rot x3, u_open x3, u_obj]`` with slots ordered
    oldest first. Rotation terms use the geodesic angle between quaternions.
    """
    total = None
    for s in range(3):
        o = 8 * s
        dp = features[:, o:o + 3] - query[o:o + 3]
        dpos = (dp[:, 0] * dp[:, 0] + dp[:, 1] * dp[:, 1]) + dp[:, 2] * dp[:, 2]
        qa = features[:, o + 3:o + 7]
        qb = query[o + 3:o + 7]
        dot = qa @ qb
        sgn = np.where(dot < 0.0, -1.0, 1.0)[:, None]
        diff = qa - sgn * qb
        summ = qa + sgn * qb
        nd = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        ns = np.sqrt(np.einsum("ij,ij->i", summ, summ))
        theta = 4.0 * np.arctan2(nd, ns)
        dop = features[:, o + 7] - query[o + 7]
        term = (weights[s] * dpos + weights[3 + s] * (theta * theta)) + weights[6 + s] * (dop * dop)
        total = term if total is None else total + term
    do = features[:, 24:27] - query[24:27]
    dobj = (do[:, 0] * do[:, 0] + do[:, 1] * do[:, 1]) + do[:, 2] * do[:, 2]
    return total + weights[9] * dobj


def knn_query(features, query, weights, k, exclude=-1):
    """Exact k nearest rows, ascending distance, ties broken by lower row id."""
    d = pairwise_distance(features, query, weights)
    if exclude >= 0:
        d[exclude] = np.inf
    n = len(d)
    k = min(k, n - (1 if exclude >= 0 else 0))
    kth = np.partition(d, k - 1)[k - 1]
    cand = np.flatnonzero(d <= kth)
    order = cand[np.lexsort((cand, d[cand]))][:k]
    return order.astype(np.int64), d[order]


def knn_query_loo(features, weights, k, rows):
    """Leave-one-out k-NN for each row id in ``rows``; returns (ids, dists) of shape (m, k)."""
    rows = np.asarray(rows, dtype=np.int64)
    ids = np.empty((len(rows), k), dtype=np.int64)
    dists = np.empty((len(rows), k))
    for j, r in enumerate(rows):
        ids[j], dists[j] = knn_query(features, features[r], weights, k, exclude=int(r))
    return ids, dists
