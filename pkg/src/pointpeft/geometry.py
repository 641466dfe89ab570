"""Point-cloud kernels: sampling, neighbour search, pooling, propagation.

All index kernels rank by squared Euclidean distance and break ties toward
the smallest index. Batched variants take a leading batch axis; the plain
names accept a single (M, 3) array.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROPAGATE_EPS = 1e-8


def normalize_unit_sphere(coords: np.ndarray) -> np.ndarray:
    c = coords - coords.mean(axis=0)
    r = np.sqrt((c * c).sum(axis=1)).max()
    return c / r if r > 0 else c


def _sqdist(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(..., Q, 3) x (..., R, 3) -> (..., Q, R) squared distances."""
    # per-axis terms added left to right: same rounding as a sum over the last axis
    out = None
    for a in range(3):
        d = q[..., :, None, a] - r[..., None, :, a]
        out = d * d if out is None else out + d * d
    return out


def batch_fps(coords: np.ndarray, n: int, start=0) -> np.ndarray:
    """Farthest point sampling over (B, M, 3); returns (B, n) indices."""
    B, M, _ = coords.shape
    if not 1 <= n <= M:
        raise ValueError(f"farthest_point_sampling: need 1 <= n <= {M}, got n={n}")
    start = np.broadcast_to(np.asarray(start, dtype=np.intp), (B,))
    if np.any(start < 0) or np.any(start >= M):
        raise ValueError(f"farthest_point_sampling: start out of range for M={M}")
    rows = np.arange(B)
    out = np.empty((B, n), dtype=np.intp)
    mind = np.full((B, M), np.inf)
    cur = start.copy()
    for i in range(n):
        out[:, i] = cur
        d = _sqdist(coords[rows, cur][:, None, :], coords)[:, 0]
        np.minimum(mind, d, out=mind)
        cur = mind.argmax(axis=1)
    return out


def farthest_point_sampling(coords: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    return batch_fps(np.asarray(coords)[None], n, start)[0]


def batch_knn(queries: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """(B, N, 3) queries against (B, M, 3) reference -> (B, N, k) indices."""
    M = reference.shape[-2]
    if not 1 <= k <= M:
        raise ValueError(f"k_nearest_neighbors: need 1 <= k <= {M}, got k={k}")
    d = _sqdist(queries, reference)
    if 4 * k > M:
        return np.argsort(d, axis=-1, kind="stable")[..., :k]
    # partial selection; exact unless a distance tie straddles the k-th slot
    part = np.sort(np.argpartition(d, k - 1, axis=-1)[..., :k], axis=-1)
    dsel = np.take_along_axis(d, part, axis=-1)
    kth = dsel.max(axis=-1, keepdims=True)
    if np.any((d <= kth).sum(axis=-1) != k):
        return np.argsort(d, axis=-1, kind="stable")[..., :k]
    order = np.argsort(dsel, axis=-1, kind="stable")
    return np.take_along_axis(part, order, axis=-1)


def k_nearest_neighbors(queries: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    return batch_knn(np.asarray(queries)[None], np.asarray(reference)[None], k)[0]


def group_pool(feats, mode: str = "max") -> Tensor:
    """Reduce (..., N, k, D) groups over the k axis."""
    feats = T.as_tensor(feats)
    if mode == "max":
        return T.max(feats, axis=-2)
    if mode == "mean":
        return T.mean(feats, axis=-2)
    raise ValueError(f"unknown pooling mode {mode!r}")


def batch_propagate(center_coords, center_feats, target_coords, j: int = 3) -> Tensor:
    """Inverse-distance interpolation from centers onto targets (batched).

    center_coords (B, N, 3), center_feats (B, N, D), target_coords (B, P, 3).
    Each target mixes its ``min(j, N)`` nearest centers with weights
    ``1/(d + eps)`` normalised to sum to one. Coordinates may be tensors
    that require grad; the neighbour selection itself is piecewise constant.
    """
    cc = T.as_tensor(center_coords)
    cf = T.as_tensor(center_feats)
    tc = T.as_tensor(target_coords)
    B, N, _ = cc.shape
    P = tc.shape[1]
    jj = min(j, N)
    idx = batch_knn(tc.data, cc.data, jj)
    near = T.gather(cc, idx, batched=True)  # B,P,j,3
    diff = T.sub(near, T.reshape(tc, (B, P, 1, 3)))
    dist = T.sqrt(T.sum(T.square(diff), axis=-1))
    inv = T.reciprocal(T.add_scalar(dist, PROPAGATE_EPS))
    w = T.mul(inv, T.reciprocal(T.sum(inv, axis=-1, keepdims=True)))
    feats = T.gather(cf, idx, batched=True)  # B,P,j,D
    return T.sum(T.mul(feats, T.reshape(w, (B, P, jj, 1))), axis=-2)


def propagate(center_coords, center_feats, target_coords, j: int = 3) -> Tensor:
    """Single-cloud form of ``batch_propagate``: (N,3), (N,D), (P,3) -> (P,D)."""
    def lift(x):
        x = T.as_tensor(x)
        return T.reshape(x, (1,) + x.shape)

    out = batch_propagate(lift(center_coords), lift(center_feats), lift(target_coords), j)
    return T.reshape(out, out.shape[1:])


def propagation_weights(center_coords: np.ndarray, target_coords: np.ndarray, j: int = 3):
    """Dense (P, N) weight matrix used by ``propagate`` (for inspection)."""
    N = center_coords.shape[0]
    jj = min(j, N)
    idx = k_nearest_neighbors(target_coords, center_coords, jj)
    d = np.sqrt(((center_coords[idx] - target_coords[:, None, :]) ** 2).sum(-1))
    inv = 1.0 / (d + PROPAGATE_EPS)
    w = inv / inv.sum(axis=1, keepdims=True)
    dense = np.zeros((target_coords.shape[0], N))
    np.put_along_axis(dense, idx, w, axis=1)
    return dense


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Average of the two directed mean squared nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer_distance: empty point set")
    d = _sqdist(a, b)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def batch_chamfer(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable Chamfer distance per set: (G, S, 3) x (G, S', 3) -> (G,)."""
    p = pred.data
    d = _sqdist(p, target)  # G,S,S'
    G, S, S2 = d.shape
    nn_p = d.argmin(axis=2)  # nearest target for each pred point
    nn_t = d.argmin(axis=1)  # nearest pred for each target point
    gi = np.arange(G)[:, None]
    val = 0.5 * (d.min(axis=2).mean(axis=1) + d.min(axis=1).mean(axis=1))

    def backward(g):
        g = g[:, None, None]
        grad = (p - target[gi, nn_p]) * (g / S)
        contrib = (p[gi, nn_t] - target) * (g / S2)
        np.add.at(grad, (np.repeat(gi, S2, axis=1), nn_t), contrib)
        return (grad.astype(p.dtype),)

    return T.custom_op(val.astype(p.dtype), (pred,), backward)
