"""Chamfer and structured Chamfer distances, composed losses, Laplacian regularizer.

Nearest-neighbour indices are computed on plain arrays and then held fixed;
the differentiable losses gather the selected pairs on the tape, so gradients
flow only through the chosen point pairs.
"""
from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a - b) ** 2).sum(axis=-1)


class NnIndex:
    """Exact nearest neighbour over a fixed point set.

    Equal distances resolve to the lowest point index, matching a brute-force
    ``argmin`` over the same squared-distance expression.
    """

    def __init__(self, points, workers: int = 1):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self.tree = cKDTree(self.points)
        self.workers = workers

    def query(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        k = min(2, n)
        result = np.empty(len(q), dtype=np.intp)
        todo = np.arange(len(q))
        while len(todo):
            _, cand = self.tree.query(q[todo], k=k, workers=self.workers)
            cand = cand.reshape(len(todo), k)
            d = _sqdist(q[todo, None, :], self.points[cand])
            best = d.min(axis=1, keepdims=True)
            pick = np.where(d == best, cand, n).min(axis=1)
            # points beyond the k candidates are at least as far as the k-th one
            # up to rounding; a near-tie there needs a wider search
            margin = d.max(axis=1) - best[:, 0] > 1e-9 * (1.0 + best[:, 0])
            sure = margin | (k >= n)
            result[todo[sure]] = pick[sure]
            todo = todo[~sure]
            k = min(2 * k, n)
        return result


class StructuredNnIndex:
    """One index per part label; queries search only the matching part.

    A label absent from the indexed set falls back to the whole set.
    """

    def __init__(self, points, labels, workers: int = 1):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(labels, dtype=np.intp)
        if self.labels.shape != (len(self.points),):
            raise ValueError("labels must have one entry per point")
        self.full = NnIndex(self.points, workers)
        self.parts = {}
        for lab in np.unique(self.labels):
            ids = np.flatnonzero(self.labels == lab)
            self.parts[int(lab)] = (ids, NnIndex(self.points[ids], workers))

    def query(self, q, q_labels) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        q_labels = np.asarray(q_labels, dtype=np.intp)
        out = np.empty(len(q), dtype=np.intp)
        for lab in np.unique(q_labels):
            sel = np.flatnonzero(q_labels == lab)
            if int(lab) in self.parts:
                ids, index = self.parts[int(lab)]
                out[sel] = ids[index.query(q[sel])]
            else:
                out[sel] = self.full.query(q[sel])
        return out


def _nonempty(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise ValueError("Chamfer distance needs non-empty clouds")


def chamfer_pairs(x, v, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """(nn of each x in v, nn of each v in x)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    _nonempty(x, v)
    return NnIndex(v, workers).query(x), NnIndex(x, workers).query(v)


def structured_pairs(x, x_labels, v, v_labels, workers: int = 1):
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    _nonempty(x, v)
    return (
        StructuredNnIndex(v, v_labels, workers).query(x, x_labels),
        StructuredNnIndex(x, x_labels, workers).query(v, v_labels),
    )


def _pair_value(x, v, nn_x, nn_v) -> float:
    return float(_sqdist(x, v[nn_x]).mean() + _sqdist(v, x[nn_v]).mean())


def chamfer(x, v, workers: int = 1) -> float:
    """Mean squared NN distance x->v plus mean squared NN distance v->x."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    nn_x, nn_v = chamfer_pairs(x, v, workers)
    return _pair_value(x, v, nn_x, nn_v)


def check_alphabets(x_labels, v_labels, part_count: int | None = None):
    for name, lab in (("x", x_labels), ("v", v_labels)):
        lab = np.asarray(lab)
        if lab.size and lab.min() < 0:
            raise ValueError(f"{name} labels must be >= 0")
        if part_count is not None and lab.size and lab.max() >= part_count:
            raise ValueError(f"{name} label {lab.max()} outside alphabet of {part_count} parts")


def structured_chamfer(x, x_labels, v, v_labels, part_count: int | None = None, workers: int = 1):
    """Chamfer distance with NN search restricted to same-label points."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    check_alphabets(x_labels, v_labels, part_count)
    nn_x, nn_v = structured_pairs(x, x_labels, v, v_labels, workers)
    return _pair_value(x, v, nn_x, nn_v)


def composed_loss(x, v_d, v, lam: float = 0.5, structured: bool = False,
                  x_labels=None, v_labels=None, workers: int = 1) -> float:
    """L(x, v_d) + lam * L(x, v) with L plain or structured Chamfer."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if structured:
        first = structured_chamfer(x, x_labels, v_d, v_labels, workers=workers)
        return first + lam * structured_chamfer(x, x_labels, v, v_labels, workers=workers)
    return chamfer(x, v_d, workers) + lam * chamfer(x, v, workers)


# -- differentiable forms ----------------------------------------------------


def batched_pair_loss(xs: list[np.ndarray], v: Tensor, pairs: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
    """Batch mean of per-cloud Chamfer-style losses with frozen NN pairs.

    xs: B constant clouds; v: (B, m, 3) tensor; pairs[b] = (nn of xs[b] in
    v[b], nn of v[b] in xs[b]).
    """
    batch, m = v.shape[0], v.shape[1]
    flat = v.reshape(batch * m, 3)
    xcat = np.concatenate(xs)
    gidx = np.concatenate([b * m + p[0] for b, p in enumerate(pairs)])
    wx = np.concatenate([np.full(len(x), 1.0 / (len(x) * batch)) for x in xs])
    x_nn = np.concatenate([x[p[1]] for x, p in zip(xs, pairs)])
    d1 = ad.tsum(ad.square(ad.sub(xcat, ad.gather(flat, gidx))), axis=-1)
    d2 = ad.tsum(ad.square(ad.sub(flat, x_nn)), axis=-1)
    term1 = ad.tsum(ad.mul(d1, wx))
    term2 = ad.mul(ad.tsum(d2), 1.0 / (batch * m))
    return ad.add(term1, term2)


def chamfer_t(xs, v: Tensor, workers: int = 1) -> Tensor:
    """Differentiable batch-mean Chamfer; v is (B, m, 3)."""
    pairs = [chamfer_pairs(x, v.value[b], workers) for b, x in enumerate(xs)]
    return batched_pair_loss(list(xs), v, pairs)


def structured_chamfer_t(xs, x_labels, v: Tensor, v_labels, workers: int = 1) -> Tensor:
    """Differentiable batch-mean structured Chamfer; v_labels shared (m,) or per cloud."""
    v_labels = np.asarray(v_labels)
    pairs = []
    for b, x in enumerate(xs):
        vl = v_labels if v_labels.ndim == 1 else v_labels[b]
        pairs.append(structured_pairs(x, x_labels[b], v.value[b], vl, workers))
    return batched_pair_loss(list(xs), v, pairs)


# -- Laplacian -----------------------------------------------------------------


def mesh_edges(faces) -> np.ndarray:
    f = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def build_laplacian(vertex_count: int, faces) -> sp.csr_matrix:
    """Uniform graph Laplacian I - D^-1 A over the mesh edge graph."""
    faces = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    if len(faces) == 0:
        raise ValueError("Laplacian needs at least one face")
    e = mesh_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(vertex_count, vertex_count))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    isolated = deg == 0
    if isolated.any():
        warnings.warn(f"{int(isolated.sum())} isolated vertices get zero Laplacian rows")
    inv = np.where(isolated, 0.0, 1.0 / np.where(isolated, 1.0, deg))
    eye = sp.diags((~isolated).astype(np.float64))
    return (eye - sp.diags(inv) @ adj).tocsr()


def laplacian_reg(v_d, lap) -> float:
    """Mean squared row norm of L @ V."""
    v_d = np.asarray(v_d, dtype=np.float64)
    if v_d.shape[0] != lap.shape[0]:
        raise ValueError(f"{v_d.shape[0]} vertices for a {lap.shape[0]}-row Laplacian")
    return float((np.asarray(lap @ v_d) ** 2).sum(axis=1).mean())


def laplacian_reg_t(v: Tensor, lap) -> Tensor:
    """Batch mean of laplacian_reg for v (B, m, 3)."""
    batch, m = v.shape[0], v.shape[1]
    if m != lap.shape[0]:
        raise ValueError(f"{m} vertices for a {lap.shape[0]}-row Laplacian")
    cols = ad.transpose(v, (1, 0, 2)).reshape(m, batch * 3)
    lv = ad.sparse_matmul(lap, cols)
    return ad.mul(ad.tsum(ad.square(lv)), 1.0 / (batch * m))
