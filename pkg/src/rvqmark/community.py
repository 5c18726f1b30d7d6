"""Community detection on confusion digraphs.

Quality is directed modularity with resolution ``rho``::

    Q = sum_c [ e_c / m  -  rho * Kout_c * Kin_c / m**2 ]

with ``e_c`` the arc weight inside community ``c``, ``Kout_c`` / ``Kin_c`` its
weighted out / in degree and ``m`` the total arc weight. ``louvain`` is the
classic local-moving + aggregation scheme; ``leiden`` adds the queue-based
fast local move and a refinement phase that only grows sub-communities along
arcs, so its communities stay weakly connected.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from ._accel import jit
from .core import ClusterMap
from .errors import ConfigurationError, DataFormatError
from .graph import ConfusionMatrix, WeightedDigraph, _read_int_rows, _write_text, to_graph

CLUSTER_HEADER = ["channel", "token", "cluster"]
MAX_ROUNDS = 100


def canonical_labels(labels) -> np.ndarray:
    """Relabel to 0..K-1 in order of each community's smallest member."""
    labels = np.asarray(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inv.ravel()]


@dataclass(frozen=True, eq=False)
class Partition:
    community_of: np.ndarray

    def __post_init__(self):
        c = np.array(self.community_of, dtype=np.int64, copy=True)
        if c.ndim != 1:
            raise ValueError("partition must be a vector of community ids")
        if c.size and (c.min() < 0 or np.bincount(c).min() == 0):
            raise ValueError("community ids must be contiguous from 0 with no empty community")
        c.setflags(write=False)
        object.__setattr__(self, "community_of", c)

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        return cls(canonical_labels(labels))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(np.arange(n))

    @property
    def community_count(self) -> int:
        return int(self.community_of.max()) + 1 if self.community_of.size else 0

    def communities(self) -> list:
        order = np.argsort(self.community_of, kind="stable")
        bounds = np.cumsum(np.bincount(self.community_of))[:-1]
        return [set(part.tolist()) for part in np.split(order, bounds)]

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return np.array_equal(self.community_of, other.community_of)

    __hash__ = None


def modularity(g: WeightedDigraph, p: Partition, rho: float = 1.0) -> float:
    comm = np.asarray(p.community_of)
    if comm.shape[0] != g.node_count:
        raise ValueError(f"partition covers {comm.shape[0]} nodes, graph has {g.node_count}")
    m = g.total_weight
    if m == 0:
        if p.community_count == g.node_count:
            return 0.0
        raise ValueError("modularity of a non-singleton partition of an arc-free graph is undefined")
    k = p.community_count
    cs, cd = comm[g.src], comm[g.dst]
    inside = np.bincount(cs[cs == cd], weights=g.weight[cs == cd], minlength=k)
    k_out = np.bincount(cs, weights=g.weight, minlength=k)
    k_in = np.bincount(cd, weights=g.weight, minlength=k)
    return float(inside.sum() / m - rho * np.dot(k_out, k_in) / (m * m))


# ---------------------------------------------------------------------------
# internal CSR network (self-loops allowed, they appear after aggregation)

@dataclass
class _Net:
    n: int
    out_ptr: np.ndarray
    out_idx: np.ndarray
    out_w: np.ndarray
    in_ptr: np.ndarray
    in_idx: np.ndarray
    in_w: np.ndarray
    loop: np.ndarray
    kout: np.ndarray
    kin: np.ndarray
    m: float

    @classmethod
    def from_coo(cls, n, src, dst, w):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        w = np.asarray(w, dtype=np.float64)
        kout = np.bincount(src, weights=w, minlength=n)
        kin = np.bincount(dst, weights=w, minlength=n)
        self_arc = src == dst
        loop = np.bincount(src[self_arc], weights=w[self_arc], minlength=n)
        off = ~self_arc
        a = sparse.coo_matrix((w[off], (src[off], dst[off])), shape=(n, n)).tocsr()
        a.sum_duplicates()
        a.sort_indices()
        at = a.tocsc()
        at.sort_indices()
        return cls(
            n, a.indptr.astype(np.int64), a.indices.astype(np.int64), a.data.astype(np.float64),
            at.indptr.astype(np.int64), at.indices.astype(np.int64), at.data.astype(np.float64),
            loop, kout, kin, float(w.sum()),
        )

    @classmethod
    def from_digraph(cls, g: WeightedDigraph):
        return cls.from_coo(g.node_count, g.src, g.dst, g.weight)

    def aggregate(self, labels, k):
        rows = np.repeat(np.arange(self.n), np.diff(self.out_ptr))
        nodes = np.arange(self.n)
        src = np.concatenate([labels[rows], labels[nodes]])
        dst = np.concatenate([labels[self.out_idx], labels[nodes]])
        w = np.concatenate([self.out_w, self.loop])
        keep = w > 0
        return _Net.from_coo(k, src[keep], dst[keep], w[keep])

    def arrays(self):
        return (self.n, self.out_ptr, self.out_idx, self.out_w, self.in_ptr, self.in_idx, self.in_w,
                self.kout, self.kin, self.m)


# ---------------------------------------------------------------------------
# move kernels

@jit
def _gather(v, out_ptr, out_idx, out_w, in_ptr, in_idx, in_w, label, wsum, flag, touched,
            restrict, parent):
    """Sum arc weight (both directions) between v and each neighbouring label."""
    nt = 0
    for e in range(out_ptr[v], out_ptr[v + 1]):
        u = out_idx[e]
        if restrict and parent[u] != parent[v]:
            continue
        c = label[u]
        if not flag[c]:
            flag[c] = True
            touched[nt] = c
            nt += 1
        wsum[c] += out_w[e]
    for e in range(in_ptr[v], in_ptr[v + 1]):
        u = in_idx[e]
        if restrict and parent[u] != parent[v]:
            continue
        c = label[u]
        if not flag[c]:
            flag[c] = True
            touched[nt] = c
            nt += 1
        wsum[c] += in_w[e]
    return nt


@jit
def _clear(nt, wsum, flag, touched):
    for t in range(nt):
        c = touched[t]
        wsum[c] = 0.0
        flag[c] = False


@jit
def _best_move(v, a, nt, touched, wsum, kout, kin, k_out, k_in, size, m, rho, tol):
    """Best target for v (already removed from a); returns -1 for a fresh empty community."""
    best = a
    best_gain = wsum[a] - rho * (kout[v] * k_in[a] + kin[v] * k_out[a]) / m
    for t in range(nt):
        c = touched[t]
        if c == a:
            continue
        gain = wsum[c] - rho * (kout[v] * k_in[c] + kin[v] * k_out[c]) / m
        if gain > best_gain + tol:
            best = c
            best_gain = gain
    if size[a] > 0 and 0.0 > best_gain + tol:
        best = -1
    return best


@jit
def _move_kernel(n, out_ptr, out_idx, out_w, in_ptr, in_idx, in_w, kout, kin, m, rho,
                 comm, order, tol, use_queue):
    """Greedy node moves until none improves Q; returns the number of moves.

    use_queue=True is the Leiden fast local move (revisit neighbours of moved
    nodes), otherwise Louvain sweeps over ``order`` until a sweep moves nothing.
    """
    k_out = np.zeros(n)
    k_in = np.zeros(n)
    size = np.zeros(n, dtype=np.int64)
    for v in range(n):
        k_out[comm[v]] += kout[v]
        k_in[comm[v]] += kin[v]
        size[comm[v]] += 1
    empty = np.empty(n, dtype=np.int64)
    n_empty = 0
    for c in range(n - 1, -1, -1):
        if size[c] == 0:
            empty[n_empty] = c
            n_empty += 1
    wsum = np.zeros(n)
    flag = np.zeros(n, dtype=np.bool_)
    touched = np.empty(n, dtype=np.int64)
    dummy = np.empty(0, dtype=np.int64)

    queue = order.copy()
    in_q = np.ones(n, dtype=np.bool_)
    head = 0
    pending = n
    moves = 0
    sweep_moves = 0
    pos = 0
    while True:
        if use_queue:
            if pending == 0:
                break
            v = queue[head]
            head = (head + 1) % n
            pending -= 1
            in_q[v] = False
        else:
            if pos == n:
                if sweep_moves == 0:
                    break
                sweep_moves = 0
                pos = 0
            v = order[pos]
            pos += 1
        a = comm[v]
        k_out[a] -= kout[v]
        k_in[a] -= kin[v]
        size[a] -= 1
        nt = _gather(v, out_ptr, out_idx, out_w, in_ptr, in_idx, in_w, comm, wsum, flag, touched,
                     False, dummy)
        best = _best_move(v, a, nt, touched, wsum, kout, kin, k_out, k_in, size, m, rho, tol)
        _clear(nt, wsum, flag, touched)
        if best == -1:
            n_empty -= 1
            best = empty[n_empty]
        comm[v] = best
        k_out[best] += kout[v]
        k_in[best] += kin[v]
        size[best] += 1
        if best != a:
            moves += 1
            sweep_moves += 1
            if size[a] == 0:
                empty[n_empty] = a
                n_empty += 1
            if use_queue:
                for e in range(out_ptr[v], out_ptr[v + 1]):
                    u = out_idx[e]
                    if not in_q[u] and comm[u] != best:
                        in_q[u] = True
                        queue[(head + pending) % n] = u
                        pending += 1
                for e in range(in_ptr[v], in_ptr[v + 1]):
                    u = in_idx[e]
                    if not in_q[u] and comm[u] != best:
                        in_q[u] = True
                        queue[(head + pending) % n] = u
                        pending += 1
    return moves


@jit
def _refine_kernel(n, out_ptr, out_idx, out_w, in_ptr, in_idx, in_w, kout, kin, m, rho,
                   comm, order, tol):
    """Split each community into well-connected sub-communities grown along arcs.

    Every node starts alone; a node still alone and well connected to its
    community joins the well-connected neighbouring sub-community (inside the
    same community) with the largest positive gain.
    """
    ref = np.arange(n)
    rsize = np.ones(n, dtype=np.int64)
    r_out = kout.copy()
    r_in = kin.copy()
    s_out = np.zeros(n)
    s_in = np.zeros(n)
    for v in range(n):
        s_out[comm[v]] += kout[v]
        s_in[comm[v]] += kin[v]
    ext = np.zeros(n)
    for v in range(n):
        for e in range(out_ptr[v], out_ptr[v + 1]):
            if comm[out_idx[e]] == comm[v]:
                ext[v] += out_w[e]
        for e in range(in_ptr[v], in_ptr[v + 1]):
            if comm[in_idx[e]] == comm[v]:
                ext[v] += in_w[e]
    wsum = np.zeros(n)
    flag = np.zeros(n, dtype=np.bool_)
    touched = np.empty(n, dtype=np.int64)
    for v in order:
        if rsize[ref[v]] != 1:
            continue
        s = comm[v]
        need = rho * (kout[v] * (s_in[s] - kin[v]) + kin[v] * (s_out[s] - kout[v])) / m
        if ext[ref[v]] < need - tol:
            continue
        nt = _gather(v, out_ptr, out_idx, out_w, in_ptr, in_idx, in_w, ref, wsum, flag, touched,
                     True, comm)
        best = -1
        best_gain = 0.0
        best_w = 0.0
        for t in range(nt):
            c = touched[t]
            if c == ref[v]:
                continue
            need_c = rho * (r_out[c] * (s_in[s] - r_in[c]) + r_in[c] * (s_out[s] - r_out[c])) / m
            if ext[c] < need_c - tol:
                continue
            gain = wsum[c] - rho * (kout[v] * r_in[c] + kin[v] * r_out[c]) / m
            if gain > best_gain + tol:
                best = c
                best_gain = gain
                best_w = wsum[c]
        _clear(nt, wsum, flag, touched)
        if best >= 0:
            old = ref[v]
            ext[best] = ext[best] + ext[old] - 2.0 * best_w
            r_out[best] += kout[v]
            r_in[best] += kin[v]
            rsize[best] += 1
            rsize[old] = 0
            ref[v] = best
    return ref


# ---------------------------------------------------------------------------
# drivers

def _check_graph(g: WeightedDigraph, rho):
    if not rho > 0 or not np.isfinite(rho):
        raise ConfigurationError(f"resolution must be finite and positive, got {rho}")
    if g.total_weight <= 0:
        raise ValueError("community detection needs a graph with positive total weight")


def _tol(m):
    return 1e-13 * max(m, 1.0)


def louvain(g: WeightedDigraph, rho: float = 1.0, seed: int = 0,
            history: Optional[list] = None) -> Partition:
    """Louvain: seeded-order local moving, then aggregation, until nothing moves."""
    _check_graph(g, rho)
    rng = np.random.default_rng(seed)
    net = _Net.from_digraph(g)
    mapping = np.arange(g.node_count)
    comm = np.arange(net.n)
    for _ in range(MAX_ROUNDS):
        comm = np.arange(net.n)
        moves = _move_kernel(*net.arrays(), rho, comm, rng.permutation(net.n), _tol(net.m), False)
        comm = canonical_labels(comm)
        if history is not None:
            history.append(modularity(g, Partition.from_labels(comm[mapping]), rho))
        k = int(comm.max()) + 1
        if moves == 0 or k == net.n:
            break
        net = net.aggregate(comm, k)
        mapping = comm[mapping]
        comm = np.arange(k)
    return Partition.from_labels(comm[mapping])


def _leiden_iteration(g, base, membership, rho, rng, history):
    net = base
    mapping = np.arange(base.n)
    comm = canonical_labels(membership)
    while True:
        comm = comm.astype(np.int64).copy()
        _move_kernel(*net.arrays(), rho, comm, rng.permutation(net.n), _tol(net.m), True)
        comm = canonical_labels(comm)
        if history is not None:
            history.append(modularity(g, Partition.from_labels(comm[mapping]), rho))
        k = int(comm.max()) + 1
        if k == net.n:
            break
        ref = _refine_kernel(*net.arrays(), rho, comm, rng.permutation(net.n), _tol(net.m))
        ref = canonical_labels(ref)
        kr = int(ref.max()) + 1
        if kr == net.n:
            # refinement merged nothing: aggregate the moved partition directly
            ref, kr = comm, k
        agg = np.empty(kr, dtype=np.int64)
        agg[ref] = comm
        net = net.aggregate(ref, kr)
        mapping = ref[mapping]
        comm = agg
    return canonical_labels(comm[mapping])


def split_disconnected(g: WeightedDigraph, p: Partition) -> Partition:
    """Split every community into the weakly connected components of its induced subgraph."""
    comm = p.community_of
    inside = comm[g.src] == comm[g.dst]
    adj = sparse.coo_matrix(
        (np.ones(int(inside.sum())), (g.src[inside], g.dst[inside])),
        shape=(g.node_count, g.node_count),
    ).tocsr()
    _, labels = connected_components(adj, directed=True, connection="weak")
    return Partition.from_labels(labels)


def leiden(g: WeightedDigraph, rho: float = 1.0, seed: int = 0,
           history: Optional[list] = None) -> Partition:
    """Leiden with greedy refinement; repeats whole iterations until the partition is stable."""
    _check_graph(g, rho)
    rng = np.random.default_rng(seed)
    base = _Net.from_digraph(g)
    membership = np.arange(g.node_count)
    for _ in range(MAX_ROUNDS):
        new = _leiden_iteration(g, base, membership, rho, rng, history)
        if np.array_equal(new, membership):
            break
        membership = new
    return split_disconnected(g, Partition(membership))


def is_weakly_connected_partition(g: WeightedDigraph, p: Partition) -> bool:
    return split_disconnected(g, p).community_count == p.community_count


def to_cluster_map(p: Partition, vocab_size: int, channel: int = 0) -> ClusterMap:
    """ClusterMap with clusters numbered by their smallest member token."""
    if p.community_of.shape[0] != vocab_size:
        raise ValueError(f"partition covers {p.community_of.shape[0]} tokens, vocabulary has {vocab_size}")
    return ClusterMap(channel, canonical_labels(p.community_of))


ALGORITHMS = ("leiden", "louvain", "identity")


def cluster_confusion(m: ConfusionMatrix, rho: float = 1.0, noise_threshold: int = 1,
                      algorithm: str = "leiden", seed: int = 0) -> ClusterMap:
    """Confusion counts -> thresholded digraph -> communities -> ClusterMap."""
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    if algorithm == "identity":
        return ClusterMap.identity(m.channel, m.vocab_size)
    g = to_graph(m, noise_threshold)
    if g.total_weight == 0:
        return ClusterMap.identity(m.channel, m.vocab_size)
    fn = leiden if algorithm == "leiden" else louvain
    return to_cluster_map(fn(g, rho, seed), m.vocab_size, m.channel)


def write_cluster_maps_csv(path_or_file, maps: Sequence[ClusterMap]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CLUSTER_HEADER)
    for cm in sorted(maps, key=lambda c: c.channel):
        w.writerows((cm.channel, t, int(k)) for t, k in enumerate(cm.cluster_of))
    _write_text(path_or_file, buf.getvalue())


def read_cluster_maps_csv(path) -> list:
    rows = _read_int_rows(path, CLUSTER_HEADER)
    maps, current, expect = [], None, (0, 0)
    for line, (ch, tok, cl) in rows:
        if (ch, tok) != expect and (current is None or (ch, tok) != (expect[0] + 1, 0)):
            raise DataFormatError(
                f"expected row for channel {expect[0]} token {expect[1]} "
                f"(or channel {expect[0] + 1} token 0), found channel {ch} token {tok}", path, line,
            )
        if tok == 0:
            current = []
            maps.append(current)
        current.append(cl)
        expect = (ch, tok + 1)
    out = []
    for ch, ids in enumerate(maps):
        try:
            out.append(ClusterMap(ch, ids))
        except ConfigurationError as exc:
            raise DataFormatError(f"channel {ch}: {exc}", path) from None
    return out
