"""Hot loops: keyed cluster scoring, green-set selection, watermarked sampling
and green counting.

Every kernel exists twice: a ``*_nb`` variant written for numba and a ``*_np``
variant using numpy vector ops (or a plain python step loop where the
computation is inherently sequential). The unsuffixed names dispatch to the
numba variant unless ``RVQMARK_DISABLE_NUMBA`` is set. Both variants agree
bit-for-bit; ``tests/test_kernels.py`` pins that.

Keyed hash
----------
All hashing uses the SplitMix64 finalizer ``mix64`` and

    fold(s, v) = mix64(s XOR mix64(v + 0x9E3779B97F4A7C15))      (mod 2**64)

The 256-bit key is read as four little-endian uint64 words ``k0..k3``::

    key_state      = fold(fold(fold(fold(0, k0), k1), k2), k3)
    channel_state  = fold(key_state, channel)
    context_state  = fold(... fold(fold(channel_state, h), x_1 + 1) ..., x_h + 1)
    score(cluster) = fold(context_state, cluster)

where ``x_1..x_h`` are the context cluster ids, oldest first, and the warm-up
sentinel ``-1`` encodes as 0. The green set is the ``G`` clusters with the
lowest scores, ties going to the smaller cluster id.
"""
import numpy as np

from ._accel import HAS_NUMBA, jit

MASK64 = (1 << 64) - 1
_M1_INT = 0xBF58476D1CE4E5B9
_M2_INT = 0x94D049BB133111EB
_GOLDEN_INT = 0x9E3779B97F4A7C15

M1 = np.uint64(_M1_INT)
M2 = np.uint64(_M2_INT)
GOLDEN = np.uint64(_GOLDEN_INT)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S56 = np.uint64(56)
_S31 = np.uint64(31)

SENTINEL = -1


# ---------------------------------------------------------------------------
# python-int hashing (scalar, used for per-channel states in both paths)

def mix64_int(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1_INT) & MASK64
    z = ((z ^ (z >> 27)) * _M2_INT) & MASK64
    return z ^ (z >> 31)


def fold_int(state, value):
    return mix64_int(state ^ mix64_int((value + _GOLDEN_INT) & MASK64))


def key_words(key):
    if len(key) != 32:
        raise ValueError("watermark key must be exactly 32 bytes")
    return [int.from_bytes(key[i:i + 8], "little") for i in range(0, 32, 8)]


def channel_state(key, channel):
    state = 0
    for word in key_words(key):
        state = fold_int(state, word)
    return fold_int(state, channel)


def context_state(chan_state, context):
    state = fold_int(chan_state, len(context))
    for cid in context:
        state = fold_int(state, int(cid) + 1)
    return state


# ---------------------------------------------------------------------------
# numpy variants

def mix64_np(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * M1
        z = (z ^ (z >> _S27)) * M2
    return z ^ (z >> _S31)


def cluster_table(n_clusters):
    """mix64(j + GOLDEN) for every cluster id j; score(j) = mix64(state ^ table[j])."""
    with np.errstate(over="ignore"):
        return mix64_np(np.arange(n_clusters, dtype=np.uint64) + GOLDEN)


def fold_np(states, values):
    """Vectorised ``fold`` over uint64 states and int64 values (sentinel-shifted by caller)."""
    with np.errstate(over="ignore"):
        v = np.asarray(values).astype(np.uint64) + GOLDEN
    return mix64_np(np.asarray(states, dtype=np.uint64) ^ mix64_np(v))


def lowest_mask_np(scores, n_green):
    thr = np.partition(scores, n_green - 1)[n_green - 1]
    mask = scores < thr
    rem = n_green - int(mask.sum())
    if rem:
        mask[np.flatnonzero(scores == thr)[:rem]] = True
    return mask


def green_mask_np(state, table, n_green):
    scores = mix64_np(np.uint64(state) ^ table)
    return lowest_mask_np(scores, n_green)


def _repeated_contexts_np(contexts):
    n = contexts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    if contexts.shape[1] == 0:
        rep = np.ones(n, dtype=bool)
        rep[0] = False
        return rep
    _, first, inverse = np.unique(contexts, axis=0, return_index=True, return_inverse=True)
    return first[inverse.ravel()] != np.arange(n)


def _contexts_np(ctx_tokens, h):
    """(N, h) matrix of preceding cluster ids, sentinel-padded for the warm-up steps."""
    n = ctx_tokens.shape[0]
    padded = np.concatenate([np.full(h, SENTINEL, dtype=np.int64), ctx_tokens.astype(np.int64)])
    if h == 0:
        return np.zeros((n, 0), dtype=np.int64)
    idx = np.arange(n)[:, None] + np.arange(h)[None, :]
    return padded[idx]


def step_states_np(base_state, contexts):
    """context_state for every row of ``contexts`` given ``fold(channel_state, h)``."""
    n = contexts.shape[0]
    states = np.full(n, base_state, dtype=np.uint64)
    for k in range(contexts.shape[1]):
        states = fold_np(states, contexts[:, k] + 1)
    return states


def count_green_np(tokens, cluster_of, n_clusters, n_green, marked, base_states, table,
                   ctx_channel, h, defer):
    n, n_ch = tokens.shape
    green = np.zeros((n, n_ch), dtype=bool)
    excluded = np.zeros((n, n_ch), dtype=bool)
    ctx_ids = cluster_of[ctx_channel][tokens[:, ctx_channel]]
    contexts = _contexts_np(ctx_ids, h)
    repeated = _repeated_contexts_np(contexts) if defer else np.zeros(n, dtype=bool)
    for c in range(n_ch):
        if not marked[c]:
            continue
        k = n_clusters[c]
        states = step_states_np(base_states[c], contexts)
        scores = mix64_np(states[:, None] ^ table[None, :k])
        own = cluster_of[c][tokens[:, c]]
        own_score = scores[np.arange(n), own]
        below = (scores < own_score[:, None]).sum(axis=1)
        tied = ((scores == own_score[:, None]) & (np.arange(k)[None, :] < own[:, None])).sum(axis=1)
        green[:, c] = (below + tied) < n_green[c]
        excluded[:, c] = repeated
    return green, excluded


def generate_np(noisy, vocab, cluster_of, n_clusters, n_green, marked, base_states, table,
                ctx_channel, h, delta, defer):
    n_ch, n = noisy.shape[0], noisy.shape[1]
    tokens = np.zeros((n, n_ch), dtype=np.int64)
    green = np.zeros((n, n_ch), dtype=bool)
    deferred = np.zeros((n, n_ch), dtype=bool)
    seen = set()
    for i in range(n):
        ctx = tuple(
            int(cluster_of[ctx_channel, tokens[j, ctx_channel]]) if j >= 0 else SENTINEL
            for j in range(i - h, i)
        )
        repeated = defer and ctx in seen
        seen.add(ctx)
        for c in range(n_ch):
            v = vocab[c]
            row = noisy[c, i, :v]
            if not marked[c]:
                tokens[i, c] = int(np.argmax(row))
                continue
            state = int(base_states[c])
            for cid in ctx:
                state = fold_int(state, cid + 1)
            mask = green_mask_np(state, table[:n_clusters[c]], n_green[c])
            token_green = mask[cluster_of[c, :v]]
            if not repeated:
                row = row + np.where(token_green, delta, 0.0)
            tok = int(np.argmax(row))
            tokens[i, c] = tok
            green[i, c] = token_green[tok]
            deferred[i, c] = repeated
    return tokens, green, deferred


# ---------------------------------------------------------------------------
# numba variants

@jit
def _mix64(z):
    z = (z ^ (z >> _S30)) * M1
    z = (z ^ (z >> _S27)) * M2
    return z ^ (z >> _S31)


@jit
def _fold(state, value):
    return _mix64(state ^ _mix64(np.uint64(value) + GOLDEN))


@jit
def _lowest_mask(scores, n_green, mask, cand):
    """Mark the ``n_green`` lowest scores, ties to the smaller index.

    Scores are hashes, so a 256-bucket histogram on the top byte isolates the
    threshold in one pass; only the few entries of the boundary bucket are
    ranked exactly. ``cand`` is int64 scratch of at least ``len(scores)``.
    """
    k = scores.shape[0]
    counts = np.zeros(256, dtype=np.int64)
    for j in range(k):
        counts[scores[j] >> _S56] += 1
    below = 0
    edge = 0
    for b in range(256):
        if below + counts[b] >= n_green:
            edge = b
            break
        below += counts[b]
    need = n_green - below
    n_cand = 0
    for j in range(k):
        b = scores[j] >> _S56
        mask[j] = b < edge
        if b == edge:
            cand[n_cand] = j
            n_cand += 1
    for u in range(n_cand):
        ju = cand[u]
        rank = 0
        for w in range(n_cand):
            jw = cand[w]
            if scores[jw] < scores[ju] or (scores[jw] == scores[ju] and jw < ju):
                rank += 1
        mask[ju] = rank < need


@jit
def green_mask_nb(state, table, n_green):
    k = table.shape[0]
    scores = np.empty(k, dtype=np.uint64)
    s = np.uint64(state)
    for j in range(k):
        scores[j] = _mix64(s ^ table[j])
    mask = np.empty(k, dtype=np.bool_)
    _lowest_mask(scores, n_green, mask, np.empty(k, dtype=np.int64))
    return mask


@jit
def _is_repeat(seen, n_seen, ctx):
    h = ctx.shape[0]
    for r in range(n_seen):
        same = True
        for k in range(h):
            if seen[r, k] != ctx[k]:
                same = False
                break
        if same:
            return True
    return False


@jit
def count_green_nb(tokens, cluster_of, n_clusters, n_green, marked, base_states, table,
                   ctx_channel, h, defer):
    n, n_ch = tokens.shape
    green = np.zeros((n, n_ch), dtype=np.bool_)
    excluded = np.zeros((n, n_ch), dtype=np.bool_)
    ctx = np.empty(h, dtype=np.int64)
    seen = np.empty((n, h), dtype=np.int64)
    n_seen = 0
    for i in range(n):
        for k in range(h):
            j = i - h + k
            ctx[k] = cluster_of[ctx_channel, tokens[j, ctx_channel]] if j >= 0 else -1
        repeated = False
        if defer:
            repeated = _is_repeat(seen, n_seen, ctx)
            if not repeated:
                seen[n_seen, :] = ctx
                n_seen += 1
        for c in range(n_ch):
            if not marked[c]:
                continue
            state = np.uint64(base_states[c])
            for k in range(h):
                state = _fold(state, ctx[k] + 1)
            own = cluster_of[c, tokens[i, c]]
            own_score = _mix64(state ^ table[own])
            rank = 0
            for q in range(n_clusters[c]):
                sq = _mix64(state ^ table[q])
                if sq < own_score or (sq == own_score and q < own):
                    rank += 1
                    if rank >= n_green[c]:
                        break
            green[i, c] = rank < n_green[c]
            excluded[i, c] = repeated
    return green, excluded


@jit
def generate_nb(noisy, vocab, cluster_of, n_clusters, n_green, marked, base_states, table,
                ctx_channel, h, delta, defer):
    n_ch, n = noisy.shape[0], noisy.shape[1]
    tokens = np.zeros((n, n_ch), dtype=np.int64)
    green = np.zeros((n, n_ch), dtype=np.bool_)
    deferred = np.zeros((n, n_ch), dtype=np.bool_)
    ctx = np.empty(h, dtype=np.int64)
    seen = np.empty((n, h), dtype=np.int64)
    n_seen = 0
    kmax = table.shape[0]
    scores = np.empty(kmax, dtype=np.uint64)
    mask = np.empty(kmax, dtype=np.bool_)
    cand = np.empty(kmax, dtype=np.int64)
    for i in range(n):
        for k in range(h):
            j = i - h + k
            ctx[k] = cluster_of[ctx_channel, tokens[j, ctx_channel]] if j >= 0 else -1
        repeated = False
        if defer:
            repeated = _is_repeat(seen, n_seen, ctx)
            if not repeated:
                seen[n_seen, :] = ctx
                n_seen += 1
        for c in range(n_ch):
            v = vocab[c]
            best = -np.inf
            tok = 0
            if not marked[c]:
                for j in range(v):
                    if noisy[c, i, j] > best:
                        best = noisy[c, i, j]
                        tok = j
                tokens[i, c] = tok
                continue
            state = np.uint64(base_states[c])
            for k in range(h):
                state = _fold(state, ctx[k] + 1)
            kc = n_clusters[c]
            for q in range(kc):
                scores[q] = _mix64(state ^ table[q])
            _lowest_mask(scores[:kc], n_green[c], mask[:kc], cand)
            for j in range(v):
                val = noisy[c, i, j]
                if not repeated and mask[cluster_of[c, j]]:
                    val = val + delta
                if val > best:
                    best = val
                    tok = j
            tokens[i, c] = tok
            green[i, c] = mask[cluster_of[c, tok]]
            deferred[i, c] = repeated
    return tokens, green, deferred


def green_mask(state, table, n_green):
    """Green mask over ``len(table)`` clusters for a 64-bit context state (python int or uint64)."""
    if HAS_NUMBA:
        return green_mask_nb(np.uint64(state), table, n_green)
    return green_mask_np(state, table, n_green)


if HAS_NUMBA:
    count_green_kernel = count_green_nb
    generate_kernel = generate_nb
else:
    count_green_kernel = count_green_np
    generate_kernel = generate_np
