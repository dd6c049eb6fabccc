"""Compiled inner loops of the refinement engines.

Every kernel works at block granularity on a 2-D block label array ``blab``
and two row tables sharing the column layout of :mod:`rapidseg.grid`: ``A``
(block aggregates, one row per block) and ``S`` (superpixel statistics).

Concurrent workers never write ``S``.  They accumulate their changes in a
private delta table ``D`` and read ``S + D``; the driver folds the deltas back
between rounds.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .grid import BSQ, COL, CSQ, INIT, N, PSQ, PX, PY

# parameter vector slots
P_ICN2 = 0  # 1 / color_norm^2
P_IPN2 = 1  # 1 / pos_norm^2
P_LPOS = 2
P_LB = 3
P_MODE = 4  # 0 none, 1 hard-quarter, 2 merge
P_LO = 5
P_UP = 6
P_WORKERS = 7
P_EPS = 8
N_PARAMS = 9

MODE_NONE = 0
MODE_HARD = 1
MODE_MERGE = 2

# counters
C_POPPED = 0
C_ACCEPTED = 1
C_MERGES = 2
C_GATE_REJECT = 3
C_MERGE_REJECT = 4
C_UNSAFE = 5
C_DEFERRED = 6
C_CEILING = 7
N_COUNTERS = 8

# handler outcomes
NOOP = 0
MOVED = 1
MERGED = 2
DEFER = 3

_RING_DX = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)
_RING_DY = np.array([-1, -1, 0, 1, 1, 1, 0, -1], dtype=np.int64)
_N4_DX = np.array([-1, 1, 0, 0], dtype=np.int64)
_N4_DY = np.array([0, 0, -1, 1], dtype=np.int64)


@njit(cache=True, nogil=True)
def stat(S, D, use_d, i, c):
    v = S[i, c]
    if use_d:
        v += D[i, c]
    return v


@njit(cache=True, nogil=True)
def ring_safe(blab, bx, by, a):
    """Local simple-block test: the 8-ring holds exactly one run of ``a``
    and at least one 4-neighbor is ``a``."""
    hb, wb = blab.shape
    inside = np.zeros(8, dtype=np.bool_)
    total = 0
    for i in range(8):
        nx = bx + _RING_DX[i]
        ny = by + _RING_DY[i]
        if 0 <= nx < wb and 0 <= ny < hb and blab[ny, nx] == a:
            inside[i] = True
            total += 1
    if total == 0:
        return False
    if not (inside[0] or inside[2] or inside[4] or inside[6]):
        return False
    if total == 8:
        return True
    runs = 0
    for i in range(8):
        if inside[i] and not inside[i - 1]:
            runs += 1
    return runs == 1


@njit(cache=True, nogil=True)
def is_boundary(blab, bx, by, gated, flags):
    hb, wb = blab.shape
    a = blab[by, bx]
    if gated and not flags[a]:
        return False
    for i in range(4):
        nx = bx + _N4_DX[i]
        ny = by + _N4_DY[i]
        if 0 <= nx < wb and 0 <= ny < hb and blab[ny, nx] != a:
            return True
    return False


@njit(cache=True, nogil=True)
def boundary_delta(blab, bx, by, a, t, b, width, height):
    """Change of the ordered-pair boundary count if block (bx, by) goes from a to t."""
    if a == t:
        return 0.0
    hb, wb = blab.shape
    bw = min(b, width - bx * b)
    bh = min(b, height - by * b)
    d = 0
    for i in range(4):
        nx = bx + _N4_DX[i]
        ny = by + _N4_DY[i]
        if 0 <= nx < wb and 0 <= ny < hb:
            lab = blab[ny, nx]
            edge = bh if i < 2 else bw
            d += edge * ((1 if t != lab else 0) - (1 if a != lab else 0))
    return 2.0 * d


@njit(cache=True, nogil=True)
def block_costs(A, k, S, D, use_d, t, nch):
    """Color and position energy of block k against superpixel t, minus the
    label-independent terms sum|I|^2 and sum|p|^2."""
    n = stat(S, D, use_d, t, N)
    nb = A[k, N]
    col = 0.0
    for ch in range(nch):
        c = stat(S, D, use_d, t, COL + ch) / n
        col += nb * c * c - 2.0 * c * A[k, COL + ch]
    mx = stat(S, D, use_d, t, PX) / n
    my = stat(S, D, use_d, t, PY) / n
    pos = nb * (mx * mx + my * my) - 2.0 * (mx * A[k, PX] + my * A[k, PY])
    return col, pos


@njit(cache=True, nogil=True)
def move_components(blab, A, S, D, use_d, k, bx, by, a, t, b, width, height, nch):
    if a == t:
        return 0.0, 0.0, 0.0
    ct, pt = block_costs(A, k, S, D, use_d, t, nch)
    ca, pa = block_costs(A, k, S, D, use_d, a, nch)
    return ct - ca, pt - pa, boundary_delta(blab, bx, by, a, t, b, width, height)


@njit(cache=True, nogil=True)
def move_row(A, k, S, D, use_d, a, t):
    """Move the aggregates of block k from superpixel a to t."""
    T = D if use_d else S
    for c in range(A.shape[1]):
        if c == INIT:
            continue
        v = A[k, c]
        T[a, c] -= v
        T[t, c] += v


@njit(cache=True, nogil=True)
def ward_delta(S, a, v, prm, boundary_len, nch):
    na = S[a, N]
    nv = S[v, N]
    dc = 0.0
    for ch in range(nch):
        d = S[a, COL + ch] / na - S[v, COL + ch] / nv
        dc += d * d
    dx = S[a, PX] / na - S[v, PX] / nv
    dy = S[a, PY] / na - S[v, PY] / nv
    w = na * nv / (na + nv)
    return (
        w * (dc * prm[P_ICN2] + prm[P_LPOS] * (dx * dx + dy * dy) * prm[P_IPN2])
        - prm[P_LB] * 2.0 * boundary_len
    )


@njit(cache=True, nogil=True)
def flood_victim(blab, k0, v, b, width, height, stamp, stamp_id, stack, members, nb_lab, nb_len):
    """Collect the blocks of superpixel v reachable from block k0 and the pixel
    edge length it shares with each neighboring superpixel.

    Returns (member count, neighbor count)."""
    hb, wb = blab.shape
    nm = 0
    nn = 0
    top = 0
    stack[top] = k0
    top += 1
    stamp[k0] = stamp_id
    while top > 0:
        top -= 1
        k = stack[top]
        members[nm] = k
        nm += 1
        bx = k % wb
        by = k // wb
        bw = min(b, width - bx * b)
        bh = min(b, height - by * b)
        for i in range(4):
            nx = bx + _N4_DX[i]
            ny = by + _N4_DY[i]
            if nx < 0 or nx >= wb or ny < 0 or ny >= hb:
                continue
            kk = ny * wb + nx
            lab = blab[ny, nx]
            if lab == v:
                if stamp[kk] != stamp_id:
                    stamp[kk] = stamp_id
                    stack[top] = kk
                    top += 1
            else:
                edge = bh if i < 2 else bw
                j = 0
                while j < nn and nb_lab[j] != lab:
                    j += 1
                if j == nn:
                    if nn == nb_lab.shape[0]:
                        raise RuntimeError("victim neighbor table overflow")
                    nb_lab[nn] = lab
                    nb_len[nn] = 0.0
                    nn += 1
                nb_len[j] += edge
    return nm, nn


@njit(cache=True, nogil=True)
def pick_merge_target(S, v, prm, nb_lab, nb_len, nn, nch):
    """Merge target: least energy increase among neighbors that stay under the
    upper size bound.  Ties go to the lower id.  Returns -1 if none qualifies."""
    best = -1
    best_d = 0.0
    for j in range(nn):
        t = nb_lab[j]
        if S[t, N] + S[v, N] > prm[P_UP] * S[t, INIT]:
            continue
        d = ward_delta(S, t, v, prm, nb_len[j], nch)
        if best < 0 or d < best_d or (d == best_d and t < best):
            best = t
            best_d = d
    return best


@njit(cache=True, nogil=True)
def merge_into(blab, S, alive, v, t, members, nm):
    wb = blab.shape[1]
    for i in range(nm):
        k = members[i]
        blab[k // wb, k % wb] = t
    for c in range(S.shape[1]):
        if c == INIT:
            continue
        S[t, c] += S[v, c]
        S[v, c] = 0.0
    alive[v] = False


@njit(cache=True, nogil=True)
def handle_block(
    k, blab, b, width, height, A, S, D, use_d, alive, prm, concurrent,
    stamp, stamp_ctr, stack, members, nb_lab, nb_len, counters, out,
):
    """Process one popped block.  ``out[0]`` receives the new label on MOVED."""
    wb = blab.shape[1]
    bx = k % wb
    by = k // wb
    a = blab[by, bx]
    nch = A.shape[1] - COL
    if not ring_safe(blab, bx, by, a):
        counters[C_UNSAFE] += 1
        return NOOP

    # argmin over the incumbent and the labels of the 4 neighbors.
    hb = blab.shape[0]
    cands = np.empty(4, dtype=np.int64)
    nc = 0
    for i in range(4):
        nx = bx + _N4_DX[i]
        ny = by + _N4_DY[i]
        if 0 <= nx < wb and 0 <= ny < hb:
            lab = blab[ny, nx]
            if lab == a:
                continue
            dup = False
            for j in range(nc):
                if cands[j] == lab:
                    dup = True
            if not dup:
                cands[nc] = lab
                nc += 1
    if nc == 0:
        return NOOP
    # ascending ids so the first strict minimum is the lowest-id tie winner
    for i in range(1, nc):
        j = i
        while j > 0 and cands[j - 1] > cands[j]:
            tmp = cands[j]
            cands[j] = cands[j - 1]
            cands[j - 1] = tmp
            j -= 1
    best_t = -1
    best = -prm[P_EPS]
    for j in range(nc):
        t = cands[j]
        dcol, dpos, db = move_components(blab, A, S, D, use_d, k, bx, by, a, t, b, width, height, nch)
        tot = dcol * prm[P_ICN2] + prm[P_LPOS] * dpos * prm[P_IPN2] + prm[P_LB] * db
        if tot < best:
            best = tot
            best_t = t
    if best_t < 0:
        return NOOP

    mode = int(prm[P_MODE])
    nb = A[k, N]
    if mode != MODE_NONE:
        init = S[a, INIT]
        floor = init * 0.25 if mode == MODE_HARD else init * prm[P_LO]
        if concurrent:
            left = (S[a, N] - floor) / prm[P_WORKERS] + D[a, N] - nb
        else:
            left = stat(S, D, use_d, a, N) - nb - floor
        hit = left < 0.0 if mode == MODE_HARD else left <= 0.0
        if hit:
            if concurrent:
                return DEFER
            if mode == MODE_HARD:
                counters[C_GATE_REJECT] += 1
                return NOOP
            stamp_ctr[0] += 1
            nm, nn = flood_victim(
                blab, k, a, b, width, height, stamp, stamp_ctr[0], stack, members, nb_lab, nb_len
            )
            t = pick_merge_target(S, a, prm, nb_lab, nb_len, nn, nch)
            if t < 0:
                counters[C_MERGE_REJECT] += 1
                return NOOP
            merge_into(blab, S, alive, a, t, members, nm)
            counters[C_MERGES] += 1
            return MERGED

    blab[by, bx] = best_t
    move_row(A, k, S, D, use_d, a, best_t)
    counters[C_ACCEPTED] += 1
    out[0] = best_t
    return MOVED


@njit(cache=True, nogil=True)
def push(qbuf, qoff, qcap, qhead, qcnt, w, k):
    qbuf[qoff[w] + (qhead[w] + qcnt[w]) % qcap[w]] = k
    qcnt[w] += 1


@njit(cache=True, nogil=True)
def pop(qbuf, qoff, qcap, qhead, qcnt, w):
    k = qbuf[qoff[w] + qhead[w]]
    qhead[w] = (qhead[w] + 1) % qcap[w]
    qcnt[w] -= 1
    return k


@njit(cache=True, nogil=True)
def seed_rows(blab, gated, flags, r0, r1, w, qbuf, qoff, qcap, qhead, qcnt, inq):
    """Row-major scan of block rows [r0, r1) enqueuing boundary blocks into queue w."""
    wb = blab.shape[1]
    added = 0
    for by in range(r0, r1):
        for bx in range(wb):
            k = by * wb + bx
            if inq[k] == 0 and is_boundary(blab, bx, by, gated, flags):
                inq[k] = 1
                push(qbuf, qoff, qcap, qhead, qcnt, w, k)
                added += 1
    return added


@njit(cache=True, nogil=True)
def enqueue_neighbors(blab, bx, by, gated, flags, row_owner, qbuf, qoff, qcap, qhead, qcnt, inq):
    hb, wb = blab.shape
    for i in range(4):
        nx = bx + _N4_DX[i]
        ny = by + _N4_DY[i]
        if 0 <= nx < wb and 0 <= ny < hb:
            kk = ny * wb + nx
            if inq[kk] == 0 and is_boundary(blab, nx, ny, gated, flags):
                inq[kk] = 1
                push(qbuf, qoff, qcap, qhead, qcnt, row_owner[ny], kk)


@njit(cache=True, nogil=True)
def drain_serial(
    blab, b, width, height, A, S, alive, flags, gated, prm,
    qbuf, qoff, qcap, qhead, qcnt, inq, row_owner,
    stamp, stamp_ctr, stack, members, nb_lab, nb_len, counters, max_changes, ceiling,
):
    """FIFO loop over queue 0 until it empties, ``max_changes`` moves/merges
    happened (negative: unlimited), or the accepted-move ceiling is reached.

    Returns the number of moves plus merges performed."""
    D = np.zeros((1, 1))
    out = np.zeros(1, dtype=np.int64)
    wb = blab.shape[1]
    changes = 0
    while qcnt[0] > 0:
        if max_changes >= 0 and changes >= max_changes:
            break
        if counters[C_ACCEPTED] >= ceiling:
            counters[C_CEILING] += 1
            break
        k = pop(qbuf, qoff, qcap, qhead, qcnt, 0)
        inq[k] = 0
        counters[C_POPPED] += 1
        while True:
            r = handle_block(
                k, blab, b, width, height, A, S, D, False, alive, prm, False,
                stamp, stamp_ctr, stack, members, nb_lab, nb_len, counters, out,
            )
            if r != MERGED:
                break
            changes += 1
        if r == MOVED:
            changes += 1
            enqueue_neighbors(
                blab, k % wb, k // wb, gated, flags, row_owner, qbuf, qoff, qcap, qhead, qcnt, inq
            )
    return changes


@njit(cache=True, nogil=True)
def drain_worker(
    w, r0, r1, strip_top, strip_bottom,
    blab, b, width, height, A, S, D, alive, flags, gated, prm,
    qbuf, qoff, qcap, qhead, qcnt, inq, row_owner,
    deferred, ndeferred, counters, ceiling,
):
    """Concurrent drain of worker w's queue over block rows [r0, r1).

    Blocks in a partition-edge strip row, or whose move would hit a size
    bound, are parked in ``deferred`` for the serial phase.  All statistic
    writes go to the private table D."""
    dummy_i = np.zeros(1, dtype=np.int32)
    dummy_k = np.zeros(1, dtype=np.int64)
    dummy_f = np.zeros(1)
    out = np.zeros(1, dtype=np.int64)
    wb = blab.shape[1]
    changes = 0
    while qcnt[w] > 0:
        if counters[C_ACCEPTED] >= ceiling:
            counters[C_CEILING] += 1
            break
        k = pop(qbuf, qoff, qcap, qhead, qcnt, w)
        by = k // wb
        if (strip_top and by == r0) or (strip_bottom and by == r1 - 1):
            deferred[ndeferred[0]] = k
            ndeferred[0] += 1
            counters[C_DEFERRED] += 1
            continue
        inq[k] = 0
        counters[C_POPPED] += 1
        r = handle_block(
            k, blab, b, width, height, A, S, D, True, alive, prm, True,
            dummy_i, dummy_k, dummy_k, dummy_k, dummy_k, dummy_f, counters, out,
        )
        if r == DEFER:
            counters[C_POPPED] -= 1
            inq[k] = 1
            deferred[ndeferred[0]] = k
            ndeferred[0] += 1
            counters[C_DEFERRED] += 1
        elif r == MOVED:
            changes += 1
            enqueue_neighbors(
                blab, k % wb, by, gated, flags, row_owner, qbuf, qoff, qcap, qhead, qcnt, inq
            )
    return changes


@njit(cache=True, nogil=True)
def drain_deferred(
    items, nitems,
    blab, b, width, height, A, S, alive, flags, gated, prm,
    qbuf, qoff, qcap, qhead, qcnt, inq, row_owner,
    stamp, stamp_ctr, stack, members, nb_lab, nb_len, counters,
):
    """Serial phase: handle parked blocks with exact statistics; re-enqueued
    neighbors are forwarded to the queue of the worker owning their row."""
    D = np.zeros((1, 1))
    out = np.zeros(1, dtype=np.int64)
    wb = blab.shape[1]
    changes = 0
    for i in range(nitems):
        k = items[i]
        inq[k] = 0
        counters[C_POPPED] += 1
        while True:
            r = handle_block(
                k, blab, b, width, height, A, S, D, False, alive, prm, False,
                stamp, stamp_ctr, stack, members, nb_lab, nb_len, counters, out,
            )
            if r != MERGED:
                break
            changes += 1
        if r == MOVED:
            changes += 1
            enqueue_neighbors(
                blab, k % wb, k // wb, gated, flags, row_owner, qbuf, qoff, qcap, qhead, qcnt, inq
            )
    return changes


@njit(cache=True, nogil=True)
def accumulate_stats(labels, A, S, r0, r1):
    """Add block rows [r0, r1) of ``A`` into ``S`` by block label."""
    wb = labels.shape[1]
    for by in range(r0, r1):
        for bx in range(wb):
            k = by * wb + bx
            lab = labels[by, bx]
            for c in range(A.shape[1]):
                if c != INIT:
                    S[lab, c] += A[k, c]
