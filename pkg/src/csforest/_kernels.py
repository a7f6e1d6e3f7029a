"""Compiled tree growing and leaf aggregation.

Trees are grown one per ``prange`` iteration into padded per-tree buffers
and compacted by the caller. All randomness a tree needs is derived from
its own 64-bit seed, so results do not depend on the thread count.
"""

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old on some systems and warns on every launch
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

MODE_REGRESSION = 0
MODE_CAUSAL = 1
MODE_LOGRANK = 2

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def splitmix64(state):
    """SplitMix64 step; ``state`` is a length-1 uint64 array updated in place."""
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _draw_features(p, mtry, state, out):
    perm = np.arange(p)
    for j in range(mtry):
        r = j + np.int64(splitmix64(state) % np.uint64(p - j))
        tmp = perm[j]
        perm[j] = perm[r]
        perm[r] = tmp
    chosen = np.sort(perm[:mtry])
    for j in range(mtry):
        out[j] = chosen[j]


@njit(cache=True)
def _midpoint(v, vn):
    t = v + (vn - v) / 2.0
    if t >= vn:
        t = v
    return t


@njit(cache=True)
def _partition_rows(mat, start, stop, goes_left, buf):
    """Stable partition of every row of ``mat[:, start:stop]`` by ``goes_left[id]``."""
    mid = start
    for f in range(mat.shape[0]):
        nl = 0
        nr = 0
        for q in range(start, stop):
            i = mat[f, q]
            if goes_left[i]:
                mat[f, start + nl] = i
                nl += 1
            else:
                buf[nr] = i
                nr += 1
        for q in range(nr):
            mat[f, start + nl + q] = buf[q]
        mid = start + nl
    return mid


@njit(cache=True)
def grow_tree(X, gorder, y, w, aux, tidx, ev, K, mode, split_ids, est_ids, mtry, mns, seed,
              feat, thr, left, right, lo, hi):
    """Grow one honest tree and return its node count.

    ``split_ids`` choose the splits; ``est_ids`` are routed alongside and end
    up grouped by leaf, with leaf ``k`` owning ``est_ids[lo[k]:hi[k]]``.
    Internal nodes have ``left >= 0``; leaves have ``left == right == -1``.
    ``gorder[f]`` is the stable ascending order of column ``f`` of ``X``;
    each tree keeps per-feature sorted id lists and partitions them at
    every split, so no node ever re-sorts.
    """
    n, p = X.shape
    max_nodes = feat.shape[0]
    n_split = split_ids.shape[0]
    n_est = est_ids.shape[0]
    state = np.empty(1, dtype=np.uint64)
    state[0] = seed

    role = np.zeros(n, dtype=np.uint8)
    for q in range(n_split):
        role[split_ids[q]] = 1
    for q in range(n_est):
        role[est_ids[q]] = 2
    ssort = np.empty((p, n_split), dtype=np.int64)
    esort = np.empty((p, n_est), dtype=np.int64)
    for f in range(p):
        a = 0
        b = 0
        for q in range(n):
            i = gorder[f, q]
            if role[i] == 1:
                ssort[f, a] = i
                a += 1
            elif role[i] == 2:
                esort[f, b] = i
                b += 1

    lab = np.zeros(n)
    goes_left = np.zeros(n, dtype=np.uint8)
    features = np.empty(mtry, dtype=np.int64)
    buf = np.empty(max(n_split, n_est), dtype=np.int64)
    cnt = np.zeros(K + 1)
    dth = np.zeros(K + 1)
    rr = np.zeros(K + 1)
    ecum = np.zeros(K + 1)
    ck = np.zeros(K + 1)
    rl = np.zeros(K + 1)

    stack = np.empty((max_nodes, 5), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_split
    stack[0, 3] = 0
    stack[0, 4] = n_est
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        s0 = stack[top, 1]
        s1 = stack[top, 2]
        e0 = stack[top, 3]
        e1 = stack[top, 4]
        ns = s1 - s0
        ne = e1 - e0
        left[node] = -1
        right[node] = -1
        feat[node] = -1
        thr[node] = 0.0
        lo[node] = e0
        hi[node] = e1
        if ns < 2 * mns or ne < 2 * mns or n_nodes + 2 > max_nodes:
            continue

        sw = 0.0
        swy = 0.0
        swyy = 0.0
        n_ev = 0.0
        if mode == MODE_LOGRANK:
            for k in range(K + 1):
                cnt[k] = 0.0
                dth[k] = 0.0
            for q in range(s0, s1):
                i = ssort[0, q]
                b = tidx[i]
                cnt[b] += 1.0
                if b < K and ev[i] > 0:
                    dth[b] += 1.0
                    n_ev += 1.0
            if n_ev < 2.0:
                continue
            acc = 0.0
            for k in range(K, -1, -1):
                acc += cnt[k]
                rr[k] = acc
            # ecum[b]: sum of d_k / r_k over grid points k <= b
            # ck[k]: hypergeometric variance factor at point k
            run = 0.0
            for k in range(K):
                ek = dth[k] / rr[k] if rr[k] > 0.0 else 0.0
                run += ek
                ecum[k] = run
                if rr[k] > 1.0:
                    ck[k] = dth[k] * (rr[k] - dth[k]) / (rr[k] * rr[k] * (rr[k] - 1.0))
                else:
                    ck[k] = 0.0
            ecum[K] = run
            ck[K] = 0.0
        else:
            if mode == MODE_CAUSAL:
                s_w = 0.0
                s_ww = 0.0
                s_wu = 0.0
                for q in range(s0, s1):
                    i = ssort[0, q]
                    s_w += w[i]
                    s_ww += w[i] * aux[i] * aux[i]
                    s_wu += w[i] * aux[i] * y[i]
                if s_w <= 0.0 or s_ww <= 1e-12 * s_w:
                    continue
                tau_bar = s_wu / s_ww
                scale = s_ww / s_w
                for q in range(s0, s1):
                    i = ssort[0, q]
                    lab[i] = aux[i] * (y[i] - aux[i] * tau_bar) / scale
            else:
                for q in range(s0, s1):
                    i = ssort[0, q]
                    lab[i] = y[i]
            for q in range(s0, s1):
                i = ssort[0, q]
                sw += w[i]
                swy += w[i] * lab[i]
                swyy += w[i] * lab[i] * lab[i]
            if sw <= 0.0:
                continue

        if mtry < p:
            _draw_features(p, mtry, state, features)
        else:
            for j in range(p):
                features[j] = j

        best = -np.inf
        best_f = -1
        best_t = 0.0
        for jf in range(mtry):
            f = features[jf]
            if X[ssort[f, s0], f] == X[ssort[f, s1 - 1], f]:
                continue
            ep = e0
            if mode == MODE_LOGRANK:
                for k in range(K + 1):
                    rl[k] = 0.0
                evl = 0.0
                num_r = 0.0
                var = 0.0
                for q in range(s0, s1 - 1):
                    i = ssort[f, q]
                    b = tidx[i]
                    if b < K and ev[i] > 0:
                        evl += 1.0
                    num_r += ecum[b]
                    top_k = b if b < K else K - 1
                    for k in range(top_k + 1):
                        var += ck[k] * (rr[k] - 2.0 * rl[k] - 1.0)
                        rl[k] += 1.0
                    v = X[i, f]
                    vn = X[ssort[f, q + 1], f]
                    if v == vn:
                        continue
                    nl = q + 1 - s0
                    if nl < mns:
                        continue
                    if ns - nl < mns:
                        break
                    t = _midpoint(v, vn)
                    while ep < e1 and X[esort[f, ep], f] <= t:
                        ep += 1
                    if e1 - ep < mns:
                        break
                    if ep - e0 < mns:
                        continue
                    if evl < 1.0 or n_ev - evl < 1.0 or var <= 0.0:
                        continue
                    num = evl - num_r
                    crit = num * num / var
                    if crit > best:
                        best = crit
                        best_f = f
                        best_t = t
            else:
                cw = 0.0
                cwy = 0.0
                for q in range(s0, s1 - 1):
                    i = ssort[f, q]
                    cw += w[i]
                    cwy += w[i] * lab[i]
                    v = X[i, f]
                    vn = X[ssort[f, q + 1], f]
                    if v == vn:
                        continue
                    nl = q + 1 - s0
                    if nl < mns:
                        continue
                    if ns - nl < mns:
                        break
                    t = _midpoint(v, vn)
                    while ep < e1 and X[esort[f, ep], f] <= t:
                        ep += 1
                    if e1 - ep < mns:
                        break
                    if ep - e0 < mns:
                        continue
                    wr = sw - cw
                    if cw <= 0.0 or wr <= 0.0:
                        continue
                    crit = cwy * cwy / cw + (swy - cwy) * (swy - cwy) / wr
                    if crit > best:
                        best = crit
                        best_f = f
                        best_t = t

        if best_f < 0:
            continue
        if mode == MODE_LOGRANK:
            if not best > 1e-8:
                continue
        else:
            if not best - swy * swy / sw > 1e-10 * swyy:
                continue

        for q in range(s0, s1):
            i = ssort[0, q]
            goes_left[i] = X[i, best_f] <= best_t
        for q in range(e0, e1):
            i = esort[0, q]
            goes_left[i] = X[i, best_f] <= best_t
        smid = _partition_rows(ssort, s0, s1, goes_left, buf)
        emid = _partition_rows(esort, e0, e1, goes_left, buf)
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_t
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is expanded first
        stack[top, 0] = rnode
        stack[top, 1] = smid
        stack[top, 2] = s1
        stack[top, 3] = emid
        stack[top, 4] = e1
        top += 1
        stack[top, 0] = lnode
        stack[top, 1] = s0
        stack[top, 2] = smid
        stack[top, 3] = e0
        stack[top, 4] = emid
        top += 1

    for q in range(n_split):
        split_ids[q] = ssort[0, q]
    for q in range(n_est):
        est_ids[q] = esort[0, q]
    return n_nodes


@njit(parallel=True, cache=True)
def grow_many(X, gorder, y, w, aux, tidx, ev, K, mode, split_mat, est_mat, mtry, mns, seeds,
              feat, thr, left, right, lo, hi, counts):
    for t in prange(split_mat.shape[0]):
        counts[t] = grow_tree(X, gorder, y, w, aux, tidx, ev, K, mode, split_mat[t], est_mat[t],
                              mtry, mns, seeds[t], feat[t], thr[t], left[t], right[t],
                              lo[t], hi[t])


@njit(cache=True)
def find_leaf(feat, thr, left, right, base, xrow):
    """Global id of the leaf reached from root ``base``; child ids are global."""
    node = base
    while left[node] >= 0:
        if xrow[feat[node]] <= thr[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(parallel=True, cache=True)
def inbag_matrix(sub_mat, n):
    T = sub_mat.shape[0]
    out = np.zeros((T, n), dtype=np.uint8)
    for t in prange(T):
        for q in range(sub_mat.shape[1]):
            out[t, sub_mat[t, q]] = 1
    return out


@njit(parallel=True, cache=True)
def leaf_sums(offsets, left, lo, hi, est_mat, values):
    """Per-node sums of ``values`` rows over each leaf's estimation units."""
    T = offsets.shape[0] - 1
    m = values.shape[1]
    out = np.zeros((offsets[T], m))
    for t in prange(T):
        for node in range(offsets[t], offsets[t + 1]):
            if left[node] >= 0:
                continue
            for q in range(lo[node], hi[node]):
                i = est_mat[t, q]
                for c in range(m):
                    out[node, c] += values[i, c]
    return out


@njit(parallel=True, cache=True)
def accumulate(offsets, feat, thr, left, right, stats, Xq, oob_ids, inbag):
    """Sum ``stats[leaf]`` over trees for each query row.

    When ``oob_ids[r] >= 0`` only trees that did not sample that training
    unit contribute. Returns the sums and the number of contributing trees.
    """
    T = offsets.shape[0] - 1
    nq = Xq.shape[0]
    m = stats.shape[1]
    out = np.zeros((nq, m))
    used = np.zeros(nq, dtype=np.int64)
    for r in prange(nq):
        oid = oob_ids[r]
        for t in range(T):
            if oid >= 0 and inbag[t, oid]:
                continue
            leaf = find_leaf(feat, thr, left, right, offsets[t], Xq[r])
            for c in range(m):
                out[r, c] += stats[leaf, c]
            used[r] += 1
    return out, used


@njit(cache=True)
def kernel_row(offsets, feat, thr, left, right, lo, hi, est_mat, w, xrow, oid, inbag, n):
    T = offsets.shape[0] - 1
    alpha = np.zeros(n)
    used = 0
    for t in range(T):
        if oid >= 0 and inbag[t, oid]:
            continue
        leaf = find_leaf(feat, thr, left, right, offsets[t], xrow)
        total = 0.0
        for q in range(lo[leaf], hi[leaf]):
            total += w[est_mat[t, q]]
        if total <= 0.0:
            continue
        used += 1
        for q in range(lo[leaf], hi[leaf]):
            i = est_mat[t, q]
            alpha[i] += w[i] / total
    if used > 0:
        alpha /= used
    return alpha, used


@njit(parallel=True, cache=True)
def survival_curves(offsets, feat, thr, left, right, lo, hi, est_mat, w, tidx, ev, K,
                    Xq, oob_ids, inbag):
    """Kernel-weighted product-limit values at each of the K slots for each query row."""
    T = offsets.shape[0] - 1
    nq = Xq.shape[0]
    out = np.ones((nq, K))
    used = np.zeros(nq, dtype=np.int64)
    for r in prange(nq):
        cnt = np.zeros(K + 1)
        dth = np.zeros(K + 1)
        oid = oob_ids[r]
        for t in range(T):
            if oid >= 0 and inbag[t, oid]:
                continue
            leaf = find_leaf(feat, thr, left, right, offsets[t], Xq[r])
            total = 0.0
            for q in range(lo[leaf], hi[leaf]):
                total += w[est_mat[t, q]]
            if total <= 0.0:
                continue
            used[r] += 1
            for q in range(lo[leaf], hi[leaf]):
                i = est_mat[t, q]
                a = w[i] / total
                cnt[tidx[i]] += a
                if tidx[i] < K and ev[i] > 0:
                    dth[tidx[i]] += a
        out[r] = product_limit(cnt, dth, K)
    return out, used


@njit(cache=True)
def product_limit(cnt, dth, K):
    """Survival values at grid points 0..K-1 from per-bin totals and events.

    ``cnt[k]`` is the weight of units whose time falls in bin ``k`` (bin ``K``
    collects times beyond the grid); the at-risk weight at point ``k`` is the
    weight of all units in bins ``>= k``. A 0/0 factor counts as 1.
    """
    vals = np.empty(K)
    r = 0.0
    for k in range(K + 1):
        r += cnt[k]
    s = 1.0
    for k in range(K):
        if r > 0.0 and dth[k] > 0.0:
            s *= 1.0 - dth[k] / r
            if s < 0.0:
                s = 0.0
        vals[k] = s
        r -= cnt[k]
    return vals


@njit(parallel=True, cache=True)
def survival_at(offsets, feat, thr, left, right, lo, hi, est_mat, w, times, ev, Xq, tq,
                oob_ids, inbag):
    """Exact kernel-weighted product-limit value just before ``tq[r]`` for each query.

    Uses the raw training times rather than the grid: the factor at a
    distinct event time ``s < tq[r]`` is ``1 - events(s) / at_risk(s)``,
    with everyone whose time is ``>= s`` at risk.
    """
    T = offsets.shape[0] - 1
    nq = Xq.shape[0]
    n = times.shape[0]
    out = np.ones(nq)
    used = np.zeros(nq, dtype=np.int64)
    for r in prange(nq):
        alpha = np.zeros(n)
        touched = np.empty(n, dtype=np.int64)
        m = 0
        oid = oob_ids[r]
        for t in range(T):
            if oid >= 0 and inbag[t, oid]:
                continue
            leaf = find_leaf(feat, thr, left, right, offsets[t], Xq[r])
            total = 0.0
            for q in range(lo[leaf], hi[leaf]):
                total += w[est_mat[t, q]]
            if total <= 0.0:
                continue
            used[r] += 1
            for q in range(lo[leaf], hi[leaf]):
                i = est_mat[t, q]
                if alpha[i] == 0.0:
                    touched[m] = i
                    m += 1
                alpha[i] += w[i] / total
        if m == 0:
            continue
        ids = touched[:m]
        tv = np.empty(m)
        for q in range(m):
            tv[q] = times[ids[q]]
        order = np.argsort(tv, kind="mergesort")
        at_risk = 0.0
        for q in range(m):
            at_risk += alpha[ids[q]]
        s = 1.0
        q = 0
        limit = tq[r]
        while q < m:
            t0 = tv[order[q]]
            if t0 >= limit:
                break
            d = 0.0
            gone = 0.0
            q2 = q
            while q2 < m and tv[order[q2]] == t0:
                a = alpha[ids[order[q2]]]
                gone += a
                if ev[ids[order[q2]]] > 0:
                    d += a
                q2 += 1
            if d > 0.0 and at_risk > 0.0:
                s *= 1.0 - d / at_risk
                if s < 0.0:
                    s = 0.0
            at_risk -= gone
            q = q2
        out[r] = s
    return out, used
