"""Pure-Python geometry kernels (fallback for the compiled ``_geom`` core).

Signatures and arithmetic order mirror ``_geom.pyx`` so both backends
produce the same answers; the compiled one is just faster.

BVH nodes are stored in pre-order: ``left[i] < 0`` marks a leaf covering
``order[start[i]:start[i] + count[i]]``, and children always have larger
indices than their parent.
"""

from __future__ import annotations

import math

import numpy as np


def _seg(px, py, pz, ax, ay, az, bx, by, bz):
    ex, ey, ez = bx - ax, by - ay, bz - az
    ee = ex * ex + ey * ey + ez * ez
    if ee <= 0.0:
        return ax, ay, az
    t = ((px - ax) * ex + (py - ay) * ey + (pz - az) * ez) / ee
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    return ax + t * ex, ay + t * ey, az + t * ez


def closest_point_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle ``abc`` to ``p`` (Voronoi-region walk)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = va + vb + vc
    if denom <= 0.0:
        # collapsed triangle (only reachable on deformed geometry): use edges
        best = None
        for q in (
            _seg(px, py, pz, ax, ay, az, bx, by, bz),
            _seg(px, py, pz, bx, by, bz, cx, cy, cz),
            _seg(px, py, pz, ax, ay, az, cx, cy, cz),
        ):
            d = (px - q[0]) ** 2 + (py - q[1]) ** 2 + (pz - q[2]) ** 2
            if best is None or d < best[0]:
                best = (d, q)
        return best[1]
    denom = 1.0 / denom
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


def _tri_d2(V, T, t, px, py, pz):
    i, j, k = T[t]
    a, b, c = V[i], V[j], V[k]
    qx, qy, qz = closest_point_triangle(px, py, pz, *a, *b, *c)
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz, qx, qy, qz


def _box_d2(lo, hi, px, py, pz):
    d = 0.0
    for p, l, h in ((px, lo[0], hi[0]), (py, lo[1], hi[1]), (pz, lo[2], hi[2])):
        if p < l:
            d += (l - p) * (l - p)
        elif p > h:
            d += (p - h) * (p - h)
    return d


def query_brute(vertices, triangles, queries):
    """Exhaustive closest-point scan; ties resolve to the lowest triangle index."""
    V = np.asarray(vertices, dtype=float).tolist()
    T = np.asarray(triangles, dtype=np.int64).tolist()
    Q = np.asarray(queries, dtype=float).reshape(-1, 3)
    dist = np.empty(len(Q))
    cp = np.empty((len(Q), 3))
    idx = np.empty(len(Q), dtype=np.int64)
    for n, (px, py, pz) in enumerate(Q.tolist()):
        best, bt, bq = math.inf, -1, (0.0, 0.0, 0.0)
        for t in range(len(T)):
            d2, qx, qy, qz = _tri_d2(V, T, t, px, py, pz)
            if d2 < best:
                best, bt, bq = d2, t, (qx, qy, qz)
        dist[n] = math.sqrt(best)
        cp[n] = bq
        idx[n] = bt
    return dist, cp, idx


def query_bvh(vertices, triangles, lo, hi, left, right, start, count, order, queries):
    V = np.asarray(vertices, dtype=float).tolist()
    T = np.asarray(triangles, dtype=np.int64).tolist()
    LO = np.asarray(lo).tolist()
    HI = np.asarray(hi).tolist()
    L = np.asarray(left).tolist()
    R = np.asarray(right).tolist()
    S = np.asarray(start).tolist()
    C = np.asarray(count).tolist()
    O = np.asarray(order).tolist()
    Q = np.asarray(queries, dtype=float).reshape(-1, 3)
    dist = np.empty(len(Q))
    cp = np.empty((len(Q), 3))
    idx = np.empty(len(Q), dtype=np.int64)
    for n, (px, py, pz) in enumerate(Q.tolist()):
        best, bt, bq = math.inf, -1, (0.0, 0.0, 0.0)
        stack = [(0, _box_d2(LO[0], HI[0], px, py, pz))]
        while stack:
            node, nd = stack.pop()
            if nd > best:
                continue
            if L[node] < 0:
                for k in range(S[node], S[node] + C[node]):
                    t = O[k]
                    d2, qx, qy, qz = _tri_d2(V, T, t, px, py, pz)
                    if d2 < best or (d2 == best and t < bt):
                        best, bt, bq = d2, t, (qx, qy, qz)
                continue
            a, b = L[node], R[node]
            da = _box_d2(LO[a], HI[a], px, py, pz)
            db = _box_d2(LO[b], HI[b], px, py, pz)
            if da <= db:
                stack.append((b, db))
                stack.append((a, da))
            else:
                stack.append((a, da))
                stack.append((b, db))
        dist[n] = math.sqrt(best)
        cp[n] = bq
        idx[n] = bt
    return dist, cp, idx


def refit_bvh(vertices, triangles, left, right, start, count, order):
    """Recompute node bounds for moved vertices (topology unchanged)."""
    V = np.asarray(vertices, dtype=float)
    T = np.asarray(triangles, dtype=np.int64)
    left = np.asarray(left)
    right = np.asarray(right)
    start = np.asarray(start)
    count = np.asarray(count)
    order = np.asarray(order)
    tri_lo = V[T].min(axis=1)
    tri_hi = V[T].max(axis=1)
    n = len(left)
    lo = np.empty((n, 3))
    hi = np.empty((n, 3))
    for i in range(n - 1, -1, -1):
        if left[i] < 0:
            members = order[start[i] : start[i] + count[i]]
            lo[i] = tri_lo[members].min(axis=0)
            hi[i] = tri_hi[members].max(axis=0)
        else:
            lo[i] = np.minimum(lo[left[i]], lo[right[i]])
            hi[i] = np.maximum(hi[left[i]], hi[right[i]])
    return lo, hi
