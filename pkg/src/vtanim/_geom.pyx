# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels; see ``_geom_py`` for the reference semantics."""

from libc.math cimport sqrt, INFINITY

import numpy as np


cdef inline void _seg(double px, double py, double pz,
                      double ax, double ay, double az,
                      double bx, double by, double bz, double* out) noexcept nogil:
    cdef double ex = bx - ax, ey = by - ay, ez = bz - az
    cdef double ee = ex * ex + ey * ey + ez * ez
    cdef double t
    if ee <= 0.0:
        out[0] = ax; out[1] = ay; out[2] = az
        return
    t = ((px - ax) * ex + (py - ay) * ey + (pz - az) * ez) / ee
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    out[0] = ax + t * ex; out[1] = ay + t * ey; out[2] = az + t * ez


cdef inline void _closest(double px, double py, double pz,
                          double ax, double ay, double az,
                          double bx, double by, double bz,
                          double cx, double cy, double cz, double* out) noexcept nogil:
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double bpx, bpy, bpz, d3, d4, vc, v, w, cpx, cpy, cpz, d5, d6, vb, va, denom
    cdef double tmp[3]
    cdef double best, d
    cdef int e
    if d1 <= 0.0 and d2 <= 0.0:
        out[0] = ax; out[1] = ay; out[2] = az
        return
    bpx = px - bx; bpy = py - by; bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        out[0] = bx; out[1] = by; out[2] = bz
        return
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        out[0] = ax + v * abx; out[1] = ay + v * aby; out[2] = az + v * abz
        return
    cpx = px - cx; cpy = py - cy; cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        out[0] = cx; out[1] = cy; out[2] = cz
        return
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        out[0] = ax + w * acx; out[1] = ay + w * acy; out[2] = az + w * acz
        return
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = bx + w * (cx - bx); out[1] = by + w * (cy - by); out[2] = bz + w * (cz - bz)
        return
    denom = va + vb + vc
    if denom <= 0.0:
        best = INFINITY
        for e in range(3):
            if e == 0:
                _seg(px, py, pz, ax, ay, az, bx, by, bz, tmp)
            elif e == 1:
                _seg(px, py, pz, bx, by, bz, cx, cy, cz, tmp)
            else:
                _seg(px, py, pz, ax, ay, az, cx, cy, cz, tmp)
            d = (px - tmp[0]) * (px - tmp[0]) + (py - tmp[1]) * (py - tmp[1]) + (pz - tmp[2]) * (pz - tmp[2])
            if d < best:
                best = d
                out[0] = tmp[0]; out[1] = tmp[1]; out[2] = tmp[2]
        return
    denom = 1.0 / denom
    v = vb * denom
    w = vc * denom
    out[0] = ax + abx * v + acx * w
    out[1] = ay + aby * v + acy * w
    out[2] = az + abz * v + acz * w


cdef inline double _tri_d2(const double[:, ::1] V, const long long[:, ::1] T, Py_ssize_t t,
                           double px, double py, double pz, double* q) noexcept nogil:
    cdef Py_ssize_t i = T[t, 0], j = T[t, 1], k = T[t, 2]
    cdef double dx, dy, dz
    _closest(px, py, pz, V[i, 0], V[i, 1], V[i, 2], V[j, 0], V[j, 1], V[j, 2],
             V[k, 0], V[k, 1], V[k, 2], q)
    dx = px - q[0]; dy = py - q[1]; dz = pz - q[2]
    return dx * dx + dy * dy + dz * dz


cdef inline double _box_d2(const double[:, ::1] lo, const double[:, ::1] hi, Py_ssize_t n,
                           double px, double py, double pz) noexcept nogil:
    cdef double d = 0.0, l, h, p
    cdef int a
    for a in range(3):
        p = px if a == 0 else (py if a == 1 else pz)
        l = lo[n, a]
        h = hi[n, a]
        if p < l:
            d += (l - p) * (l - p)
        elif p > h:
            d += (p - h) * (p - h)
    return d


def closest_point_triangle(double px, double py, double pz,
                           double ax, double ay, double az,
                           double bx, double by, double bz,
                           double cx, double cy, double cz):
    cdef double q[3]
    _closest(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz, q)
    return q[0], q[1], q[2]


def query_brute(vertices, triangles, queries):
    cdef const double[:, ::1] V = np.ascontiguousarray(vertices, dtype=np.float64)
    cdef const long long[:, ::1] T = np.ascontiguousarray(triangles, dtype=np.int64)
    cdef const double[:, ::1] Q = np.ascontiguousarray(np.reshape(queries, (-1, 3)), dtype=np.float64)
    cdef Py_ssize_t nq = Q.shape[0], nt = T.shape[0], n, t
    dist_a = np.empty(nq)
    cp_a = np.empty((nq, 3))
    idx_a = np.empty(nq, dtype=np.int64)
    cdef double[::1] dist = dist_a
    cdef double[:, ::1] cp = cp_a
    cdef long long[::1] idx = idx_a
    cdef double best, d2
    cdef double q[3]
    cdef double bq[3]
    cdef long long bt
    with nogil:
        for n in range(nq):
            best = INFINITY
            bt = -1
            bq[0] = 0.0; bq[1] = 0.0; bq[2] = 0.0
            for t in range(nt):
                d2 = _tri_d2(V, T, t, Q[n, 0], Q[n, 1], Q[n, 2], q)
                if d2 < best:
                    best = d2
                    bt = t
                    bq[0] = q[0]; bq[1] = q[1]; bq[2] = q[2]
            dist[n] = sqrt(best)
            cp[n, 0] = bq[0]; cp[n, 1] = bq[1]; cp[n, 2] = bq[2]
            idx[n] = bt
    return dist_a, cp_a, idx_a


def query_bvh(vertices, triangles, lo, hi, left, right, start, count, order, queries):
    cdef const double[:, ::1] V = np.ascontiguousarray(vertices, dtype=np.float64)
    cdef const long long[:, ::1] T = np.ascontiguousarray(triangles, dtype=np.int64)
    cdef const double[:, ::1] LO = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] HI = np.ascontiguousarray(hi, dtype=np.float64)
    cdef const long long[::1] L = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long long[::1] R = np.ascontiguousarray(right, dtype=np.int64)
    cdef const long long[::1] S = np.ascontiguousarray(start, dtype=np.int64)
    cdef const long long[::1] C = np.ascontiguousarray(count, dtype=np.int64)
    cdef const long long[::1] O = np.ascontiguousarray(order, dtype=np.int64)
    cdef const double[:, ::1] Q = np.ascontiguousarray(np.reshape(queries, (-1, 3)), dtype=np.float64)
    cdef Py_ssize_t nq = Q.shape[0], n, k, node, a, b, sp
    # depth of a median-split tree is bounded by log2(triangles) + leaf slack
    stack_nodes_a = np.empty(2 * L.shape[0] + 2, dtype=np.int64)
    stack_d_a = np.empty(2 * L.shape[0] + 2)
    cdef long long[::1] stack_nodes = stack_nodes_a
    cdef double[::1] stack_d = stack_d_a
    dist_a = np.empty(nq)
    cp_a = np.empty((nq, 3))
    idx_a = np.empty(nq, dtype=np.int64)
    cdef double[::1] dist = dist_a
    cdef double[:, ::1] cp = cp_a
    cdef long long[::1] idx = idx_a
    cdef double best, d2, nd, da, db, px, py, pz
    cdef double q[3]
    cdef double bq[3]
    cdef long long bt, t
    with nogil:
        for n in range(nq):
            px = Q[n, 0]; py = Q[n, 1]; pz = Q[n, 2]
            best = INFINITY
            bt = -1
            bq[0] = 0.0; bq[1] = 0.0; bq[2] = 0.0
            sp = 0
            stack_nodes[0] = 0
            stack_d[0] = _box_d2(LO, HI, 0, px, py, pz)
            sp = 1
            while sp > 0:
                sp -= 1
                node = stack_nodes[sp]
                nd = stack_d[sp]
                if nd > best:
                    continue
                if L[node] < 0:
                    for k in range(S[node], S[node] + C[node]):
                        t = O[k]
                        d2 = _tri_d2(V, T, t, px, py, pz, q)
                        if d2 < best or (d2 == best and t < bt):
                            best = d2
                            bt = t
                            bq[0] = q[0]; bq[1] = q[1]; bq[2] = q[2]
                    continue
                a = L[node]
                b = R[node]
                da = _box_d2(LO, HI, a, px, py, pz)
                db = _box_d2(LO, HI, b, px, py, pz)
                if da <= db:
                    stack_nodes[sp] = b; stack_d[sp] = db; sp += 1
                    stack_nodes[sp] = a; stack_d[sp] = da; sp += 1
                else:
                    stack_nodes[sp] = a; stack_d[sp] = da; sp += 1
                    stack_nodes[sp] = b; stack_d[sp] = db; sp += 1
            dist[n] = sqrt(best)
            cp[n, 0] = bq[0]; cp[n, 1] = bq[1]; cp[n, 2] = bq[2]
            idx[n] = bt
    return dist_a, cp_a, idx_a


def refit_bvh(vertices, triangles, left, right, start, count, order):
    cdef const double[:, ::1] V = np.ascontiguousarray(vertices, dtype=np.float64)
    cdef const long long[:, ::1] T = np.ascontiguousarray(triangles, dtype=np.int64)
    cdef const long long[::1] L = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long long[::1] R = np.ascontiguousarray(right, dtype=np.int64)
    cdef const long long[::1] S = np.ascontiguousarray(start, dtype=np.int64)
    cdef const long long[::1] C = np.ascontiguousarray(count, dtype=np.int64)
    cdef const long long[::1] O = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t n = L.shape[0], i, k, a, c, v
    lo_a = np.empty((n, 3))
    hi_a = np.empty((n, 3))
    cdef double[:, ::1] lo = lo_a
    cdef double[:, ::1] hi = hi_a
    cdef double x
    with nogil:
        for i in range(n - 1, -1, -1):
            if L[i] < 0:
                for a in range(3):
                    lo[i, a] = INFINITY
                    hi[i, a] = -INFINITY
                for k in range(S[i], S[i] + C[i]):
                    for c in range(3):
                        v = T[O[k], c]
                        for a in range(3):
                            x = V[v, a]
                            if x < lo[i, a]:
                                lo[i, a] = x
                            if x > hi[i, a]:
                                hi[i, a] = x
            else:
                for a in range(3):
                    lo[i, a] = lo[L[i], a] if lo[L[i], a] < lo[R[i], a] else lo[R[i], a]
                    hi[i, a] = hi[L[i], a] if hi[L[i], a] > hi[R[i], a] else hi[R[i], a]
    return lo_a, hi_a
