# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: voxel grid traversal and gradient scatter."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, floor

cnp.import_array()


def ray_voxel_hits(origins, dirs, t_near, t_far, occ, grid_origin,
                   double voxel_size, int max_hits):
    """March rays through an occupancy lookup, collecting occupied cells.

    Same contract as voxslam.backend.fallback.ray_voxel_hits.
    """
    o_np = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d_np = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    tn_np = np.ascontiguousarray(t_near, dtype=np.float64)
    tf_np = np.ascontiguousarray(t_far, dtype=np.float64)
    occ_np = np.ascontiguousarray(occ, dtype=np.int32)
    org_np = np.ascontiguousarray(grid_origin, dtype=np.float64)

    cdef double[:, ::1] ov = o_np
    cdef double[:, ::1] dv = d_np
    cdef double[::1] tnear = tn_np
    cdef double[::1] tfar = tf_np
    cdef int[:, :, ::1] occv = occ_np
    cdef double[::1] org = org_np

    cdef Py_ssize_t n = ov.shape[0]
    cdef int res = occv.shape[0]

    ids_np = np.full((n, max_hits), -1, dtype=np.int32)
    tin_np = np.zeros((n, max_hits), dtype=np.float64)
    tout_np = np.zeros((n, max_hits), dtype=np.float64)
    cnt_np = np.zeros(n, dtype=np.int32)
    cdef int[:, ::1] ids = ids_np
    cdef double[:, ::1] tin = tin_np
    cdef double[:, ::1] tout = tout_np
    cdef int[::1] cnt = cnt_np

    cdef double lo[3]
    cdef double hi[3]
    cdef double o[3]
    cdef double d[3]
    cdef double tn[3]
    cdef double delta[3]
    cdef int cell[3]
    cdef int step[3]
    cdef Py_ssize_t r
    cdef int a, astar, slot, c, count, ok
    cdef double t0, t1, ta, tb, tmp, t, tex

    for a in range(3):
        lo[a] = org[a]
        hi[a] = org[a] + res * voxel_size

    for r in range(n):
        for a in range(3):
            o[a] = ov[r, a]
            d[a] = dv[r, a]
        t0 = tnear[r]
        t1 = tfar[r]
        ok = 1
        for a in range(3):
            if d[a] != 0.0:
                ta = (lo[a] - o[a]) / d[a]
                tb = (hi[a] - o[a]) / d[a]
                if ta > tb:
                    tmp = ta
                    ta = tb
                    tb = tmp
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
            elif o[a] < lo[a] or o[a] >= hi[a]:
                ok = 0
        if ok == 0 or t0 >= t1:
            continue
        for a in range(3):
            c = <int>floor((o[a] + t0 * d[a] - lo[a]) / voxel_size)
            if c < 0:
                c = 0
            if c > res - 1:
                c = res - 1
            cell[a] = c
            if d[a] > 0.0:
                step[a] = 1
                tn[a] = ((cell[a] + 1) * voxel_size + lo[a] - o[a]) / d[a]
                delta[a] = voxel_size / d[a]
            elif d[a] < 0.0:
                step[a] = -1
                tn[a] = (cell[a] * voxel_size + lo[a] - o[a]) / d[a]
                delta[a] = -voxel_size / d[a]
            else:
                step[a] = 0
                tn[a] = INFINITY
                delta[a] = INFINITY
        t = t0
        count = 0
        while t < t1 and count < max_hits:
            slot = occv[cell[0], cell[1], cell[2]]
            if tn[0] <= tn[1] and tn[0] <= tn[2]:
                astar = 0
            elif tn[1] <= tn[2]:
                astar = 1
            else:
                astar = 2
            tex = tn[astar]
            if tex > t1:
                tex = t1
            if slot >= 0 and tex > t:
                ids[r, count] = slot
                tin[r, count] = t
                tout[r, count] = tex
                count += 1
            if tn[astar] >= t1:
                break
            t = tn[astar]
            cell[astar] += step[astar]
            if cell[astar] < 0 or cell[astar] >= res:
                break
            tn[astar] += delta[astar]
        cnt[r] = count
    return ids_np, tin_np, tout_np, cnt_np


def scatter_add(table, idx, weights, grads):
    """table[idx[i, j]] += weights[i, j] * grads[i], in row-major order."""
    idx_np = np.ascontiguousarray(idx, dtype=np.int64)
    w_np = np.ascontiguousarray(weights, dtype=np.float64)
    g_np = np.ascontiguousarray(grads, dtype=np.float64)
    cdef double[:, ::1] tab = table
    cdef cnp.int64_t[:, ::1] ix = idx_np
    cdef double[:, ::1] w = w_np
    cdef double[:, ::1] g = g_np
    cdef Py_ssize_t n = ix.shape[0]
    cdef Py_ssize_t k = ix.shape[1]
    cdef Py_ssize_t dim = g.shape[1]
    cdef Py_ssize_t i, j, m
    cdef cnp.int64_t row
    cdef double wv
    for i in range(n):
        for j in range(k):
            row = ix[i, j]
            wv = w[i, j]
            for m in range(dim):
                tab[row, m] += wv * g[i, m]
