"""Pure numpy implementations of the compiled kernels.

Results are bitwise identical to ``voxslam.backend._kernels``: rays
advance in lockstep, so each ray performs the same float64 operation
sequence as the compiled per-ray walk, and the scatter applies updates
in the same row-major order as the compiled loop.
"""

from __future__ import annotations

import numpy as np


def ray_voxel_hits(origins, dirs, t_near, t_far, occ, grid_origin, voxel_size, max_hits):
    """March rays through an occupancy lookup, collecting occupied cells.

    ``occ`` is a (res, res, res) int32 array holding a voxel slot id or -1.
    Returns ``(ids, t_in, t_out, counts)`` with ids/t_in/t_out shaped
    (n_rays, max_hits); rows are filled up to counts[r] with intervals
    ordered by distance and clipped to [t_near[r], t_far[r]].  Collection
    stops after max_hits occupied cells.
    """
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    tnear = np.asarray(t_near, dtype=np.float64)
    tfar = np.asarray(t_far, dtype=np.float64)
    occ = np.asarray(occ, dtype=np.int32)
    res = occ.shape[0]
    n = o.shape[0]
    ids = np.full((n, max_hits), -1, dtype=np.int32)
    t_in = np.zeros((n, max_hits))
    t_out = np.zeros((n, max_hits))
    counts = np.zeros(n, dtype=np.int32)
    if n == 0:
        return ids, t_in, t_out, counts

    lo = np.asarray(grid_origin, dtype=np.float64)
    hi = lo + res * voxel_size

    # slab clip against the grid box, axis by axis
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo[None, :] - o) / d
        tb = (hi[None, :] - o) / d
    axis_lo = np.minimum(ta, tb)
    axis_hi = np.maximum(ta, tb)
    zero = d == 0.0
    inside = (o >= lo[None, :]) & (o < hi[None, :])
    axis_lo[zero] = -np.inf
    axis_hi[zero] = np.inf
    axis_lo[zero & ~inside] = np.inf
    axis_hi[zero & ~inside] = -np.inf
    t0 = np.maximum(tnear, axis_lo.max(axis=1))
    t1 = np.minimum(tfar, axis_hi.min(axis=1))

    active = t0 < t1
    p = o + np.where(active, t0, 0.0)[:, None] * d
    cell = np.floor((p - lo[None, :]) / voxel_size).astype(np.int64)
    np.clip(cell, 0, res - 1, out=cell)
    step = np.zeros((n, 3), dtype=np.int64)
    tn = np.full((n, 3), np.inf)
    delta = np.full((n, 3), np.inf)
    pos = d > 0.0
    neg = d < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tn_pos = ((cell + 1) * voxel_size + lo[None, :] - o) / d
        tn_neg = (cell * voxel_size + lo[None, :] - o) / d
        dpos = voxel_size / d
    step[pos] = 1
    step[neg] = -1
    tn[pos] = tn_pos[pos]
    tn[neg] = tn_neg[neg]
    delta[pos] = dpos[pos]
    delta[neg] = -dpos[neg]

    t = t0.copy()
    rows = np.arange(n)
    # a ray crosses at most 3*res cell boundaries inside the box
    for _ in range(3 * res + 4):
        if not active.any():
            break
        r = rows[active]
        slot = occ[cell[r, 0], cell[r, 1], cell[r, 2]]
        astar = np.argmin(tn[r], axis=1)
        tcross = tn[r, astar]
        tex = np.minimum(tcross, t1[r])
        rec = (slot >= 0) & (tex > t[r])
        rr = r[rec]
        at = counts[rr]
        ids[rr, at] = slot[rec]
        t_in[rr, at] = t[rr]
        t_out[rr, at] = tex[rec]
        counts[rr] = at + 1
        stop = (tcross >= t1[r]) | (counts[r] >= max_hits)
        active[r[stop]] = False
        adv = r[~stop]
        if adv.size:
            aa = astar[~stop]
            t[adv] = tn[adv, aa]
            cell[adv, aa] += step[adv, aa]
            oob = (cell[adv, aa] < 0) | (cell[adv, aa] >= res)
            active[adv[oob]] = False
            keep, ak = adv[~oob], aa[~oob]
            tn[keep, ak] += delta[keep, ak]
    return ids, t_in, t_out, counts


def scatter_add(table, idx, weights, grads):
    """table[idx[i, j]] += weights[i, j] * grads[i], in row-major order."""
    idx = np.asarray(idx)
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    contrib = w[:, :, None] * g[:, None, :]
    np.add.at(table, idx.reshape(-1), contrib.reshape(-1, g.shape[1]))
