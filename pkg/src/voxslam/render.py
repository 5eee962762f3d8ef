"""Differentiable truncated-SDF volume rendering and the training losses.

Per sample, the raw blending weight is sigmoid(s/tr) * sigmoid(-s/tr);
ray color and depth are the weight-normalized sums over the ray's
unmasked samples.  Four losses supervise the map: per-ray L1 color
(channel sum), per-ray L1 depth, and two per-sample SDF regularizers
averaged per ray then per batch: free-space samples pull the predicted
SDF to +tr, truncation-band samples to the depth difference ground
truth.  Samples behind the surface band are excluded everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend, geometry
from .decoder import sigmoid
from .errors import EmptyBatch
from .grid import RaySampleBatch, sample_rays, trilerp_weight_grads

DEGENERATE_WEIGHT_SUM = 1e-10

DEFAULT_LAMBDAS = {"rgb": 10.0, "depth": 1.0, "fs": 10.0, "sdf": 100.0}


@dataclass
class LossBreakdown:
    rgb: float
    depth: float
    fs: float
    sdf: float
    total: float


class RenderContext:
    """One rendered batch: losses up front, gradients on demand.

    ``backward(embedding_grad_table)`` accumulates decoder gradients on
    the decoder, scatters embedding gradients into the given table, and
    leaves d(loss)/d(sample position) in ``self.dpos`` for pose updates.
    """

    def __init__(self, batch: RaySampleBatch, embeddings, decoder, tr,
                 voxel_size, lambdas=None, with_tape=True):
        if batch.n_rays == 0 or batch.n_samples == 0:
            raise EmptyBatch("batch has no rays or no samples")
        self.batch = batch
        self.embeddings = embeddings
        self.decoder = decoder
        self.tr = float(tr)
        self.voxel_size = float(voxel_size)
        self.lambdas = dict(DEFAULT_LAMBDAS if lambdas is None else lambdas)

        feats = np.einsum("sj,sjd->sd", batch.weights, embeddings[batch.corner_rows])
        if with_tape:
            self.s, self.c, self._tape = decoder.forward_tape(feats)
        else:
            self.s, self.c = decoder.decode(feats)
            self._tape = None
        self.sig = sigmoid(self.s / self.tr)
        self.w_raw = self.sig * (1.0 - self.sig)

        r = batch.ray_index
        n = batch.n_rays
        self.render_mask = ~batch.behind_mask
        wm = np.where(self.render_mask, self.w_raw, 0.0)
        self.weight_sum = np.bincount(r, weights=wm, minlength=n)
        self.depth_num = np.bincount(r, weights=wm * batch.t, minlength=n)
        color_num = np.stack(
            [np.bincount(r, weights=wm * self.c[:, ch], minlength=n) for ch in range(3)],
            axis=1,
        )
        self.hit = batch.rays_hit
        self.degenerate = self.hit & (self.weight_sum < DEGENERATE_WEIGHT_SUM)
        self.valid = self.hit & ~self.degenerate
        w_safe = np.where(self.valid, self.weight_sum, 1.0)
        self.color = color_num / w_safe[:, None]
        self.depth = self.depth_num / w_safe

        gt_ok = np.isfinite(batch.gt_depth) & (batch.gt_depth > 0)
        self.rays_rgb = self.valid
        self.rays_depth = self.valid & gt_ok
        sample_ok = self.valid[r]
        self.free_use = batch.free_mask & sample_ok
        self.trunc_use = batch.trunc_mask & sample_ok
        self.nf = np.bincount(r, weights=self.free_use.astype(np.float64), minlength=n)
        self.ns = np.bincount(r, weights=self.trunc_use.astype(np.float64), minlength=n)
        self.rays_fs = self.nf > 0
        self.rays_sdf = self.ns > 0

        lam = self.lambdas
        n_rgb = int(self.rays_rgb.sum())
        n_dep = int(self.rays_depth.sum())
        n_fs = int(self.rays_fs.sum())
        n_sdf = int(self.rays_sdf.sum())
        self._n = (n_rgb, n_dep, n_fs, n_sdf)

        l_rgb = 0.0
        if n_rgb:
            l_rgb = float(
                np.abs(self.color[self.rays_rgb] - batch.gt_color[self.rays_rgb])
                .sum(axis=1)
                .mean()
            )
        l_depth = 0.0
        if n_dep:
            l_depth = float(
                np.abs(self.depth[self.rays_depth] - batch.gt_depth[self.rays_depth]).mean()
            )
        self.sdf_target = np.clip(batch.gt_depth[r] - batch.t, -self.tr, self.tr)
        l_fs = 0.0
        if n_fs:
            per = np.where(self.free_use, (self.s - self.tr) ** 2, 0.0)
            ray_sum = np.bincount(r, weights=per, minlength=n)
            l_fs = float((ray_sum[self.rays_fs] / self.nf[self.rays_fs]).mean())
        l_sdf = 0.0
        if n_sdf:
            per = np.where(self.trunc_use, (self.s - self.sdf_target) ** 2, 0.0)
            ray_sum = np.bincount(r, weights=per, minlength=n)
            l_sdf = float((ray_sum[self.rays_sdf] / self.ns[self.rays_sdf]).mean())

        total = lam["rgb"] * l_rgb + lam["depth"] * l_depth + lam["fs"] * l_fs + lam["sdf"] * l_sdf
        self.losses = LossBreakdown(l_rgb, l_depth, l_fs, l_sdf, total)
        self.dpos = None

    def backward(self, embedding_grad_table: np.ndarray = None,
                 pose_only: bool = False) -> np.ndarray:
        """Backpropagate d(total)/d(everything); returns dpos (S, 3).

        ``pose_only=True`` skips decoder parameter gradients and the
        embedding scatter; only ``dpos`` is produced (tracking path).
        """
        if self._tape is None:
            raise RuntimeError("render was built without a tape")
        if embedding_grad_table is None and not pose_only:
            raise ValueError("embedding_grad_table required unless pose_only")
        batch = self.batch
        lam = self.lambdas
        r = batch.ray_index
        n_rgb, n_dep, n_fs, n_sdf = self._n

        d_color_ray = np.zeros((batch.n_rays, 3))
        if n_rgb:
            sgn = np.sign(self.color - batch.gt_color)
            d_color_ray[self.rays_rgb] = lam["rgb"] / n_rgb * sgn[self.rays_rgb]
        d_depth_ray = np.zeros(batch.n_rays)
        if n_dep:
            sgn = np.sign(self.depth - batch.gt_depth)
            d_depth_ray[self.rays_depth] = lam["depth"] / n_dep * sgn[self.rays_depth]

        use = self.render_mask & self.valid[r]
        w_safe = np.where(self.valid, self.weight_sum, 1.0)
        inv_w = (1.0 / w_safe)[r]
        # d(ray color)/d(raw weight_i) = (c_i - C)/W; d(ray depth)/d(w_i) = (t_i - D)/W
        dw = (
            np.einsum("sc,sc->s", d_color_ray[r], self.c - self.color[r])
            + d_depth_ray[r] * (batch.t - self.depth[r])
        ) * inv_w
        dw = np.where(use, dw, 0.0)
        dc = d_color_ray[r] * (self.w_raw * inv_w)[:, None]
        dc = np.where(use[:, None], dc, 0.0)

        # d(raw weight)/d(sdf) through both sigmoids
        dwdx = self.w_raw * (1.0 - 2.0 * self.sig)
        ds = dw * dwdx / self.tr
        if n_fs:
            coef = lam["fs"] / n_fs
            ds = ds + np.where(
                self.free_use, coef * 2.0 * (self.s - self.tr) / np.maximum(self.nf[r], 1.0), 0.0
            )
        if n_sdf:
            coef = lam["sdf"] / n_sdf
            ds = ds + np.where(
                self.trunc_use,
                coef * 2.0 * (self.s - self.sdf_target) / np.maximum(self.ns[r], 1.0),
                0.0,
            )

        dfeat = self._tape.backward(ds, dc, params=not pose_only)
        if not pose_only:
            backend.scatter_add(
                embedding_grad_table, batch.corner_rows, batch.weights, dfeat
            )
        corner_feats = self.embeddings[batch.corner_rows]
        d_weights = np.einsum("sd,sjd->sj", dfeat, corner_feats)
        wg = trilerp_weight_grads(batch.fracs)
        self.dpos = np.einsum("sj,sjk->sk", d_weights, wg) / self.voxel_size
        return self.dpos

    def pose_twist_grads(self) -> np.ndarray:
        """d(total)/d(left pose increment) per frame group.

        Requires backward() first.  Positions are map-frame, so the
        increment acts on each frame's camera-to-map pose.  Returns
        (G, 6) where G = max(frame_index) + 1, or (1, 6) for
        single-frame batches.
        """
        if self.dpos is None:
            raise RuntimeError("call backward() before pose_twist_grads()")
        batch = self.batch
        if batch.frame_index is None:
            return geometry.twist_gradient(batch.positions, self.dpos)[None, :]
        groups = np.asarray(batch.frame_index)[batch.ray_index]
        n_groups = int(groups.max()) + 1 if groups.size else 0
        out = np.zeros((n_groups, 6))
        for g in range(n_groups):
            sel = groups == g
            if np.any(sel):
                out[g] = geometry.twist_gradient(batch.positions[sel], self.dpos[sel])
        return out


def render_batch(batch, embeddings, decoder, tr, voxel_size,
                 lambdas=None, with_tape=True) -> RenderContext:
    return RenderContext(batch, embeddings, decoder, tr, voxel_size,
                         lambdas=lambdas, with_tape=with_tape)


def first_surface_cut(batch: RaySampleBatch, embeddings, decoder, tr,
                      step) -> RaySampleBatch:
    """Drop per-ray samples past the first surface crossing.

    Without ground truth every allocated sample would blend into the
    ray, so a closed object contributes both its near and far band and
    the normalized depth lands between them.  Each ray is therefore
    truncated a fixed window after its first sample with decoded
    sdf < -0.1*tr: the window (about one band half-width of samples)
    keeps the blend roughly symmetric around the crossing.  The margin
    guards against free-space noise; the band itself drops well past
    it within one step.  Rays with no negative reading keep all their
    samples.
    """
    import dataclasses

    n = batch.ray_index.shape[0]
    if n == 0:
        return batch
    feats = np.einsum("sj,sjd->sd", batch.weights,
                      embeddings[batch.corner_rows])
    s = decoder.decode_sdf(feats)
    inside = s < -0.1 * tr
    if not np.any(inside):
        return batch
    r = batch.ray_index
    starts = np.ones(n, dtype=bool)
    starts[1:] = r[1:] != r[:-1]
    start_idx = np.flatnonzero(starts)
    runs = np.diff(np.append(start_idx, n))
    local = np.arange(n) - np.repeat(start_idx, runs)
    first_in = np.minimum.reduceat(np.where(inside, local, n), start_idx)
    window = max(1, int(round(tr / step)))
    keep = local <= np.repeat(first_in, runs) + window
    if np.all(keep):
        return batch
    return dataclasses.replace(
        batch,
        ray_index=r[keep], t=batch.t[keep], positions=batch.positions[keep],
        corner_rows=batch.corner_rows[keep], weights=batch.weights[keep],
        fracs=batch.fracs[keep], free_mask=batch.free_mask[keep],
        trunc_mask=batch.trunc_mask[keep], behind_mask=batch.behind_mask[keep],
    )


def render_pixels(grid, embeddings, decoder, pose_c2m, intr, us, vs,
                  tr, step, max_hits=64, max_distance=8.0,
                  first_surface=True):
    """Render color/depth at given pixels from a map snapshot.

    No ground truth is involved: every sample renders, except that by
    default each ray stops at its first surface crossing (the opaque
    raycasting convention; pass ``first_surface=False`` to blend every
    allocated sample instead).  Returns a dict with 'color' (N,3),
    'depth_z' (N,) z-depth in meters (0 where the ray missed or
    rendered degenerate), 'hit' and 'valid' masks.
    """
    us = np.asarray(us, dtype=np.float64).reshape(-1)
    vs = np.asarray(vs, dtype=np.float64).reshape(-1)
    origins, dirs, scale = geometry.pixel_rays(us, vs, intr, pose_c2m)
    n = us.shape[0]
    zeros = np.zeros(n)
    batch = sample_rays(
        grid, origins, dirs, np.zeros((n, 3)), zeros,
        step=step, tr=tr, max_hits=max_hits, max_distance=max_distance,
    )
    if first_surface:
        batch = first_surface_cut(batch, embeddings, decoder, tr, step)
    ctx = RenderContext(batch, embeddings, decoder, tr, grid.voxel_size,
                        with_tape=False)
    depth_z = np.where(ctx.valid, ctx.depth / scale, 0.0)
    color = np.where(ctx.valid[:, None], ctx.color, 0.0)
    return {
        "color": color,
        "depth_z": depth_z,
        "depth_ray": np.where(ctx.valid, ctx.depth, 0.0),
        "hit": ctx.hit,
        "valid": ctx.valid,
        "weight_sum": ctx.weight_sum,
    }
