"""Deterministic CPU rasterizer with z-buffer and perspective-correct barycentrics.

Sampling convention: pixel (i, j) is sampled at its center (i + 0.5, j + 0.5);
ties on edges follow the top-left fill rule.  Back faces are culled by the
sign of the projected signed area (exact at silhouettes).  Depth stores
camera-space z, matching Camera.backproject.  Albedo is interpolated raw;
clamping to [0, 1] happens only at image export.
"""

from dataclasses import dataclass

import numpy as np

from .facemodel import Camera, MeshGeometry
from .sh import sh_basis

_Z_NEAR = 1e-6


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3) linear RGB, background 0
    depth: np.ndarray      # (H, W) camera-space z, +inf background
    normal: np.ndarray     # (H, W, 3) camera-space unit normals, 0 background
    tri_image: np.ndarray  # (H, W) int32 triangle id, -1 background
    bary_image: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    pix: np.ndarray        # (N, 2) int visible pixel coords (x, y), scanline order
    tri: np.ndarray        # (N,) triangle ids
    bary: np.ndarray       # (N, 3)
    camera: Camera

    @property
    def n_visible(self):
        return len(self.pix)


def rasterize(mesh: MeshGeometry, camera: Camera, gamma) -> RenderOutput:
    """Render shaded color, depth, normals, and the visible pixel set."""
    W, H = camera.width, camera.height
    if W <= 0 or H <= 0:
        raise ValueError("image size must be positive")
    cam_pos = camera.world_to_cam(mesh.positions)
    z = cam_pos[:, 2]
    ok = z > _Z_NEAR
    u = np.zeros(len(z))
    v = np.zeros(len(z))
    u[ok] = camera.fx * cam_pos[ok, 0] / z[ok] + camera.cx
    v[ok] = camera.fy * cam_pos[ok, 1] / z[ok] + camera.cy

    tris = mesh.topology
    t_ok = ok[tris].all(axis=1)
    tu, tv, tz = u[tris], v[tris], z[tris]
    # screen-space signed area; outward-oriented front faces come out negative
    area2 = ((tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0])
             - (tv[:, 1] - tv[:, 0]) * (tu[:, 2] - tu[:, 0]))
    t_ok &= area2 < -1e-14
    # bbox overlap with the pixel-center grid
    x0 = np.maximum(np.ceil(tu.min(axis=1) - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(tu.max(axis=1) - 0.5), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(tv.min(axis=1) - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(tv.max(axis=1) - 0.5), H - 1).astype(np.int64)
    t_ok &= (x1 >= x0) & (y1 >= y0)

    depth = np.full((H, W), np.inf)
    tri_image = np.full((H, W), -1, dtype=np.int32)
    bary_image = np.zeros((H, W, 3))

    active = np.nonzero(t_ok)[0]
    if len(active):
        # swap vertices 1/2 so all edge tests run on positive-area triangles
        su = np.stack([tu[active, 0], tu[active, 2], tu[active, 1]], axis=1)
        sv = np.stack([tv[active, 0], tv[active, 2], tv[active, 1]], axis=1)
        sz = np.stack([tz[active, 0], tz[active, 2], tz[active, 1]], axis=1)
        a2 = -area2[active]
        # edge k runs from vertex (k+1)%3 to (k+2)%3; e = cx*px + cy*py + c0
        nxt = np.array([1, 2, 0])
        prv = np.array([2, 0, 1])
        ax, ay = su[:, nxt], sv[:, nxt]
        dx = su[:, prv] - ax
        dy = sv[:, prv] - ay
        cx, cy = -dy, dx
        c0 = dy * ax - dx * ay
        top_left = ((dy == 0) & (dx > 0)) | (dy > 0)

        # flat candidate-fragment list over all triangle bboxes
        bw = (x1 - x0 + 1)[active]
        counts = bw * (y1 - y0 + 1)[active]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        ftri = np.repeat(np.arange(len(active)), counts)
        local = np.arange(counts.sum()) - starts[ftri]
        px = x0[active][ftri] + local % bw[ftri]
        py = y0[active][ftri] + local // bw[ftri]
        sx = px + 0.5
        sy = py + 0.5
        e = cx[ftri] * sx[:, None] + cy[ftri] * sy[:, None] + c0[ftri]
        inside = ((e > 0) | ((e == 0) & top_left[ftri])).all(axis=1)

        ftri, e = ftri[inside], e[inside]
        px, py = px[inside], py[inside]
        lam = e / a2[ftri, None]
        wgt = lam / sz[ftri]
        denom = wgt.sum(axis=1)
        zf = 1.0 / denom
        # nearest fragment wins; depth ties resolve to the lowest triangle id
        flat = py * W + px
        order = np.lexsort((active[ftri], zf, flat))
        keep = np.ones(len(order), dtype=bool)
        keep[1:] = flat[order][1:] != flat[order][:-1]
        sel = order[keep]
        px, py, zf = px[sel], py[sel], zf[sel]
        depth[py, px] = zf
        tri_image[py, px] = active[ftri[sel]].astype(np.int32)
        # undo the vertex swap: barycentrics back in original vertex order
        b = wgt[sel][:, [0, 2, 1]]
        bary_image[py, px] = b / b.sum(axis=1, keepdims=True)

    py, px = np.nonzero(tri_image >= 0)
    pix = np.stack([px, py], axis=-1).astype(np.int32)
    tri = tri_image[py, px]
    bary = bary_image[py, px]

    color = np.zeros((H, W, 3))
    normal = np.zeros((H, W, 3))
    if len(pix):
        vids = tris[tri]
        albedo = np.einsum("nk,nkc->nc", bary, mesh.colors[vids])
        mnorm = np.einsum("nk,nkc->nc", bary, mesh.model_normals[vids])
        mnorm /= np.linalg.norm(mnorm, axis=1, keepdims=True)
        gam = np.asarray(gamma, dtype=np.float64).reshape(3, 9)
        color[py, px] = albedo * (sh_basis(mnorm) @ gam.T)
        wnorm = np.einsum("nk,nkc->nc", bary, mesh.normals[vids])
        wnorm /= np.linalg.norm(wnorm, axis=1, keepdims=True)
        normal[py, px] = wnorm @ camera.R.T
    return RenderOutput(color, depth, normal, tri_image, bary_image, pix, tri, bary, camera)


def pixel_region_mask(render: RenderOutput, vertex_mask, topology) -> np.ndarray:
    """Per-visible-pixel region membership: barycentric mass of masked vertices > 0.5."""
    if render.n_visible == 0:
        return np.zeros(0, dtype=bool)
    m = np.asarray(vertex_mask, dtype=np.float64)
    vids = topology[render.tri]
    return np.einsum("nk,nk->n", render.bary, m[vids]) > 0.5


def restrict_visibility(render: RenderOutput, vertex_mask, topology):
    """Intersect the visible set P with a rasterized per-vertex region mask.

    Returns (pix, tri, bary) arrays of the restricted set P'.
    """
    keep = pixel_region_mask(render, vertex_mask, topology)
    return render.pix[keep], render.tri[keep], render.bary[keep]


def rasterize_2d(verts, tris, width, height):
    """Flat 2D rasterization (affine barycentrics, painter's order).

    Returns (tri_image, bary_image); later triangles overwrite earlier ones.
    Used for grid-warp resampling where triangles do not overlap.
    """
    verts = np.asarray(verts, dtype=np.float64)
    tri_image = np.full((height, width), -1, dtype=np.int32)
    bary_image = np.zeros((height, width, 3))
    for f, t in enumerate(np.asarray(tris)):
        vx, vy = verts[t, 0], verts[t, 1]
        a2 = (vx[1] - vx[0]) * (vy[2] - vy[0]) - (vy[1] - vy[0]) * (vx[2] - vx[0])
        if a2 == 0:
            continue
        swapped = a2 < 0
        if swapped:
            t = t[[0, 2, 1]]
            vx, vy = verts[t, 0], verts[t, 1]
            a2 = -a2
        x0 = max(0, int(np.ceil(vx.min() - 0.5)))
        x1 = min(width - 1, int(np.floor(vx.max() - 0.5)))
        y0 = max(0, int(np.ceil(vy.min() - 0.5)))
        y1 = min(height - 1, int(np.floor(vy.max() - 0.5)))
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        lam = []
        inside = None
        for k in range(3):
            ax, ay = vx[(k + 1) % 3], vy[(k + 1) % 3]
            bx, by = vx[(k + 2) % 3], vy[(k + 2) % 3]
            e = (bx - ax) * (ys[:, None] - ay) - (by - ay) * (xs[None, :] - ax)
            cover = e >= 0
            inside = cover if inside is None else (inside & cover)
            lam.append(e / a2)
        if inside is None or not inside.any():
            continue
        yy, xx = np.nonzero(inside)
        tri_image[yy + y0, xx + x0] = f
        b = np.stack([lam[0][yy, xx], lam[1][yy, xx], lam[2][yy, xx]], axis=-1)
        if swapped:
            b = b[:, [0, 2, 1]]  # back to the original vertex order
        bary_image[yy + y0, xx + x0] = b
    return tri_image, bary_image
