"""Residual blocks and matrix-free Jacobian products for the tracking energies.

Two energies are assembled from shared blocks:

  target (stereo):  w_ste * E_ste + w_lan * E_lan + w_reg * E_reg
  source (RGB-D):   w_rgb * E_rgb + w_geo * (w_point * E_point + w_plane * E_plane)
                    + w_sta * E_sta + w_reg * E_reg

Dense residuals are defined on a *frozen footprint*: the visible pixels of a
forward render, each carrying its triangle and perspective-correct
barycentric coordinates.  Within one Gauss-Newton step the footprint is
fixed while colors, depths, normals, and projections remain smooth analytic
functions of the parameters; the photometric term compares the shaded model
color of the frozen surface sample against the input image sampled at its
moving projection.  Jacobian products are evaluated chain-wise and never
materialize J^T J.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .facemodel import Camera, FaceBasis, ParamLayout, ParamVector
from .imgio import sample_bilinear
from .raster import RenderOutput, pixel_region_mask
from .sh import sh_basis, sh_basis_grad


class TrackingLossError(RuntimeError):
    """Raised when the model is no longer visible in any view."""

    def __init__(self, message, level=None, iteration=None):
        super().__init__(message)
        self.level = level
        self.iteration = iteration


@dataclass
class EnergyWeights:
    # target (stereo) energy
    w_ste: float = 100.0
    w_lan: float = 0.0005
    w_reg: float = 0.0025
    # source (RGB-D) energy
    w_rgb: float = 100.0
    w_geo: float = 10000.0
    w_sta: float = 1.0
    w_point: float = 1.0
    w_plane: float = 1.0
    eps_irls: float = 1e-6

    def __post_init__(self):
        for name in ("w_ste", "w_lan", "w_reg", "w_rgb", "w_geo", "w_sta",
                     "w_point", "w_plane"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class MarkerSet:
    """2D marker-corner detections plus their face-model-space references."""

    pixels: np.ndarray  # (M, 2)
    ids: np.ndarray     # (M,), values in 0..7
    ref: np.ndarray     # (8, 3) model-space corner positions A_k

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.ids = np.asarray(self.ids, dtype=np.int64).ravel()
        self.ref = np.asarray(self.ref, dtype=np.float64).reshape(-1, 3)
        if len(self.pixels) > 8:
            raise ValueError("marker set has at most 8 correspondences")


@dataclass
class FrameObservation:
    """Per-view observation: image, optional depth, landmarks, markers."""

    camera: Camera
    rgb: np.ndarray
    depth: np.ndarray | None = None
    normals: np.ndarray | None = None
    landmark_pix: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    landmark_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    landmark_conf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    markers: MarkerSet | None = None
    occluded: bool = False  # HMD mode: dense terms restricted to the lower face

    def __post_init__(self):
        self.landmark_pix = np.asarray(self.landmark_pix, dtype=np.float64).reshape(-1, 2)
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64).ravel()
        self.landmark_conf = np.asarray(self.landmark_conf, dtype=np.float64).ravel()
        if np.any(self.landmark_ids >= 66) or np.any(self.landmark_ids < 0):
            raise ValueError("landmark indices must be < 66")


# ---------------------------------------------------------------------------
# chain helpers


def _gather(bary, vids, arr):
    return np.einsum("nk,nkc->nc", bary, arr[vids])


def _scatter(bary, vids, u, n_vertices):
    """Adjoint of _gather: accumulate (N, 3) pixel values onto vertices."""
    acc = np.zeros((n_vertices, 3))
    for k in range(3):
        w = bary[:, k]
        idx = vids[:, k]
        for c in range(3):
            acc[:, c] += np.bincount(idx, weights=w * u[:, c], minlength=n_vertices)
    return acc


def _normalize_jvp(raw, unit, inv_norm, d):
    return (d - unit * np.einsum("nc,nc->n", unit, d)[:, None]) * inv_norm[:, None]


class _PoseCache:
    """Shared per-parameter-vector quantities for one linearization."""

    def __init__(self, basis: FaceBasis, pv: ParamVector):
        self.pv = pv
        self.R = pv.rotation()
        V = basis.n_vertices
        self.model_pos = (basis.mean_geometry.ravel() + basis.id_basis @ pv.alpha
                          + basis.exp_basis @ pv.delta).reshape(V, 3)
        self.albedo_v = (basis.mean_albedo.ravel()
                         + basis.alb_basis @ pv.beta).reshape(V, 3)
        self.gam = pv.gamma.reshape(3, 9)
        self._normals = None
        self.basis = basis

    @property
    def normals(self):
        # model-frame area-weighted vertex normals plus chain intermediates
        if self._normals is None:
            b = self.basis
            tri = self.model_pos[b.topology]
            e1 = tri[:, 1] - tri[:, 0]
            e2 = tri[:, 2] - tri[:, 0]
            face_n = np.cross(e1, e2)
            vraw = b.vertex_face @ face_n
            norm = np.linalg.norm(vraw, axis=1)
            inv = 1.0 / np.where(norm > 0, norm, 1.0)
            vunit = vraw * inv[:, None]
            self._normals = (e1, e2, face_n, vraw, inv, vunit)
        return self._normals

    def model_pos_jvp(self, d):
        b = self.basis
        return (b.id_basis @ d["alpha"] + b.exp_basis @ d["delta"]).reshape(-1, 3)

    def vertex_normal_jvp(self, dP):
        b = self.basis
        e1, e2, _, vraw, inv, vunit = self.normals
        dtri = dP[b.topology]
        dface = (np.cross(dtri[:, 1] - dtri[:, 0], e2)
                 + np.cross(e1, dtri[:, 2] - dtri[:, 0]))
        dvraw = b.vertex_face @ dface
        return _normalize_jvp(vraw, vunit, inv, dvraw)

    def vertex_normal_vjp(self, u_vunit):
        """Adjoint of vertex_normal_jvp: (V, 3) normal cotangent -> (V, 3) position cotangent."""
        b = self.basis
        e1, e2, _, vraw, inv, vunit = self.normals
        u_vraw = _normalize_jvp(vraw, vunit, inv, u_vunit)  # projection is symmetric
        u_face = (b.vertex_face.T @ u_vraw)
        u_e1 = np.cross(e2, u_face)
        u_e2 = np.cross(u_face, e1)
        uP = np.zeros_like(vraw)
        t = b.topology
        for col, val in ((t[:, 1], u_e1), (t[:, 2], u_e2), (t[:, 0], -(u_e1 + u_e2))):
            for c in range(3):
                uP[:, c] += np.bincount(col, weights=val[:, c], minlength=len(vraw))
        return uP


# ---------------------------------------------------------------------------
# blocks


class DenseViewBlock:
    """Dense residuals of one view over a frozen full-resolution footprint.

    kinds is a subset of {"photo", "point", "plane"}.  At pyramid level L
    (box factor k = 2^L) the per-sample residuals are averaged over k x k
    pixel boxes: both the rendered and the observed side see the same box
    filter, so coarse levels are band-limited without bias and the visible
    set P consists of the covered coarse pixels.  Residual layout is the
    concatenation [photo (3G), point (3G), plane (2G_plane)] over G groups.
    """

    def __init__(self, basis, camera, pix, vids, bary, image=None,
                 depth_points=None, input_normals=None, kinds=("photo",),
                 w_photo=0.0, w_point=0.0, w_plane=0.0, box=1):
        self.basis = basis
        self.camera = camera
        self.box = int(box)
        # group full-resolution samples into box x box level cells and keep
        # only fully covered cells, so the model-side box average compares
        # against the identically filtered observation
        pix64 = pix.astype(np.int64)
        coarse = (pix64[:, 0] // self.box) + (pix64[:, 1] // self.box) * (1 << 30)
        ids, group = np.unique(coarse, return_inverse=True)
        counts = np.bincount(group, minlength=len(ids))
        full = counts == self.box ** 2
        keep = full[group]
        pix, vids, bary = pix[keep], vids[keep], bary[keep]
        if input_normals is not None:
            input_normals = input_normals[keep]
        if depth_points is not None:
            depth_points = depth_points[keep]
        _, self.group = np.unique(group[keep], return_inverse=True)
        self.n_groups = int(self.group.max()) + 1 if len(pix) else 0
        counts = np.bincount(self.group, minlength=self.n_groups)
        self._inv_count = 1.0 / np.maximum(counts, 1)
        self.pix = pix
        self.vids = vids
        self.bary = bary
        self.image = image
        if image is not None:
            # observation at this level: block-mean downsample; sampling it
            # bilinearly at the mean child projection (in level coords)
            # reproduces the box average exactly at freeze time and carries
            # band-limited gradients for the linearization
            k, img = self.box, np.asarray(image, dtype=np.float64)
            h, w = img.shape[:2]
            img = img[:h // k * k, :w // k * k]
            self.image_level = img.reshape(h // k, k, w // k, k, 3).mean(axis=(1, 3))
            self.grad_level = np.concatenate(
                [np.gradient(self.image_level, axis=1),
                 np.gradient(self.image_level, axis=0)], axis=-1)
        self.depth_points = depth_points  # (N, 3) camera-space back-projected input
        self.kinds = tuple(kinds)
        self.n_pix = len(pix)
        self.w_photo = w_photo
        self.w_point = w_point
        self.w_plane = w_plane
        if "plane" in self.kinds:
            norms = np.linalg.norm(input_normals, axis=1)
            self.plane_keep = norms > 1e-9  # degenerate input normals dropped
            self.input_normals = input_normals[self.plane_keep]
            pg = self.group[self.plane_keep]
            pg_ids, self.plane_group = np.unique(pg, return_inverse=True)
            self.n_plane_groups = len(pg_ids)
            pc = np.bincount(self.plane_group, minlength=self.n_plane_groups)
            self._plane_inv_count = 1.0 / np.maximum(pc, 1)
        else:
            self.plane_keep = np.zeros(self.n_pix, dtype=bool)
            self.input_normals = None
            self.n_plane_groups = 0
        self.robust_groups = 3 if "photo" in self.kinds else 0

    def _agg(self, values):
        """Box-average child values (N, C) into groups (G, C)."""
        out = np.empty((self.n_groups, values.shape[1]))
        for c in range(values.shape[1]):
            out[:, c] = np.bincount(self.group, weights=values[:, c],
                                    minlength=self.n_groups)
        return out * self._inv_count[:, None]

    def _agg_t(self, u):
        """Adjoint of _agg: spread group cotangents back to children."""
        return (u * self._inv_count[:, None])[self.group]

    def _agg_plane(self, values):
        out = np.empty((self.n_plane_groups, values.shape[1]))
        for c in range(values.shape[1]):
            out[:, c] = np.bincount(self.plane_group, weights=values[:, c],
                                    minlength=self.n_plane_groups)
        return out * self._plane_inv_count[:, None]

    def _agg_plane_t(self, u):
        return (u * self._plane_inv_count[:, None])[self.plane_group]

    @property
    def n_res(self):
        n = 0
        if "photo" in self.kinds:
            n += 3 * self.n_groups
        if "point" in self.kinds:
            n += 3 * self.n_groups
        if "plane" in self.kinds:
            n += 2 * self.n_plane_groups
        return n

    def base_weights(self):
        # the box factor compensates the group count so the geometric terms
        # keep the full-resolution energy scale
        parts = []
        if "photo" in self.kinds:
            parts.append(np.full(3 * self.n_groups,
                                 self.w_photo / max(self.n_groups, 1)))
        if "point" in self.kinds:
            parts.append(np.full(3 * self.n_groups, self.w_point * self.box ** 2))
        if "plane" in self.kinds:
            parts.append(np.full(2 * self.n_plane_groups,
                                 self.w_plane * self.box ** 2))
        return np.concatenate(parts) if parts else np.zeros(0)

    def forward(self, cache: _PoseCache, with_grad=False):
        f = {}
        f["m"] = _gather(self.bary, self.vids, cache.model_pos)
        f["rm"] = f["m"] @ cache.R.T
        world = f["rm"] + cache.pv.trans
        f["cam"] = world @ self.camera.R.T + self.camera.t
        z = f["cam"][:, 2]
        f["q"] = np.stack([self.camera.fx * f["cam"][:, 0] / z + self.camera.cx,
                           self.camera.fy * f["cam"][:, 1] / z + self.camera.cy],
                          axis=-1)
        if "photo" in self.kinds or "plane" in self.kinds:
            _, _, _, _, _, vunit = cache.normals
            ni = _gather(self.bary, self.vids, vunit)
            norm = np.linalg.norm(ni, axis=1)
            f["ni"] = ni
            f["ni_inv"] = 1.0 / norm
            f["n"] = ni * f["ni_inv"][:, None]
        if "photo" in self.kinds:
            f["a"] = _gather(self.bary, self.vids, cache.albedo_v)
            f["Y"] = sh_basis(f["n"])
            f["s"] = f["Y"] @ cache.gam.T
            f["C"] = f["a"] * f["s"]
            f["q_level"] = self._agg(f["q"]) / self.box
            f["I"] = sample_bilinear(self.image_level, f["q_level"])
            if with_grad:
                g = sample_bilinear(self.grad_level, f["q_level"])
                f["G"] = np.stack([g[:, :3], g[:, 3:]], axis=-1)
        if "plane" in self.kinds:
            nw = f["n"][self.plane_keep] @ cache.R.T
            f["nS"] = nw @ self.camera.R.T
            f["diff"] = f["cam"][self.plane_keep] - self.depth_points[self.plane_keep]
        return f

    def residual(self, cache, f=None):
        f = f or self.forward(cache)
        parts = []
        if "photo" in self.kinds:
            parts.append((self._agg(f["C"]) - f["I"]).ravel())
        if "point" in self.kinds:
            parts.append(self._agg(f["cam"] - self.depth_points).ravel())
        if "plane" in self.kinds:
            r1 = np.einsum("nc,nc->n", f["diff"], f["nS"])
            r2 = np.einsum("nc,nc->n", f["diff"], self.input_normals)
            parts.append(self._agg_plane(np.stack([r1, r2], axis=-1)).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def _dq(self, f, dcam):
        z = f["cam"][:, 2]
        dqx = self.camera.fx * (dcam[:, 0] / z - f["cam"][:, 0] * dcam[:, 2] / z ** 2)
        dqy = self.camera.fy * (dcam[:, 1] / z - f["cam"][:, 1] * dcam[:, 2] / z ** 2)
        return np.stack([dqx, dqy], axis=-1)

    def _uq_to_ucam(self, f, uq):
        z = f["cam"][:, 2]
        ucam = np.zeros_like(f["cam"])
        ucam[:, 0] = self.camera.fx / z * uq[:, 0]
        ucam[:, 1] = self.camera.fy / z * uq[:, 1]
        ucam[:, 2] = (-self.camera.fx * f["cam"][:, 0] / z ** 2 * uq[:, 0]
                      - self.camera.fy * f["cam"][:, 1] / z ** 2 * uq[:, 1])
        return ucam

    def jvp(self, cache, f, d):
        dP = cache.model_pos_jvp(d)
        dm = _gather(self.bary, self.vids, dP)
        dworld = np.cross(np.broadcast_to(d["rot"], f["rm"].shape), f["rm"]) \
            + dm @ cache.R.T + d["trans"]
        dcam = dworld @ self.camera.R.T
        parts = []
        need_n = "photo" in self.kinds or "plane" in self.kinds
        if need_n:
            dvunit = cache.vertex_normal_jvp(dP)
            dni = _gather(self.bary, self.vids, dvunit)
            dn = _normalize_jvp(f["ni"], f["n"], f["ni_inv"], dni)
        if "photo" in self.kinds:
            da = _gather(self.bary, self.vids,
                         (self.basis.alb_basis @ d["beta"]).reshape(-1, 3))
            dY = np.einsum("nbk,nk->nb", sh_basis_grad(f["n"]), dn)
            ds = dY @ cache.gam.T + f["Y"] @ d["gamma"].reshape(3, 9).T
            dC = da * f["s"] + f["a"] * ds
            dq_level = self._agg(self._dq(f, dcam)) / self.box
            dI = np.einsum("gcj,gj->gc", f["G"], dq_level)
            parts.append((self._agg(dC) - dI).ravel())
        if "point" in self.kinds:
            parts.append(self._agg(dcam).ravel())
        if "plane" in self.kinds:
            keep = self.plane_keep
            nm = f["n"][keep] @ cache.R.T  # world-frame rendered normal
            dnS = (np.cross(np.broadcast_to(d["rot"], nm.shape), nm)
                   + dn[keep] @ cache.R.T) @ self.camera.R.T
            d1 = (np.einsum("nc,nc->n", dcam[keep], f["nS"])
                  + np.einsum("nc,nc->n", f["diff"], dnS))
            d2 = np.einsum("nc,nc->n", dcam[keep], self.input_normals)
            parts.append(self._agg_plane(np.stack([d1, d2], axis=-1)).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def vjp(self, cache, f, u, layout):
        g = np.zeros(layout.dim)
        s = layout.slices
        V = self.basis.n_vertices
        ucam = np.zeros_like(f["cam"])
        u_n = None
        off = 0
        if "photo" in self.kinds:
            ug = u[off:off + 3 * self.n_groups].reshape(-1, 3)
            off += 3 * self.n_groups
            # color side (box-averaged model color)
            ur = self._agg_t(ug)
            ua = ur * f["s"]
            acc = _scatter(self.bary, self.vids, ua, V)
            g[s["beta"]] += self.basis.alb_basis.T @ acc.ravel()
            us = ur * f["a"]
            g[s["gamma"]] += (us.T @ f["Y"]).ravel()
            u_n = np.einsum("nc,cb,nbk->nk", us, cache.gam, sh_basis_grad(f["n"]))
            # image-sampling side (level image at the mean projection)
            uq_level = -np.einsum("gcj,gc->gj", f["G"], ug)
            uq = self._agg_t(uq_level) / self.box
            ucam += self._uq_to_ucam(f, uq)
        if "point" in self.kinds:
            ucam += self._agg_t(u[off:off + 3 * self.n_groups].reshape(-1, 3))
            off += 3 * self.n_groups
        if "plane" in self.kinds:
            keep = self.plane_keep
            upl = self._agg_plane_t(
                u[off:off + 2 * self.n_plane_groups].reshape(-1, 2))
            off += 2 * self.n_plane_groups
            ucam_pl = upl[:, 0:1] * f["nS"] + upl[:, 1:2] * self.input_normals
            tmp = np.zeros_like(ucam)
            tmp[keep] = ucam_pl
            ucam += tmp
            u_nS = upl[:, 0:1] * f["diff"]
            u_nw = u_nS @ self.camera.R
            nm = f["n"][keep] @ cache.R.T
            g[s["rot"]] += np.cross(nm, u_nw).sum(axis=0)
            u_n_pl = u_nw @ cache.R
            if u_n is None:
                u_n = np.zeros((self.n_pix, 3))
            tmp = np.zeros((self.n_pix, 3))
            tmp[keep] = u_n_pl
            u_n = u_n + tmp
        # rigid chain adjoint
        uworld = ucam @ self.camera.R
        g[s["trans"]] += uworld.sum(axis=0)
        g[s["rot"]] += np.cross(f["rm"], uworld).sum(axis=0)
        um = uworld @ cache.R
        uP = _scatter(self.bary, self.vids, um, V)
        # normal chain adjoint
        if u_n is not None and np.any(u_n):
            u_ni = _normalize_jvp(f["ni"], f["n"], f["ni_inv"], u_n)
            u_vunit = _scatter(self.bary, self.vids, u_ni, V)
            uP += cache.vertex_normal_vjp(u_vunit)
        g[s["alpha"]] += self.basis.id_basis.T @ uP.ravel()
        g[s["delta"]] += self.basis.exp_basis.T @ uP.ravel()
        return g


class LandmarkBlock:
    """Sparse 2D point-to-point residuals l - Pi(F_k) for one view."""

    def __init__(self, basis, camera, landmark_pix, landmark_ids, landmark_conf,
                 weight, coord_scale=1.0):
        self.basis = basis
        self.camera = camera
        self.obs = landmark_pix
        self.vid = basis.landmark_vertex_ids[landmark_ids]
        self.conf = landmark_conf
        self.weight = weight  # w_lan (the 1/|L| normalizer is applied here)
        self.coord_scale = coord_scale  # pyramid levels rescale pixel coords
        self.n = len(landmark_pix)
        self.robust_groups = 0

    @property
    def n_res(self):
        return 2 * self.n

    def base_weights(self):
        if self.n == 0:
            return np.zeros(0)
        return np.repeat(self.weight * self.conf / self.n, 2)

    def forward(self, cache, with_grad=False):
        f = {}
        f["m"] = cache.model_pos[self.vid]
        f["rm"] = f["m"] @ cache.R.T
        world = f["rm"] + cache.pv.trans
        f["cam"] = world @ self.camera.R.T + self.camera.t
        z = f["cam"][:, 2]
        f["q"] = np.stack([self.camera.fx * f["cam"][:, 0] / z + self.camera.cx,
                           self.camera.fy * f["cam"][:, 1] / z + self.camera.cy],
                          axis=-1)
        return f

    def residual(self, cache, f=None):
        f = f or self.forward(cache)
        return ((self.obs - f["q"]) * self.coord_scale).ravel()

    def jvp(self, cache, f, d):
        if self.n == 0:
            return np.zeros(0)
        dP = cache.model_pos_jvp(d)[self.vid]
        dworld = np.cross(np.broadcast_to(d["rot"], f["rm"].shape), f["rm"]) \
            + dP @ cache.R.T + d["trans"]
        dcam = dworld @ self.camera.R.T
        z = f["cam"][:, 2]
        dqx = self.camera.fx * (dcam[:, 0] / z - f["cam"][:, 0] * dcam[:, 2] / z ** 2)
        dqy = self.camera.fy * (dcam[:, 1] / z - f["cam"][:, 1] * dcam[:, 2] / z ** 2)
        return -self.coord_scale * np.stack([dqx, dqy], axis=-1).ravel()

    def vjp(self, cache, f, u, layout):
        g = np.zeros(layout.dim)
        if self.n == 0:
            return g
        s = layout.slices
        uq = -self.coord_scale * u.reshape(-1, 2)
        z = f["cam"][:, 2]
        ucam = np.zeros_like(f["cam"])
        ucam[:, 0] = self.camera.fx / z * uq[:, 0]
        ucam[:, 1] = self.camera.fy / z * uq[:, 1]
        ucam[:, 2] = (-self.camera.fx * f["cam"][:, 0] / z ** 2 * uq[:, 0]
                      - self.camera.fy * f["cam"][:, 1] / z ** 2 * uq[:, 1])
        uworld = ucam @ self.camera.R
        g[s["trans"]] += uworld.sum(axis=0)
        g[s["rot"]] += np.cross(f["rm"], uworld).sum(axis=0)
        um = uworld @ cache.R
        uP = np.zeros((self.basis.n_vertices, 3))
        for c in range(3):
            uP[:, c] = np.bincount(self.vid, weights=um[:, c],
                                   minlength=self.basis.n_vertices)
        g[s["alpha"]] += self.basis.id_basis.T @ uP.ravel()
        g[s["delta"]] += self.basis.exp_basis.T @ uP.ravel()
        return g


class MarkerBlock:
    """Rigid stabilization residuals l - Pi(T A_k); depends only on T."""

    def __init__(self, camera, markers: MarkerSet, weight, coord_scale=1.0):
        self.camera = camera
        self.obs = markers.pixels
        self.ref = markers.ref[markers.ids]
        self.weight = weight
        self.coord_scale = coord_scale
        self.n = len(self.obs)
        self.robust_groups = 0

    @property
    def n_res(self):
        return 2 * self.n

    def base_weights(self):
        return np.full(2 * self.n, self.weight / max(self.n, 1))

    def forward(self, cache, with_grad=False):
        f = {}
        f["rm"] = self.ref @ cache.R.T
        world = f["rm"] + cache.pv.trans
        f["cam"] = world @ self.camera.R.T + self.camera.t
        z = f["cam"][:, 2]
        f["q"] = np.stack([self.camera.fx * f["cam"][:, 0] / z + self.camera.cx,
                           self.camera.fy * f["cam"][:, 1] / z + self.camera.cy],
                          axis=-1)
        return f

    def residual(self, cache, f=None):
        f = f or self.forward(cache)
        return ((self.obs - f["q"]) * self.coord_scale).ravel()

    def jvp(self, cache, f, d):
        dworld = np.cross(np.broadcast_to(d["rot"], f["rm"].shape), f["rm"]) + d["trans"]
        dcam = dworld @ self.camera.R.T
        z = f["cam"][:, 2]
        dqx = self.camera.fx * (dcam[:, 0] / z - f["cam"][:, 0] * dcam[:, 2] / z ** 2)
        dqy = self.camera.fy * (dcam[:, 1] / z - f["cam"][:, 1] * dcam[:, 2] / z ** 2)
        return -self.coord_scale * np.stack([dqx, dqy], axis=-1).ravel()

    def vjp(self, cache, f, u, layout):
        g = np.zeros(layout.dim)
        s = layout.slices
        uq = -self.coord_scale * u.reshape(-1, 2)
        z = f["cam"][:, 2]
        ucam = np.zeros_like(f["cam"])
        ucam[:, 0] = self.camera.fx / z * uq[:, 0]
        ucam[:, 1] = self.camera.fy / z * uq[:, 1]
        ucam[:, 2] = (-self.camera.fx * f["cam"][:, 0] / z ** 2 * uq[:, 0]
                      - self.camera.fy * f["cam"][:, 1] / z ** 2 * uq[:, 1])
        uworld = ucam @ self.camera.R
        g[s["trans"]] += uworld.sum(axis=0)
        g[s["rot"]] += np.cross(f["rm"], uworld).sum(axis=0)
        return g


class RegBlock:
    """Statistical regularizer residuals alpha/sigma, beta/sigma, delta/sigma."""

    def __init__(self, basis, weight):
        self.inv_sigma = np.concatenate([1.0 / basis.sigma_id, 1.0 / basis.sigma_alb,
                                         1.0 / basis.sigma_exp])
        self.weight = weight
        self.robust_groups = 0

    @property
    def n_res(self):
        return len(self.inv_sigma)

    def base_weights(self):
        return np.full(self.n_res, self.weight)

    def forward(self, cache, with_grad=False):
        return {}

    def residual(self, cache, f=None):
        pv = cache.pv
        return np.concatenate([pv.alpha, pv.beta, pv.delta]) * self.inv_sigma

    def jvp(self, cache, f, d):
        return np.concatenate([d["alpha"], d["beta"], d["delta"]]) * self.inv_sigma

    def vjp(self, cache, f, u, layout):
        g = np.zeros(layout.dim)
        s = layout.slices
        v = u * self.inv_sigma
        d_id = s["alpha"].stop - s["alpha"].start
        d_alb = s["beta"].stop - s["beta"].start
        g[s["alpha"]] = v[:d_id]
        g[s["beta"]] = v[d_id:d_id + d_alb]
        g[s["delta"]] = v[d_id + d_alb:]
        return g


# ---------------------------------------------------------------------------
# system


class LinearizedSystem:
    """Frozen-footprint linearization: matrix-free J / J^T products at one X."""

    def __init__(self, system, pv):
        self.system = system
        self.pv = pv
        self.layout = system.layout
        self.cache = _PoseCache(system.basis, pv)
        self.fwd = [blk.forward(self.cache, with_grad=True) for blk in system.blocks]
        self.residual = np.concatenate(
            [blk.residual(self.cache, f) for blk, f in zip(system.blocks, self.fwd)])
        self.W = system.frozen_weights()

    def apply_J(self, v):
        d = self.layout.split(v)
        return np.concatenate(
            [blk.jvp(self.cache, f, d) for blk, f in zip(self.system.blocks, self.fwd)])

    def apply_Jt(self, u):
        g = np.zeros(self.layout.dim)
        off = 0
        for blk, f in zip(self.system.blocks, self.fwd):
            n = blk.n_res
            g += blk.vjp(self.cache, f, u[off:off + n], self.layout)
            off += n
        return g

    def gradient(self):
        """J^T W r at the linearization point."""
        return self.apply_Jt(self.W * self.residual)

    def normal_matvec(self, v):
        """J^T W J v, matrix-free."""
        return self.apply_Jt(self.W * self.apply_J(v))

    def precond_diag(self, free_idx):
        """Exact diag(J^T W J) over the free parameters via unit J-products."""
        diag = np.zeros(len(free_idx))
        e = np.zeros(self.layout.dim)
        for i, idx in enumerate(free_idx):
            e[idx] = 1.0
            col = self.apply_J(e)
            diag[i] = np.dot(self.W * col, col)
            e[idx] = 0.0
        return diag


class ResidualSystem:
    """Weighted residual blocks with IRLS reweighting of the robust terms."""

    def __init__(self, basis: FaceBasis, blocks, layout: ParamLayout,
                 eps_irls=1e-6):
        self.basis = basis
        self.blocks = blocks
        self.layout = layout
        self.eps_irls = eps_irls
        self.base_W = np.concatenate([blk.base_weights() for blk in blocks]) \
            if blocks else np.zeros(0)
        self.irls_W = np.ones_like(self.base_W)
        self.n_res = int(self.base_W.size)

    def residual(self, pv: ParamVector):
        cache = _PoseCache(self.basis, pv)
        return np.concatenate([blk.residual(cache) for blk in self.blocks])

    def update_irls(self, pv: ParamVector, residual=None):
        """Refresh the l2,1 pixel weights 1/max(||r_p||, eps) and freeze them."""
        r = self.residual(pv) if residual is None else residual
        w = np.ones_like(r)
        off = 0
        for blk in self.blocks:
            n = blk.n_res
            if blk.robust_groups:
                g = blk.robust_groups
                n_rob = g * blk.n_groups
                norms = np.linalg.norm(r[off:off + n_rob].reshape(-1, g), axis=1)
                w_pix = 1.0 / np.maximum(norms, self.eps_irls)
                w[off:off + n_rob] = np.repeat(w_pix, g)
            off += n
        self.irls_W = w
        return w

    def frozen_weights(self):
        return self.base_W * self.irls_W

    def weighted_energy(self, pv: ParamVector, residual=None):
        """Sum W r^2 with the currently frozen IRLS weights (the GN surrogate)."""
        r = self.residual(pv) if residual is None else residual
        return float(np.dot(self.frozen_weights() * r, r))

    def half_weighted_energy(self, pv: ParamVector):
        return 0.5 * self.weighted_energy(pv)

    def true_energy(self, pv: ParamVector, residual=None):
        """The robust energy: l2,1 for photometric blocks, squared for the rest."""
        r = self.residual(pv) if residual is None else residual
        total = 0.0
        off = 0
        for blk in self.blocks:
            n = blk.n_res
            u = r[off:off + n]
            bw = blk.base_weights()
            if blk.robust_groups:
                g = blk.robust_groups
                n_rob = g * blk.n_groups
                norms = np.linalg.norm(u[:n_rob].reshape(-1, g), axis=1)
                total += float(bw[0] * norms.sum()) if n_rob else 0.0
                total += float(np.dot(bw[n_rob:] * u[n_rob:], u[n_rob:]))
            else:
                total += float(np.dot(bw * u, u))
            off += n
        return total

    def energy_breakdown(self, pv: ParamVector):
        out = {}
        cache = _PoseCache(self.basis, pv)
        for blk in self.blocks:
            u = blk.residual(cache)
            bw = blk.base_weights()
            name = type(blk).__name__
            if blk.robust_groups:
                n_rob = 3 * blk.n_groups
                norms = np.linalg.norm(u[:n_rob].reshape(-1, 3), axis=1)
                val = float(bw[0] * norms.sum()) if n_rob else 0.0
            else:
                val = float(np.dot(bw * u, u))
            out[name] = out.get(name, 0.0) + val
        return out

    def linearize(self, pv: ParamVector) -> LinearizedSystem:
        return LinearizedSystem(self, pv)


# ---------------------------------------------------------------------------
# assembly


def _dense_footprint(render: RenderOutput, basis, observation, need_depth):
    pix, tri, bary = render.pix, render.tri, render.bary
    keep = np.ones(len(pix), dtype=bool)
    if observation.occluded:
        keep &= pixel_region_mask(render, basis.region_masks["lower-face"],
                                  basis.topology)
    if need_depth:
        d = observation.depth[pix[:, 1], pix[:, 0]]
        keep &= np.isfinite(d) & (d > 0)
    pix, tri, bary = pix[keep], tri[keep], bary[keep]
    return pix, basis.topology[tri], bary


def assemble_target(pv: ParamVector, observations, renders, basis: FaceBasis,
                    weights: EnergyWeights, box=1) -> ResidualSystem:
    """Stereo energy: dense photometric + landmarks per view + regularizer.

    box = 2^level applies the pyramid's band-limiting residual aggregation;
    landmark pixel coordinates are rescaled by 1/box accordingly.
    """
    if len(observations) != len(renders):
        raise ValueError("one render per observation required")
    blocks = []
    total_visible = 0
    for obs, render in zip(observations, renders):
        pix, vids, bary = _dense_footprint(render, basis, obs, need_depth=False)
        total_visible += len(pix)
        if len(pix):
            blocks.append(DenseViewBlock(basis, obs.camera, pix, vids, bary,
                                         image=obs.rgb, kinds=("photo",),
                                         w_photo=weights.w_ste, box=box))
        if len(obs.landmark_pix):
            blocks.append(LandmarkBlock(basis, obs.camera, obs.landmark_pix,
                                        obs.landmark_ids, obs.landmark_conf,
                                        weights.w_lan, coord_scale=1.0 / box))
    if total_visible == 0:
        raise TrackingLossError("no visible model pixels in any view")
    blocks.append(RegBlock(basis, weights.w_reg))
    return ResidualSystem(basis, blocks, ParamLayout.of(pv), weights.eps_irls)


def assemble_source(pv: ParamVector, observation, render, basis: FaceBasis,
                    weights: EnergyWeights, box=1) -> ResidualSystem:
    """RGB-D energy: photometric + point/plane geometry + markers + regularizer.

    Pixels without valid input depth are excluded from both the photometric
    and geometric terms so every dense block shares one footprint.
    """
    if observation.depth is None:
        raise ValueError("source energy requires a depth observation")
    pix, vids, bary = _dense_footprint(render, basis, observation, need_depth=True)
    if len(pix) == 0:
        raise TrackingLossError("no visible model pixels with valid depth")
    blocks = []
    d = observation.depth[pix[:, 1], pix[:, 0]]
    centers = pix.astype(np.float64) + 0.5
    depth_points = observation.camera.backproject(centers, d)
    input_normals = observation.normals[pix[:, 1], pix[:, 0]] \
        if observation.normals is not None else np.zeros((len(pix), 3))
    blocks.append(DenseViewBlock(
        basis, observation.camera, pix, vids, bary, image=observation.rgb,
        depth_points=depth_points, input_normals=input_normals,
        kinds=("photo", "point", "plane"), w_photo=weights.w_rgb,
        w_point=weights.w_geo * weights.w_point,
        w_plane=weights.w_geo * weights.w_plane, box=box))
    if observation.markers is not None and len(observation.markers.pixels):
        blocks.append(MarkerBlock(observation.camera, observation.markers,
                                  weights.w_sta, coord_scale=1.0 / box))
    blocks.append(RegBlock(basis, weights.w_reg))
    return ResidualSystem(basis, blocks, ParamLayout.of(pv), weights.eps_irls)


# ---------------------------------------------------------------------------
# marker plane fitting


@dataclass
class MarkerRegion:
    """Pixel support and detected corner coordinates of one fiducial marker."""

    corner_pix: np.ndarray   # (4, 2) continuous pixel coords
    region_pix: np.ndarray   # (K, 2) continuous pixel coords with valid depth


def fit_marker_planes(depth, camera: Camera, regions):
    """Total-least-squares plane per marker region; corners lifted onto it.

    Returns (4 * len(regions), 3) camera-space corner points.
    """
    corners = []
    for region in regions:
        rp = np.asarray(region.region_pix, dtype=np.float64).reshape(-1, 2)
        ix = rp.astype(int)
        d = np.asarray(depth)[ix[:, 1], ix[:, 0]]
        ok = np.isfinite(d) & (d > 0)
        if ok.sum() < 8:
            raise ValueError("need at least 8 valid depth pixels per marker region")
        pts = camera.backproject(rp[ok], d[ok])
        centroid = pts.mean(axis=0)
        cov = np.cov((pts - centroid).T)
        evals, evecs = np.linalg.eigh(cov)
        if evals[1] < 1e-12:
            raise ValueError("degenerate (rank < 2) marker point cloud")
        normal = evecs[:, 0]
        rays = camera.ray_dirs(np.asarray(region.corner_pix, dtype=np.float64))
        denom = rays @ normal
        if np.any(np.abs(denom) < 1e-12):
            raise ValueError("marker corner ray parallel to the fitted plane")
        scale = (centroid @ normal) / denom
        corners.append(rays * scale[:, None])
    return np.concatenate(corners, axis=0)
