"""Parametric face model: stacked parameter vector, linear bases, pinhole camera.

The model follows the usual morphable-model split: geometry is a linear
function of identity and expression coefficients, per-vertex albedo a linear
function of reflectance coefficients, and illumination a 3x9 set of SH
coefficients.  A procedurally generated basis over a head-like ellipsoid
stands in for proprietary scan data.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation
import scipy.sparse as sparse

from .sh import sh_shade  # noqa: F401  (re-exported convenience)

REGION_NAMES = ("upper-face", "lower-face", "eye-left", "eye-right", "mouth")
N_LANDMARKS = 66
MOUTH_LANDMARKS = np.arange(48, 66)  # 12 outer + 6 inner mouth contour points

_BASIS_MAGIC = b"FSBA"
_BASIS_VERSION = 1


# ---------------------------------------------------------------------------
# parameter vector


@dataclass
class ParamVector:
    """Stacked unknowns (T, alpha, beta, delta, gamma).

    rot is an axis-angle rotation (3,), trans a translation in meters (3,).
    gamma holds 27 SH illumination coefficients (3 channels x 9 bands).
    """

    rot: np.ndarray
    trans: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("rot", "trans", "alpha", "beta", "delta", "gamma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel().copy())
        if self.rot.size != 3 or self.trans.size != 3:
            raise ValueError("rigid pose must have 3 rotation and 3 translation entries")
        if self.gamma.size != 27:
            raise ValueError("gamma must have 27 entries (3 channels x 9 bands)")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in
                   ("rot", "trans", "alpha", "beta", "delta", "gamma")):
            raise ValueError("parameter vector entries must be finite")

    @classmethod
    def zeros(cls, d_id, d_alb, d_exp):
        return cls(np.zeros(3), np.zeros(3), np.zeros(d_id), np.zeros(d_alb),
                   np.zeros(d_exp), np.zeros(27))

    @property
    def dims(self):
        return self.alpha.size, self.beta.size, self.delta.size

    @property
    def dim(self):
        return 6 + self.alpha.size + self.beta.size + self.delta.size + 27

    def rotation(self) -> np.ndarray:
        return Rotation.from_rotvec(self.rot).as_matrix()

    def copy(self) -> "ParamVector":
        return ParamVector(self.rot, self.trans, self.alpha, self.beta, self.delta, self.gamma)

    def transform(self, points) -> np.ndarray:
        """Apply the rigid pose T to model-space points (N, 3)."""
        return points @ self.rotation().T + self.trans

    def to_json(self) -> str:
        return json.dumps({
            "rotation": self.rot.tolist(),
            "translation": self.trans.tolist(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "delta": self.delta.tolist(),
            "gamma": self.gamma.tolist(),
        }, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "ParamVector":
        d = json.loads(text)
        return cls(d["rotation"], d["translation"], d["alpha"], d["beta"],
                   d["delta"], d["gamma"])


class ParamLayout:
    """Offsets of the solver increment vector [rot, trans, alpha, beta, delta, gamma]."""

    def __init__(self, d_id, d_alb, d_exp):
        self.d_id, self.d_alb, self.d_exp = d_id, d_alb, d_exp
        o = 0
        self.slices = {}
        for name, n in (("rot", 3), ("trans", 3), ("alpha", d_id), ("beta", d_alb),
                        ("delta", d_exp), ("gamma", 27)):
            self.slices[name] = slice(o, o + n)
            o += n
        self.dim = o

    @classmethod
    def of(cls, pv: ParamVector) -> "ParamLayout":
        return cls(*pv.dims)

    def split(self, vec):
        vec = np.asarray(vec)
        return {name: vec[..., sl] for name, sl in self.slices.items()}

    def indices(self, names) -> np.ndarray:
        idx = [np.arange(self.slices[n].start, self.slices[n].stop) for n in names]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def free_indices(self, frozen=()) -> np.ndarray:
        names = [n for n in ("rot", "trans", "alpha", "beta", "delta", "gamma")
                 if n not in frozen]
        return self.indices(names)

    def boxplus(self, pv: ParamVector, dx) -> ParamVector:
        """Apply an increment; the rotation update composes multiplicatively."""
        p = self.split(np.asarray(dx, dtype=np.float64))
        rot = (Rotation.from_rotvec(p["rot"]) * Rotation.from_rotvec(pv.rot)).as_rotvec()
        return ParamVector(rot, pv.trans + p["trans"], pv.alpha + p["alpha"],
                           pv.beta + p["beta"], pv.delta + p["delta"],
                           pv.gamma + p["gamma"])


# ---------------------------------------------------------------------------
# camera


@dataclass
class Camera:
    """Pinhole camera: x_cam = R @ x_world + t, full perspective projection.

    Continuous pixel coordinates: pixel (i, j) covers [i, i+1) x [j, j+1)
    with its sample point (center) at (i + 0.5, j + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).ravel()
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-8):
            raise ValueError("extrinsic rotation is not orthonormal")

    def world_to_cam(self, points):
        return np.atleast_2d(points) @ self.R.T + self.t

    def project_cam(self, points_cam):
        """Project camera-space points (N, 3) with z > 0 to pixel coords (N, 2)."""
        p = np.atleast_2d(points_cam)
        z = p[:, 2]
        if np.any(z <= 0):
            raise ValueError("point behind camera (z <= 0)")
        return np.stack([self.fx * p[:, 0] / z + self.cx,
                         self.fy * p[:, 1] / z + self.cy], axis=-1)

    def backproject(self, pix, depth):
        """Lift pixel coords (N, 2) at depth (N,) to camera-space points (N, 3)."""
        pix = np.atleast_2d(pix).astype(np.float64)
        depth = np.atleast_1d(depth).astype(np.float64)
        if np.any(depth <= 0):
            raise ValueError("depth must be positive")
        x = (pix[:, 0] - self.cx) * depth / self.fx
        y = (pix[:, 1] - self.cy) * depth / self.fy
        return np.stack([x, y, depth], axis=-1)

    def ray_dirs(self, pix):
        """Unnormalized rays K^-1 (u, v, 1) for pixel coords (N, 2)."""
        pix = np.atleast_2d(pix).astype(np.float64)
        return np.stack([(pix[:, 0] - self.cx) / self.fx,
                         (pix[:, 1] - self.cy) / self.fy,
                         np.ones(len(pix))], axis=-1)

    def scaled(self, factor: float) -> "Camera":
        """Camera for a box-downsampled image (factor 0.5 per pyramid level)."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor,
                      self.cy * factor, int(self.width * factor),
                      int(self.height * factor), self.R, self.t)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.asarray(d["R"]), np.asarray(d["t"]))


def project(camera: Camera, point):
    """Project a camera-space point; z <= 0 raises."""
    return camera.project_cam(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]


def backproject(camera: Camera, pixel, depth):
    """Inverse of project along the pixel ray; non-positive depth raises."""
    return camera.backproject(np.asarray(pixel, dtype=np.float64).reshape(1, 2),
                              np.asarray([depth], dtype=np.float64))[0]


# ---------------------------------------------------------------------------
# face basis


@dataclass
class FaceBasis:
    mean_geometry: np.ndarray  # (V, 3) meters
    mean_albedo: np.ndarray    # (V, 3) linear RGB
    id_basis: np.ndarray       # (3V, D_id)
    alb_basis: np.ndarray      # (3V, D_alb)
    exp_basis: np.ndarray      # (3V, D_exp)
    sigma_id: np.ndarray
    sigma_alb: np.ndarray
    sigma_exp: np.ndarray
    topology: np.ndarray       # (F, 3) int32
    landmark_vertex_ids: np.ndarray  # (66,)
    region_masks: dict

    def __post_init__(self):
        self._validate()
        # face -> vertex incidence for area-weighted normal accumulation
        F = len(self.topology)
        rows = self.topology.ravel()
        cols = np.repeat(np.arange(F), 3)
        self.vertex_face = sparse.csr_matrix(
            (np.ones(3 * F), (rows, cols)), shape=(self.n_vertices, F))

    def _validate(self):
        V = self.mean_geometry.shape[0]
        if self.mean_geometry.shape != (V, 3) or self.mean_albedo.shape != (V, 3):
            raise ValueError("mean geometry/albedo must be (V, 3)")
        for name in ("id_basis", "alb_basis", "exp_basis"):
            b = getattr(self, name)
            if b.shape[0] != 3 * V:
                raise ValueError(f"{name} must have 3V rows")
        if (self.id_basis.shape[1] != self.sigma_id.size
                or self.alb_basis.shape[1] != self.sigma_alb.size
                or self.exp_basis.shape[1] != self.sigma_exp.size):
            raise ValueError("basis column counts must match sigma lengths")
        if np.any(self.sigma_id <= 0) or np.any(self.sigma_alb <= 0) or np.any(self.sigma_exp <= 0):
            raise ValueError("sigmas must be strictly positive")
        if self.topology.min() < 0 or self.topology.max() >= V:
            raise ValueError("topology indexes invalid vertices")
        if self.landmark_vertex_ids.size != N_LANDMARKS:
            raise ValueError("expected 66 landmark vertex ids")
        if self.landmark_vertex_ids.min() < 0 or self.landmark_vertex_ids.max() >= V:
            raise ValueError("landmark ids out of range")

    @property
    def n_vertices(self):
        return self.mean_geometry.shape[0]

    @property
    def dims(self):
        return self.id_basis.shape[1], self.alb_basis.shape[1], self.exp_basis.shape[1]

    def zero_params(self) -> ParamVector:
        return ParamVector.zeros(*self.dims)

    def digest(self) -> str:
        return hashlib.sha256(save_basis_bytes(self)).hexdigest()


def compute_vertex_normals(positions, topology, vertex_face=None, return_raw=False):
    """Area-weighted vertex normals, normalized.  positions (V,3) -> (V,3)."""
    tri = positions[topology]  # (F, 3, 3)
    face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if vertex_face is not None:
        raw = vertex_face @ face_n
    else:
        raw = np.zeros_like(positions)
        for k in range(3):
            np.add.at(raw, topology[:, k], face_n)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / np.where(norms > 0, norms, 1.0)
    if return_raw:
        return unit, raw, face_n
    return unit


@dataclass
class MeshGeometry:
    """Posed mesh: world positions/normals plus model-frame shading normals."""

    positions: np.ndarray      # (V, 3) world
    normals: np.ndarray        # (V, 3) world, unit
    colors: np.ndarray         # (V, 3) linear-RGB albedo
    model_normals: np.ndarray  # (V, 3) model frame, unit (used for SH shading)
    topology: np.ndarray


def eval_geometry(basis: FaceBasis, alpha, delta, params: ParamVector | None = None,
                  albedo=None) -> MeshGeometry:
    """Pose the linear geometry model: T . (mean + B_id a + B_exp d)."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    delta = np.asarray(delta, dtype=np.float64).ravel()
    d_id, _, d_exp = basis.dims
    if alpha.size != d_id or delta.size != d_exp:
        raise ValueError("coefficient lengths do not match basis dimensions")
    V = basis.n_vertices
    model_pos = (basis.mean_geometry.ravel()
                 + basis.id_basis @ alpha + basis.exp_basis @ delta).reshape(V, 3)
    model_normals = compute_vertex_normals(model_pos, basis.topology, basis.vertex_face)
    if params is None:
        positions, normals = model_pos, model_normals
    else:
        R = params.rotation()
        positions = model_pos @ R.T + params.trans
        normals = model_normals @ R.T
    colors = basis.mean_albedo if albedo is None else albedo
    return MeshGeometry(positions, normals, np.asarray(colors, dtype=np.float64),
                        model_normals, basis.topology)


def eval_model_positions(basis: FaceBasis, alpha, delta) -> np.ndarray:
    """Model-space vertex positions only (no pose, no normals)."""
    V = basis.n_vertices
    return (basis.mean_geometry.ravel() + basis.id_basis @ np.asarray(alpha).ravel()
            + basis.exp_basis @ np.asarray(delta).ravel()).reshape(V, 3)


def eval_albedo(basis: FaceBasis, beta) -> np.ndarray:
    """Per-vertex linear-RGB albedo, unclamped (clamping happens at render time)."""
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if beta.size != basis.dims[1]:
        raise ValueError("beta length does not match the albedo basis")
    V = basis.n_vertices
    return (basis.mean_albedo.ravel() + basis.alb_basis @ beta).reshape(V, 3)


def eval_mesh(basis: FaceBasis, params: ParamVector) -> MeshGeometry:
    """Full forward model: posed geometry plus beta-dependent albedo."""
    return eval_geometry(basis, params.alpha, params.delta, params,
                         albedo=eval_albedo(basis, params.beta))


# ---------------------------------------------------------------------------
# synthetic basis generation

_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))
_HEAD_RADII = np.array([0.078, 0.105, 0.092])  # x half-width, y half-height, z half-depth


def _fibonacci_sphere(n):
    i = np.arange(n)
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = _GOLDEN * i
    return np.stack([np.cos(phi) * r, y, np.sin(phi) * r], axis=-1)


def _face_angles(dirs):
    """(azimuth, elevation) with 0 azimuth at the face front (-z)."""
    phi = np.arctan2(dirs[:, 0], -dirs[:, 2])
    theta = np.arcsin(np.clip(dirs[:, 1], -1.0, 1.0))
    return phi, theta


def _smooth_field(dirs, rng, n_lobes=6, kappa_range=(1.5, 6.0)):
    """Low-frequency random scalar field on the sphere via von-Mises lobes."""
    u = rng.normal(size=(n_lobes, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    kappa = rng.uniform(*kappa_range, size=n_lobes)
    amp = rng.normal(size=n_lobes)
    d = dirs @ u.T  # (V, n_lobes)
    return (np.exp(kappa * (d - 1.0)) * amp).sum(axis=1)


def _smooth_basis(dirs, rng, n_cols, rms, vertex_weight=None):
    """Orthogonalized smooth displacement columns, supported on the visible front.

    Restricting support to the front keeps every basis direction observable
    from the camera rig (no hidden back-of-head modes).
    """
    V = len(dirs)
    phi, _ = _face_angles(dirs)
    front = 1.0 / (1.0 + np.exp((np.abs(phi) - 1.15) / 0.12))
    cols = np.empty((3 * V, n_cols))
    for j in range(n_cols):
        disp = np.stack([_smooth_field(dirs, rng) for _ in range(3)], axis=-1)
        disp = disp * front[:, None]
        if vertex_weight is not None:
            disp = disp * vertex_weight[:, None]
        cols[:, j] = disp.ravel()
    q, _ = np.linalg.qr(cols)
    # deterministic sign: make the largest-magnitude entry of each column positive
    peak = q[np.abs(q).argmax(axis=0), np.arange(n_cols)]
    q *= np.where(peak < 0, -1.0, 1.0)
    return q * (np.sqrt(V) * rms)


def _ellipse_mask(phi, theta, center, radii):
    return (((phi - center[0]) / radii[0]) ** 2
            + ((theta - center[1]) / radii[1]) ** 2) <= 1.0


def _landmark_directions():
    """66 canonical landmark directions in (azimuth, elevation)."""
    pts = []
    # 17 jawline points, chin at the bottom center
    for p in np.linspace(-0.95, 0.95, 17):
        pts.append((p, -0.30 - 0.42 * np.cos(p * 1.65)))
    # 5 + 5 brows
    for p in np.linspace(-0.52, -0.12, 5):
        pts.append((p, 0.42))
    for p in np.linspace(0.12, 0.52, 5):
        pts.append((p, 0.42))
    # 9 nose: 4 bridge + 5 base
    for t in np.linspace(0.28, 0.02, 4):
        pts.append((0.0, t))
    for p in np.linspace(-0.10, 0.10, 5):
        pts.append((p, -0.06))
    # 6 + 6 eye contours
    for cx in (-0.30, 0.30):
        for a in np.deg2rad([180, 120, 60, 0, -60, -120]):
            pts.append((cx + 0.11 * np.cos(a), 0.26 + 0.055 * np.sin(a)))
    # 18 mouth: 12 outer + 6 inner
    for a in np.linspace(np.pi, 3 * np.pi, 13)[:-1]:
        pts.append((0.24 * np.cos(a), -0.42 + 0.10 * np.sin(a)))
    for a in np.linspace(np.pi, 3 * np.pi, 7)[:-1]:
        pts.append((0.15 * np.cos(a), -0.42 + 0.045 * np.sin(a)))
    assert len(pts) == N_LANDMARKS
    return np.asarray(pts)


def _angles_to_dir(phi, theta):
    y = np.sin(theta)
    r = np.cos(theta)
    return np.stack([r * np.sin(phi), y, -r * np.cos(phi)], axis=-1)


def synth_basis(seed: int, dims=(16, 16, 12), n_vertices: int = 2562) -> FaceBasis:
    """Procedural head-like basis: deterministic in seed.

    The mesh is a convex-hull-triangulated Fibonacci ellipsoid with the face
    front on the -z side; basis columns are orthogonalized smooth random
    displacement fields with decreasing standard deviations.
    """
    d_id, d_alb, d_exp = dims
    if min(dims) < 1:
        raise ValueError("basis dimensions must be >= 1")
    if n_vertices < 4:
        raise ValueError("need at least 4 vertices")
    rng = np.random.default_rng(seed)
    dirs = _fibonacci_sphere(n_vertices)
    hull = ConvexHull(dirs)
    topology = hull.simplices.astype(np.int32)
    # orient all faces outward
    tri = dirs[topology]
    out = np.einsum("fi,fi->f", np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]),
                    tri.mean(axis=1))
    flip = out < 0
    topology[flip] = topology[flip][:, [0, 2, 1]]

    phi, theta = _face_angles(dirs)
    masks = {
        "upper-face": theta >= -0.04,
        "lower-face": theta < -0.04,
        "eye-left": _ellipse_mask(phi, theta, (-0.30, 0.26), (0.14, 0.09)),
        "eye-right": _ellipse_mask(phi, theta, (0.30, 0.26), (0.14, 0.09)),
        "mouth": _ellipse_mask(phi, theta, (0.0, -0.42), (0.30, 0.14)),
    }
    if any(masks[k].sum() < 3 for k in ("eye-left", "eye-right", "mouth")):
        raise ValueError("vertex count too small to host the face region masks")

    mean_geometry = dirs * _HEAD_RADII
    # gentle asymmetry so the head is not a perfect ellipsoid: flatten the back,
    # push the chin forward
    mean_geometry[:, 2] += 0.012 * np.exp(-((theta + 0.65) / 0.3) ** 2) * np.cos(np.minimum(np.abs(phi), np.pi / 2))
    mean_geometry[:, 2] *= 1.0 - 0.08 * (dirs[:, 2] > 0.3)

    # mean albedo: skin base + smooth tint + mid-frequency detail so dense
    # photometric alignment has gradients to lock onto; all features use
    # smooth falloffs (hard edges would break the image-gradient
    # linearization the solver relies on)
    base = np.array([0.72, 0.55, 0.45])
    tint = 0.06 * np.stack([_smooth_field(dirs, rng) for _ in range(3)], axis=-1)
    detail = 0.05 * np.stack(
        [_smooth_field(dirs, rng, n_lobes=40, kappa_range=(20.0, 60.0))
         for _ in range(3)], axis=-1)
    mean_albedo = np.clip(base + tint + detail, 0.05, 0.95)

    def soft_ellipse(center, radii):
        d2 = (((phi - center[0]) / radii[0]) ** 2
              + ((theta - center[1]) / radii[1]) ** 2)
        return np.exp(-1.2 * d2)

    lips = soft_ellipse((0.0, -0.44), (0.22, 0.08))
    mean_albedo += 0.5 * lips[:, None] * (np.array([0.55, 0.22, 0.22]) - mean_albedo)
    for side in (-0.32, 0.32):
        brow = soft_ellipse((side, 0.42), (0.22, 0.06))
        mean_albedo += 0.55 * brow[:, None] * (np.array([0.25, 0.18, 0.13]) - mean_albedo)
    for side in (-0.30, 0.30):
        eye = soft_ellipse((side, 0.26), (0.15, 0.10))
        mean_albedo += 0.6 * eye[:, None] * (np.array([0.82, 0.80, 0.78]) - mean_albedo)
    mean_albedo = np.clip(mean_albedo, 0.05, 0.95)

    id_basis = _smooth_basis(dirs, rng, d_id, rms=0.006)
    alb_basis = _smooth_basis(dirs, rng, d_alb, rms=0.08)
    # expressions concentrate on the lower face with some brow motion
    exp_weight = 0.2 + 0.8 / (1.0 + np.exp(theta / 0.12))
    exp_weight += 0.5 * np.exp(-((theta - 0.42) / 0.1) ** 2)
    exp_basis = _smooth_basis(dirs, rng, d_exp, rms=0.008, vertex_weight=exp_weight)

    sigma_id = 1.5 * 0.96 ** np.arange(d_id)
    sigma_alb = 1.5 * 0.96 ** np.arange(d_alb)
    sigma_exp = np.ones(d_exp)

    lm_dirs = _angles_to_dir(*_landmark_directions().T)
    front = np.where(np.abs(phi) < 1.35)[0]
    scores = lm_dirs @ dirs[front].T  # (66, n_front)
    landmark_ids = np.empty(N_LANDMARKS, dtype=np.int32)
    taken = set()
    for i in range(N_LANDMARKS):
        order = np.argsort(-scores[i])
        for j in order:
            vid = int(front[j])
            if vid not in taken:
                taken.add(vid)
                landmark_ids[i] = vid
                break
        else:
            raise ValueError("vertex count too small for 66 distinct landmarks")

    return FaceBasis(mean_geometry, mean_albedo, id_basis, alb_basis, exp_basis,
                     sigma_id, sigma_alb, sigma_exp, topology, landmark_ids, masks)


# ---------------------------------------------------------------------------
# binary container (documented layout, little-endian)
#
#   magic   4 bytes  b"FSBA"
#   version u32
#   header  u32 x 6: V, D_id, D_alb, D_exp, F, n_regions
#   f32 arrays, C order: mean_geometry (V*3), mean_albedo (V*3),
#       id_basis (3V*D_id), alb_basis (3V*D_alb), exp_basis (3V*D_exp),
#       sigma_id, sigma_alb, sigma_exp
#   i32 arrays: topology (F*3), landmark_vertex_ids (66)
#   regions, repeated: u16 name length, utf-8 name, u8 mask (V)


def save_basis_bytes(basis: FaceBasis) -> bytes:
    buf = io.BytesIO()
    V = basis.n_vertices
    d_id, d_alb, d_exp = basis.dims
    buf.write(_BASIS_MAGIC)
    buf.write(struct.pack("<7I", _BASIS_VERSION, V, d_id, d_alb, d_exp,
                          len(basis.topology), len(basis.region_masks)))
    for arr in (basis.mean_geometry, basis.mean_albedo, basis.id_basis,
                basis.alb_basis, basis.exp_basis, basis.sigma_id,
                basis.sigma_alb, basis.sigma_exp):
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(basis.topology, dtype="<i4").tobytes())
    buf.write(np.ascontiguousarray(basis.landmark_vertex_ids, dtype="<i4").tobytes())
    for name, mask in basis.region_masks.items():
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return buf.getvalue()


def save_basis(basis: FaceBasis, path):
    with open(path, "wb") as f:
        f.write(save_basis_bytes(basis))


def load_basis(path) -> FaceBasis:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _BASIS_MAGIC:
        raise ValueError("not a face basis container")
    version, V, d_id, d_alb, d_exp, F, n_regions = struct.unpack_from("<7I", data, 4)
    if version != _BASIS_VERSION:
        raise ValueError(f"unsupported basis container version {version}")
    off = 4 + 28

    def take_f4(n, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        return arr.reshape(shape)

    mean_geometry = take_f4(V * 3, (V, 3))
    mean_albedo = take_f4(V * 3, (V, 3))
    id_basis = take_f4(3 * V * d_id, (3 * V, d_id))
    alb_basis = take_f4(3 * V * d_alb, (3 * V, d_alb))
    exp_basis = take_f4(3 * V * d_exp, (3 * V, d_exp))
    sigma_id = take_f4(d_id, (d_id,))
    sigma_alb = take_f4(d_alb, (d_alb,))
    sigma_exp = take_f4(d_exp, (d_exp,))
    topology = np.frombuffer(data, dtype="<i4", count=F * 3, offset=off).reshape(F, 3).copy()
    off += 4 * F * 3
    landmark_ids = np.frombuffer(data, dtype="<i4", count=N_LANDMARKS, offset=off).copy()
    off += 4 * N_LANDMARKS
    masks = {}
    for _ in range(n_regions):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        masks[name] = np.frombuffer(data, dtype=np.uint8, count=V, offset=off).astype(bool)
        off += V
    return FaceBasis(mean_geometry, mean_albedo, id_basis, alb_basis, exp_basis,
                     sigma_id, sigma_alb, sigma_exp, topology, landmark_ids, masks)
