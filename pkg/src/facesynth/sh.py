"""Real spherical harmonics up to band 2 (9 coefficients per channel).

Convention: real SH without Condon-Shortley phase, Ramamoorthi-style
constants.  Normals are expected in the face model's local frame so that
shading is view independent and invariant under joint rigid motions of
pose and camera.
"""

import numpy as np

# band 0..2 normalization constants
_C0 = 0.2820947917738781  # 1/2 sqrt(1/pi)
_C1 = 0.4886025119029199  # sqrt(3/(4 pi))
_C2 = 1.0925484305920792  # 1/2 sqrt(15/pi)
_C3 = 0.31539156525252005  # 1/4 sqrt(5/pi)
_C4 = 0.5462742152960396  # 1/4 sqrt(15/pi)

N_SH = 9


def sh_basis(normals):
    """Evaluate the 9 SH basis functions at unit normals (..., 3) -> (..., 9)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    out = np.empty(n.shape[:-1] + (N_SH,), dtype=np.float64)
    out[..., 0] = _C0
    out[..., 1] = _C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = _C1 * x
    out[..., 4] = _C2 * x * y
    out[..., 5] = _C2 * y * z
    out[..., 6] = _C3 * (3.0 * z * z - 1.0)
    out[..., 7] = _C2 * x * z
    out[..., 8] = _C4 * (x * x - y * y)
    return out


def sh_basis_grad(normals):
    """Jacobian of sh_basis w.r.t. the normal: (..., 3) -> (..., 9, 3)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    g = np.empty(n.shape[:-1] + (N_SH, 3), dtype=np.float64)
    g[..., 0, :] = 0.0
    g[..., 1, 0], g[..., 1, 1], g[..., 1, 2] = zero, np.full_like(x, _C1), zero
    g[..., 2, 0], g[..., 2, 1], g[..., 2, 2] = zero, zero, np.full_like(x, _C1)
    g[..., 3, 0], g[..., 3, 1], g[..., 3, 2] = np.full_like(x, _C1), zero, zero
    g[..., 4, 0], g[..., 4, 1], g[..., 4, 2] = _C2 * y, _C2 * x, zero
    g[..., 5, 0], g[..., 5, 1], g[..., 5, 2] = zero, _C2 * z, _C2 * y
    g[..., 6, 0], g[..., 6, 1], g[..., 6, 2] = zero, zero, 6.0 * _C3 * z
    g[..., 7, 0], g[..., 7, 1], g[..., 7, 2] = _C2 * z, zero, _C2 * x
    g[..., 8, 0], g[..., 8, 1], g[..., 8, 2] = 2.0 * _C4 * x, -2.0 * _C4 * y, zero
    return g


def sh_shade(albedo, normals, gamma, tol=1e-6):
    """Shade linear-RGB albedo with SH illumination.

    albedo: (..., 3), normals: (..., 3) unit vectors, gamma: 27 entries
    laid out as 3 channels x 9 band coefficients.  Returns (..., 3).
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    norms = np.linalg.norm(normals, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        raise ValueError("sh_shade requires unit normals within tolerance")
    gam = np.asarray(gamma, dtype=np.float64).reshape(3, N_SH)
    irradiance = sh_basis(normals) @ gam.T  # (..., 3)
    return albedo * irradiance
