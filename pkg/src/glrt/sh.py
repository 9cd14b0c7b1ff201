"""Real spherical harmonics up to degree 3.

The basis follows the standard real-valued convention (all-positive signs,
Condon-Shortley phase absorbed), evaluated on unit direction vectors. The
same jitted fill routines back both the public API and the render kernels,
so there is exactly one definition of the basis in the codebase.
"""

import numpy as np
from numba import njit

MAX_DEGREE = 3

# l=0 .. l=3 normalization constants
_C0 = 0.28209479177387814  # 0.5*sqrt(1/pi)
_C1 = 0.4886025119029199  # sqrt(3/(4*pi))
_C2 = (
    1.0925484305920792,  # 0.5*sqrt(15/pi)      xy, yz, xz
    0.31539156525252005,  # 0.25*sqrt(5/pi)     3z^2-1
    0.5462742152960396,  # 0.25*sqrt(15/pi)     x^2-y^2
)
_C3 = (
    0.5900435899266435,  # 0.25*sqrt(35/(2*pi)) y(3x^2-y^2), x(x^2-3y^2)
    2.890611442640554,  # 0.5*sqrt(105/pi)      xyz
    0.4570457994644658,  # 0.25*sqrt(21/(2*pi)) y(5z^2-1), x(5z^2-1)
    0.3731763325901154,  # 0.25*sqrt(7/pi)      z(5z^2-3)
    1.445305721320277,  # 0.25*sqrt(105/pi)     z(x^2-y^2)
)


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@njit(cache=True)
def sh_basis_fill(degree, x, y, z, out):
    """Write the (degree+1)^2 basis values for unit direction (x,y,z)."""
    out[0] = _C0
    if degree >= 1:
        out[1] = _C1 * y
        out[2] = _C1 * z
        out[3] = _C1 * x
    if degree >= 2:
        out[4] = _C2[0] * x * y
        out[5] = _C2[0] * y * z
        out[6] = _C2[1] * (3.0 * z * z - 1.0)
        out[7] = _C2[0] * x * z
        out[8] = _C2[2] * (x * x - y * y)
    if degree >= 3:
        xx = x * x
        yy = y * y
        zz = z * z
        out[9] = _C3[0] * y * (3.0 * xx - yy)
        out[10] = _C3[1] * x * y * z
        out[11] = _C3[2] * y * (5.0 * zz - 1.0)
        out[12] = _C3[3] * z * (5.0 * zz - 3.0)
        out[13] = _C3[2] * x * (5.0 * zz - 1.0)
        out[14] = _C3[4] * z * (xx - yy)
        out[15] = _C3[0] * x * (xx - 3.0 * yy)


@njit(cache=True)
def sh_basis_grad_fill(degree, x, y, z, out):
    """Write d(basis)/d(x,y,z) into out[(degree+1)^2, 3].

    Derivatives are of the polynomial forms above; callers restricting the
    direction to the unit sphere must project out the radial component.
    """
    out[0, 0] = 0.0
    out[0, 1] = 0.0
    out[0, 2] = 0.0
    if degree >= 1:
        out[1, 0] = 0.0
        out[1, 1] = _C1
        out[1, 2] = 0.0
        out[2, 0] = 0.0
        out[2, 1] = 0.0
        out[2, 2] = _C1
        out[3, 0] = _C1
        out[3, 1] = 0.0
        out[3, 2] = 0.0
    if degree >= 2:
        out[4, 0] = _C2[0] * y
        out[4, 1] = _C2[0] * x
        out[4, 2] = 0.0
        out[5, 0] = 0.0
        out[5, 1] = _C2[0] * z
        out[5, 2] = _C2[0] * y
        out[6, 0] = 0.0
        out[6, 1] = 0.0
        out[6, 2] = _C2[1] * 6.0 * z
        out[7, 0] = _C2[0] * z
        out[7, 1] = 0.0
        out[7, 2] = _C2[0] * x
        out[8, 0] = _C2[2] * 2.0 * x
        out[8, 1] = -_C2[2] * 2.0 * y
        out[8, 2] = 0.0
    if degree >= 3:
        xx = x * x
        yy = y * y
        zz = z * z
        out[9, 0] = _C3[0] * 6.0 * x * y
        out[9, 1] = _C3[0] * 3.0 * (xx - yy)
        out[9, 2] = 0.0
        out[10, 0] = _C3[1] * y * z
        out[10, 1] = _C3[1] * x * z
        out[10, 2] = _C3[1] * x * y
        out[11, 0] = 0.0
        out[11, 1] = _C3[2] * (5.0 * zz - 1.0)
        out[11, 2] = _C3[2] * 10.0 * y * z
        out[12, 0] = 0.0
        out[12, 1] = 0.0
        out[12, 2] = _C3[3] * (15.0 * zz - 3.0)
        out[13, 0] = _C3[2] * (5.0 * zz - 1.0)
        out[13, 1] = 0.0
        out[13, 2] = _C3[2] * 10.0 * x * z
        out[14, 0] = _C3[4] * 2.0 * x * z
        out[14, 1] = -_C3[4] * 2.0 * y * z
        out[14, 2] = _C3[4] * (xx - yy)
        out[15, 0] = _C3[0] * 3.0 * (xx - yy)
        out[15, 1] = -_C3[0] * 6.0 * x * y
        out[15, 2] = 0.0


def _check_dir(direction):
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != (3,):
        raise ValueError(f"direction must be a 3-vector, got shape {d.shape}")
    norm = np.linalg.norm(d)
    if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit length, |d| = {norm}")
    return d


def sh_basis(direction, degree: int) -> np.ndarray:
    """Real SH basis values for a unit direction, lowest band first."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}], got {degree}")
    d = _check_dir(direction)
    out = np.empty(n_coeffs(degree), dtype=np.float64)
    sh_basis_fill(degree, d[0], d[1], d[2], out)
    return out


def sh_basis_grad(direction, degree: int) -> np.ndarray:
    """d(basis)/d(direction components), shape ((degree+1)^2, 3)."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}], got {degree}")
    d = _check_dir(direction)
    out = np.empty((n_coeffs(degree), 3), dtype=np.float64)
    sh_basis_grad_fill(degree, d[0], d[1], d[2], out)
    return out


def eval_sh(coeffs, direction, degree: int | None = None):
    """Evaluate SH coefficient sets at a unit direction.

    ``coeffs`` has shape (..., K) with K = (degree+1)^2; the trailing axis
    is contracted against the basis, so multi-channel coefficient arrays
    evaluate in one call.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if degree is None:
        k = coeffs.shape[-1]
        degree = int(np.sqrt(k)) - 1
        if n_coeffs(degree) != k:
            raise ValueError(f"trailing axis {k} is not a square coefficient count")
    elif coeffs.shape[-1] != n_coeffs(degree):
        raise ValueError(
            f"expected {n_coeffs(degree)} coefficients for degree {degree}, "
            f"got {coeffs.shape[-1]}"
        )
    basis = sh_basis(direction, degree)
    return coeffs @ basis
