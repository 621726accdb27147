"""Real symmetric spherical harmonics (even degrees), fitting and ACC.

Coefficient j of degree l and order m sits at j = l(l+1)/2 + m. The basis is
orthonormal on the unit sphere:

    m < 0:  sqrt(2) * N_l^|m| * P_l^|m|(cos theta) * sin(|m| phi)
    m = 0:  N_l^0 * P_l^0(cos theta)
    m > 0:  sqrt(2) * N_l^m * P_l^m(cos theta) * cos(m phi)

with N_l^m = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!) and P_l^m from
`scipy.special.lpmv` (Condon-Shortley phase included).
"""
import math
from functools import lru_cache

import numpy as np
from scipy.special import lpmv

from utils.errors import NumericalError

LMAX = 8
UNIT_TOL = 1e-9
ACC_EPS = 1e-12


def n_coeffs(lmax=LMAX) -> int:
    """Number of even-degree coefficients up to lmax (45 for lmax=8)."""
    _check_lmax(lmax)
    return (lmax + 1) * (lmax + 2) // 2


def lmax_for(n) -> int:
    """Inverse of `n_coeffs`."""
    lmax = int(round((math.sqrt(1 + 8 * n) - 3) / 2))
    if n_coeffs(lmax) != n:
        raise ValueError(f"{n} is not an even-degree SH coefficient count")
    return lmax


def _check_lmax(lmax):
    if lmax < 0 or lmax % 2:
        raise ValueError(f"lmax must be a non-negative even integer, got {lmax}")


def sh_flat_index(l, m, lmax=LMAX) -> int:
    if l < 0 or l % 2 or l > lmax:
        raise ValueError(f"degree l must be even and in [0, {lmax}], got {l}")
    if abs(m) > l:
        raise ValueError(f"order m must satisfy |m| <= l, got l={l}, m={m}")
    return l * (l + 1) // 2 + m


def sh_degree_order(j, lmax=LMAX):
    """(l, m) for flat index j."""
    if not 0 <= j < n_coeffs(lmax):
        raise ValueError(f"flat index {j} out of range for lmax={lmax}")
    for l in range(0, lmax + 1, 2):
        start = l * (l - 1) // 2
        if j < start + 2 * l + 1:
            return l, j - l * (l + 1) // 2
    raise AssertionError("unreachable")


@lru_cache(maxsize=None)
def sh_degrees(lmax=LMAX) -> np.ndarray:
    """Degree l of every flat index (read-only, cached)."""
    degrees = np.zeros(n_coeffs(lmax), dtype=np.int64)
    for l in range(0, lmax + 1, 2):
        degrees[l * (l - 1) // 2:(l + 1) * (l + 2) // 2] = l
    degrees.setflags(write=False)
    return degrees


def as_directions(dirs) -> np.ndarray:
    """Validate an (N, 3) array of unit vectors."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if dirs.ndim != 2 or dirs.shape[1] != 3 or dirs.shape[0] < 1:
        raise ValueError(f"directions must have shape (N, 3) with N >= 1, got {dirs.shape}")
    norms = np.linalg.norm(dirs, axis=1)
    bad = np.abs(norms - 1.0) > UNIT_TOL
    if bad.any():
        raise ValueError(f"{int(bad.sum())} direction(s) are not unit vectors (e.g. norm {norms[bad][0]:.12g})")
    return dirs


def cart2sphere(dirs):
    """Polar angle theta (from +z) and azimuth phi of unit vectors."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    return theta, phi


def eval_basis(dirs, lmax=LMAX) -> np.ndarray:
    """Basis matrix B (N x K), B[i, j] = Y_j(dirs[i])."""
    _check_lmax(lmax)
    dirs = as_directions(dirs)
    theta, phi = cart2sphere(dirs)
    cos_theta = np.cos(theta)
    basis = np.zeros((dirs.shape[0], n_coeffs(lmax)))
    rt2 = math.sqrt(2.0)
    for l in range(0, lmax + 1, 2):
        for m in range(0, l + 1):
            norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
            legendre = norm * lpmv(m, l, cos_theta)
            if m == 0:
                basis[:, sh_flat_index(l, 0, lmax)] = legendre
            else:
                basis[:, sh_flat_index(l, m, lmax)] = rt2 * legendre * np.cos(m * phi)
                basis[:, sh_flat_index(l, -m, lmax)] = rt2 * legendre * np.sin(m * phi)
    return basis


def fit_matrix(dirs, lmax=LMAX, ridge=0.0, weights=None) -> np.ndarray:
    """Linear operator F (K x N) with fit_coeffs(s) = F @ s.

    With `weights` (e.g. quadrature weights) the residual is weighted per sample,
    which turns the fit into the exact SH projection on a quadrature grid.

    Raises:
        NumericalError: the unregularised system is rank deficient
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    basis = eval_basis(dirs, lmax)
    k = basis.shape[1]
    sqrt_w = np.ones(basis.shape[0]) if weights is None else np.sqrt(np.asarray(weights, dtype=np.float64))
    if sqrt_w.shape != (basis.shape[0],) or not np.all(np.isfinite(sqrt_w)):
        raise ValueError("weights must be one finite non-negative value per direction")
    basis = basis * sqrt_w[:, None]
    if ridge == 0:
        if basis.shape[0] < k:
            raise NumericalError(f"{basis.shape[0]} samples cannot determine {k} coefficients without ridge")
        rank = np.linalg.matrix_rank(basis)
        if rank < k:
            raise NumericalError(f"SH basis matrix is rank deficient ({rank} < {k}); use ridge > 0")
        return np.linalg.pinv(basis) * sqrt_w[None, :]
    gram = basis.T @ basis + ridge * np.eye(k)
    try:
        return np.linalg.solve(gram, basis.T) * sqrt_w[None, :]
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"regularised SH system is singular: {e}") from e


def fit_coeffs(samples, dirs, ridge=0.0, lmax=LMAX, weights=None) -> np.ndarray:
    """Least-squares SH fit minimising |B c - s|^2 + ridge |c|^2.

    `samples` may be (N,) or (N, V) for V functions sampled on the same dirs.
    """
    samples = np.asarray(samples, dtype=np.float64)
    dirs = as_directions(dirs)
    if samples.shape[0] != dirs.shape[0]:
        raise ValueError(f"{samples.shape[0]} samples for {dirs.shape[0]} directions")
    return fit_matrix(dirs, lmax, ridge, weights) @ samples


def amplitude(c, direction) -> float:
    c = np.asarray(c, dtype=np.float64)
    row = eval_basis(np.reshape(direction, (1, 3)), lmax_for(c.shape[-1]))[0]
    return float(row @ c)


def amplitudes(c, dirs) -> np.ndarray:
    """FOD values at many directions; c is (K,) or (..., K)."""
    c = np.asarray(c, dtype=np.float64)
    basis = eval_basis(dirs, lmax_for(c.shape[-1]))
    return c @ basis.T


def acc_values(u, v) -> np.ndarray:
    """Vectorised ACC over the last axis; NaN where either side has no l>=2 energy."""
    u = np.asarray(u, dtype=np.float64)[..., 1:]
    v = np.asarray(v, dtype=np.float64)[..., 1:]
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    defined = (nu >= ACC_EPS) & (nv >= ACC_EPS)
    with np.errstate(invalid='ignore', divide='ignore'):
        acc = np.sum(u * v, axis=-1) / (nu * nv)
    acc = np.clip(acc, -1.0, 1.0)
    return np.where(defined, acc, np.nan)


def acc_voxel(u, v) -> float:
    """Angular Correlation Coefficient: cosine of the non-DC coefficient vectors.

    Returns NaN (undefined) when either vector has non-DC norm below 1e-12.
    """
    return float(acc_values(u, v))


def sphere_quadrature(n_theta=50, n_phi=100):
    """Gauss-Legendre (cos theta) x uniform (phi) product rule.

    Integrates band-limited functions of degree < min(2 n_theta, n_phi) exactly;
    the default 5000 nodes cover products of two degree-8 harmonics.

    Returns:
        dirs (N, 3), weights (N,) summing to 4 pi
    """
    z, wz = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    zz, pp = np.meshgrid(z, phi, indexing='ij')
    r = np.sqrt(1.0 - zz ** 2)
    dirs = np.stack([r * np.cos(pp), r * np.sin(pp), zz], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    weights = (wz[:, None] * np.full(n_phi, 2 * np.pi / n_phi)[None, :]).reshape(-1)
    return dirs, weights


def fibonacci_sphere(n=4000) -> np.ndarray:
    """Near-uniform unit vectors on the sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z ** 2)
    phi = np.pi * (1.0 + math.sqrt(5.0)) * i
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
