"""3D point distribution model: shape synthesis, Jacobian, prior, initialization.

Landmark positions are controlled by a parameter vector p = [s, t, w, q]:

    x_i = s * R2d * (mean_i + basis_i @ q) + t

where ``mean_i`` is the mean 3-D position of landmark i, ``basis_i`` the 3 x m
block of the principal-component matrix for that landmark, ``q`` the non-rigid
mode coefficients, ``R2d`` the first two rows of the rotation matrix built
from the axis-angle vector w, ``s`` a global scale and ``t`` a 2-D translation
in pixels. Non-rigid coefficients carry a zero-mean Gaussian prior with the
per-mode variances in ``eigenvalues``; the rigid parameters are unregularized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this rotation magnitude the exponential map switches to its Taylor
# expansion to avoid dividing by a vanishing angle.
SMALL_ANGLE = 1e-7


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_matrix(w) -> np.ndarray:
    """Axis-angle vector to rotation matrix via the exponential map."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    Ku = K / theta
    return np.eye(3) + np.sin(theta) * Ku + (1.0 - np.cos(theta)) * (Ku @ Ku)


def axis_angle(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to axis-angle vector (log map)."""
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    vec = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * vec
    if np.pi - theta < 1e-6:
        # Near pi the off-diagonal difference vanishes; recover the axis from
        # the symmetric part instead.
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k:
                    axis[i] = M[k, i] / axis[k]
        axis /= max(np.linalg.norm(axis), 1e-300)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vec


@dataclass(frozen=True)
class PdmModel:
    """Immutable linear 3-D shape model.

    ``mean_shape`` is a length-3n vector of interleaved (x, y, z) triplets,
    ``basis`` a 3n x m matrix whose columns are principal components, and
    ``eigenvalues`` the per-mode prior variances (all strictly positive).
    ``eye_indices`` optionally names the two outer-eye-corner landmarks used
    for interocular-distance computations.
    """

    mean_shape: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    eye_indices: tuple[int, int] | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        if mean.size % 3 != 0 or mean.size == 0:
            raise ValueError("mean_shape length must be a positive multiple of 3")
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[0] != mean.size:
            raise ValueError(
                f"basis must have {mean.size} rows, got shape {basis.shape}"
            )
        eig = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if eig.size != basis.shape[1]:
            raise ValueError("eigenvalue count must match basis column count")
        if np.any(eig <= 0):
            raise ValueError("all eigenvalues must be strictly positive")
        if self.eye_indices is not None:
            i, j = self.eye_indices
            n = mean.size // 3
            if not (0 <= i < n and 0 <= j < n and i != j):
                raise ValueError("eye_indices out of range")
            object.__setattr__(self, "eye_indices", (int(i), int(j)))
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def n_landmarks(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_modes(self) -> int:
        return self.basis.shape[1]


def check_orthonormal(model: PdmModel, tol: float = 1e-8) -> None:
    """Raise if the basis columns are not mutually orthonormal within ``tol``."""
    m = model.n_modes
    if m == 0:
        return
    gram = model.basis.T @ model.basis
    err = np.max(np.abs(gram - np.eye(m)))
    if err > tol:
        raise ValueError(f"basis columns not orthonormal (max deviation {err:.3e})")


@dataclass(frozen=True)
class PdmParams:
    """Pose and shape parameters p = [s, t, w, q]."""

    scale: float
    translation: np.ndarray
    rotation: np.ndarray
    nonrigid: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2)
        )
        object.__setattr__(
            self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3)
        )
        object.__setattr__(
            self, "nonrigid", np.asarray(self.nonrigid, dtype=np.float64).reshape(-1)
        )

    @classmethod
    def identity(cls, n_modes: int) -> "PdmParams":
        return cls(1.0, np.zeros(2), np.zeros(3), np.zeros(n_modes))

    def as_vector(self) -> np.ndarray:
        """Flatten to [s, tx, ty, wx, wy, wz, q_1..q_m]."""
        return np.concatenate(
            [[self.scale], self.translation, self.rotation, self.nonrigid]
        )

    @classmethod
    def from_vector(cls, vec) -> "PdmParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        return cls(float(vec[0]), vec[1:3], vec[3:6], vec[6:])


@dataclass(frozen=True)
class LandmarkSet:
    """2-D landmark positions in image pixels plus per-landmark visibility."""

    points: np.ndarray
    visibility: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        vis = self.visibility
        if vis is None:
            vis = np.ones(len(pts), dtype=bool)
        else:
            vis = np.asarray(vis, dtype=bool).reshape(-1)
        if len(vis) != len(pts):
            raise ValueError("points and visibility lengths differ")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visibility", vis)

    def __len__(self) -> int:
        return len(self.points)


def _check_dims(model: PdmModel, params: PdmParams) -> None:
    if params.nonrigid.size != model.n_modes:
        raise ValueError(
            f"params have {params.nonrigid.size} non-rigid modes, "
            f"model has {model.n_modes}"
        )


def _deformed_points3d(model: PdmModel, params: PdmParams) -> np.ndarray:
    """Mean-plus-modes 3-D points before the rigid transform, shape (n, 3)."""
    flat = model.mean_shape + model.basis @ params.nonrigid
    return flat.reshape(-1, 3)


def shape_from_params(model: PdmModel, params: PdmParams) -> LandmarkSet:
    """Project the parametrized shape to 2-D landmark positions.

    All landmarks are marked visible; occlusion masking happens downstream.
    """
    _check_dims(model, params)
    pts3 = _deformed_points3d(model, params)
    R = rotation_matrix(params.rotation)
    xy = params.scale * (pts3 @ R.T)[:, :2] + params.translation
    return LandmarkSet(xy)


def jacobian(model: PdmModel, params: PdmParams) -> np.ndarray:
    """Derivatives of landmark positions with respect to the parameters.

    Returns a 2n x (6+m) matrix; rows are the n x-components followed by the
    n y-components, columns ordered [s, tx, ty, wx, wy, wz, q_1..q_m]. The
    rotation columns linearize an incremental rotation composed on the left
    of the current one (derivative of R(dw) @ R at dw = 0), so update steps
    must apply rotation increments the same way (see :func:`apply_update`).
    """
    _check_dims(model, params)
    n, m = model.n_landmarks, model.n_modes
    s = params.scale
    pts3 = _deformed_points3d(model, params)
    R = rotation_matrix(params.rotation)
    y = pts3 @ R.T  # rotated 3-D points

    J = np.zeros((2 * n, 6 + m))
    J[:n, 0] = y[:, 0]
    J[n:, 0] = y[:, 1]
    J[:n, 1] = 1.0
    J[n:, 2] = 1.0
    # d/d(dw_k) [R(dw) y] at dw=0 is skew(e_k) y.
    J[n:, 3] = -s * y[:, 2]
    J[:n, 4] = s * y[:, 2]
    J[:n, 5] = -s * y[:, 1]
    J[n:, 5] = s * y[:, 0]
    if m:
        B = model.basis.reshape(n, 3, m)
        RB = np.einsum("ab,nbm->nam", R, B)
        J[:n, 6:] = s * RB[:, 0, :]
        J[n:, 6:] = s * RB[:, 1, :]
    return J


def regularization(model: PdmModel, params: PdmParams) -> float:
    """Mahalanobis norm of the non-rigid coefficients under the mode prior."""
    _check_dims(model, params)
    return float(np.sum(params.nonrigid**2 / model.eigenvalues))


def apply_update(model: PdmModel, params: PdmParams, dp: np.ndarray) -> PdmParams:
    """Apply a parameter update; the rotation increment is composed on the left."""
    dp = np.asarray(dp, dtype=np.float64).reshape(-1)
    if dp.size != 6 + model.n_modes:
        raise ValueError("update vector has wrong length")
    # Scale must stay positive; truncate wildly negative steps.
    new_scale = max(params.scale + dp[0], 1e-6)
    R_new = rotation_matrix(dp[3:6]) @ rotation_matrix(params.rotation)
    return PdmParams(
        new_scale,
        params.translation + dp[1:3],
        axis_angle(R_new),
        params.nonrigid + dp[6:],
    )


def init_from_bbox(model: PdmModel, bbox, orientation=(0.0, 0.0, 0.0)) -> PdmParams:
    """Pose parameters placing the mean shape inside a bounding box.

    ``bbox`` is (x, y, width, height) with (x, y) the top-left corner. The
    returned parameters have q = 0 and the requested orientation; scale and
    translation are chosen so the projected shape's bounding box matches the
    requested center exactly and the requested width exactly (fit-by-width:
    out-of-plane orientations change apparent height far more than width).
    """
    x, y, bw, bh = (float(v) for v in bbox)
    if bw <= 0 or bh <= 0:
        raise ValueError(f"degenerate bbox {bbox!r}")
    base = shape_from_params(
        model, PdmParams(1.0, np.zeros(2), orientation, np.zeros(model.n_modes))
    ).points
    lo = base.min(axis=0)
    hi = base.max(axis=0)
    base_w = hi[0] - lo[0]
    if base_w <= 0:
        raise ValueError("model projects to zero width at this orientation")
    s = bw / base_w
    base_center = (lo + hi) / 2.0
    target_center = np.array([x + bw / 2.0, y + bh / 2.0])
    t = target_center - s * base_center
    return PdmParams(s, t, orientation, np.zeros(model.n_modes))


def interocular_distance(model: PdmModel, landmarks: LandmarkSet) -> float | None:
    """Distance between the configured eye-corner landmarks, if configured."""
    if model.eye_indices is None:
        return None
    i, j = model.eye_indices
    return float(np.linalg.norm(landmarks.points[i] - landmarks.points[j]))


def synthetic_model(
    n_landmarks: int, n_modes: int, seed: int = 0
) -> PdmModel:
    """Reproducible toy shape model on a unit face-like layout.

    Landmarks 0 and 1 are the eye corners; the remainder sit on an ellipse.
    The basis comes from orthonormalized Gaussian columns and the eigenvalues
    decay geometrically, so generated models always satisfy the loader
    invariants.
    """
    if n_landmarks < 3:
        raise ValueError("need at least 3 landmarks")
    if not 0 <= n_modes <= 3 * n_landmarks:
        raise ValueError("n_modes must be between 0 and 3*n_landmarks")
    rng = np.random.default_rng(seed)

    pts = np.zeros((n_landmarks, 3))
    pts[0] = (-0.3, -0.25, 0.1)
    pts[1] = (0.3, -0.25, 0.1)
    k = n_landmarks - 2
    ang = 2.0 * np.pi * np.arange(k) / k
    pts[2:, 0] = 0.55 * np.cos(ang)
    pts[2:, 1] = 0.7 * np.sin(ang)
    pts[2:, 2] = 0.15 - 0.1 * (pts[2:, 0] ** 2 + pts[2:, 1] ** 2)
    pts -= pts.mean(axis=0)

    if n_modes:
        A = rng.standard_normal((3 * n_landmarks, n_modes))
        Q, _ = np.linalg.qr(A)
        basis = Q[:, :n_modes]
    else:
        basis = np.zeros((3 * n_landmarks, 0))
    eig = 0.01 * 0.6 ** np.arange(n_modes)
    return PdmModel(pts.reshape(-1), basis, eig, eye_indices=(0, 1))
