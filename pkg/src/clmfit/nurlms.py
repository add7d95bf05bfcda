"""Regularized landmark mean-shift fitting on detector response maps.

One fitting stage computes a response map per visible landmark around the
current estimate, then alternates two steps until convergence:

* a kernel-density mean-shift vector per landmark: the Gaussian-KDE-weighted
  mean of the response-map cells minus the current position;
* a damped Gauss-Newton parameter update solving

      (J' W J + r Li) dp = J' W v - r Li p

  where W weights each landmark's x and y rows by its detector reliability
  (zeroed for invisible landmarks) and Li is the inverse shape prior, zero on
  the six rigid entries.

Stages follow a shrinking ROI schedule, each stage using the next detector
scale; coordinates move between image space and the detector's working scale
through a similarity transform derived from the current interocular distance.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from clmfit import pdm
from clmfit.cen import KERNEL_SIZE, ResponseMap
from clmfit.errors import BankConfigError, DegenerateResponseError, SingularSystemError
from clmfit.pdm import LandmarkSet, PdmModel, PdmParams

log = logging.getLogger("clmfit.nurlms")

#: Default Gaussian-kernel standard deviation of the KDE, working-scale pixels.
DEFAULT_SIGMA = 1.85

# Floor for probabilities entering the hypothesis score.
_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class NurlmsConfig:
    """Fitting hyperparameters.

    ``rho`` is the KDE kernel variance (sigma squared) in working-scale
    pixels squared. ``r`` weights the shape prior and ``w_global`` the
    mean-shift term. ``roi_schedule`` lists the ROI side length of each
    fitting stage. The accept/reject thresholds drive hypothesis early
    stopping and were calibrated on the synthetic harness.
    """

    rho: float = DEFAULT_SIGMA**2
    r: float = 32.0
    w_global: float = 2.5
    max_iters: int = 10
    convergence_tol: float = 1e-3
    roi_schedule: tuple[int, ...] = (25, 23, 21, 21)
    accept_threshold: float = -12.0
    reject_threshold: float = -200.0
    extended_views: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.r < 0:
            raise ValueError("r must be non-negative")
        if not self.w_global > 0:
            raise ValueError("w_global must be positive")
        if len(self.roi_schedule) == 0:
            raise ValueError("roi_schedule must not be empty")
        if any(s < KERNEL_SIZE + 1 for s in self.roi_schedule):
            raise ValueError(f"ROI sizes must exceed the {KERNEL_SIZE}px kernel")
        object.__setattr__(self, "roi_schedule", tuple(int(s) for s in self.roi_schedule))


@dataclass(frozen=True)
class LandmarkReliability:
    """Per-landmark detector accuracies c_i (strictly positive)."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if np.any(c <= 0):
            raise ValueError("all reliabilities must be strictly positive")
        object.__setattr__(self, "c", c)

    @classmethod
    def uniform(cls, n: int) -> "LandmarkReliability":
        return cls(np.ones(n))


@dataclass
class FitResult:
    """Converged parameters plus diagnostics of one fit."""

    params: PdmParams
    landmarks: LandmarkSet
    map_score: float
    iterations: list[int]
    converged: bool
    discarded: bool = False
    accepted: bool = True
    low_confidence: bool = False
    hypothesis_index: int = 0
    hypotheses_started: int = 1
    hypotheses_completed: int = 1

    def to_csv(self) -> str:
        lines = [
            "# map_score={} iterations={} converged={} accepted={}".format(
                repr(float(self.map_score)),
                ",".join(str(i) for i in self.iterations),
                self.converged,
                self.accepted,
            ),
            "id,x,y,visible",
        ]
        for i, (x, y) in enumerate(self.landmarks.points):
            lines.append(
                f"{i},{float(x)!r},{float(y)!r},{int(self.landmarks.visibility[i])}"
            )
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())


def landmarks_from_csv(path) -> LandmarkSet:
    """Read back a fit-result CSV as a landmark set."""
    pts, vis = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("id,"):
                continue
            _, x, y, v = line.split(",")
            pts.append((float(x), float(y)))
            vis.append(bool(int(v)))
    return LandmarkSet(np.asarray(pts), np.asarray(vis))


def kde_mean(rmap: ResponseMap, point, rho: float) -> np.ndarray:
    """Gaussian-KDE-weighted mean of the response grid, in image coordinates.

    Distances are measured in working-scale units (grid steps), matching the
    units of ``rho``. Raises DegenerateResponseError when the total kernel
    mass vanishes (all-zero map, or all mass underflowed).
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    point = np.asarray(point, dtype=np.float64).reshape(2)
    xs, ys = rmap.grid_coords()
    gx = (point[0] - xs) / rmap.step
    gy = (point[1] - ys) / rmap.step
    w = rmap.values * np.exp(-(gx[None, :] ** 2 + gy[:, None] ** 2) / (2.0 * rho))
    total = w.sum()
    if total <= 0.0:
        raise DegenerateResponseError("response map carries no kernel mass")
    return np.array(
        [(w * xs[None, :]).sum() / total, (w * ys[:, None]).sum() / total]
    )


def mean_shift(rmap: ResponseMap, current, rho: float) -> np.ndarray:
    """Mean-shift vector: KDE-weighted mean of candidates minus ``current``.

    ``current`` should lie within the grid extent; the result plus ``current``
    always lies inside the convex hull of the grid-cell centers.
    """
    current = np.asarray(current, dtype=np.float64).reshape(2)
    return kde_mean(rmap, current, rho) - current


def _solve_normal_equations(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """SPD solve of A x = rhs tolerating structurally-zero rows.

    Rows that are identically zero carry no information; they stay stationary
    (x = 0) when their rhs entry is zero and make the system inconsistent
    otherwise. The reduced system is solved by Cholesky factorization, never
    by explicit inversion.
    """
    zero = ~A.any(axis=1)
    if zero.any():
        if np.any(rhs[zero] != 0.0):
            raise SingularSystemError(
                "zero normal-equation row with non-zero right-hand side"
            )
        keep = ~zero
        x = np.zeros_like(rhs)
        if keep.any():
            x[keep] = _cholesky_solve(A[np.ix_(keep, keep)], rhs[keep])
        return x
    return _cholesky_solve(A, rhs)


def _cholesky_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal matrix is singular: {exc}") from exc
    return scipy.linalg.cho_solve(cf, b, check_finite=False)


def update_step(
    model: PdmModel,
    params: PdmParams,
    v: np.ndarray,
    reliab: LandmarkReliability,
    visible: np.ndarray,
    cfg: NurlmsConfig,
) -> np.ndarray:
    """One regularized Gauss-Newton parameter update.

    ``v`` stacks the mean-shift vectors as n x-components followed by n
    y-components, matching the Jacobian row order. Rows belonging to
    invisible landmarks are excluded by zeroing their weights.
    """
    n = model.n_landmarks
    v = np.asarray(v, dtype=np.float64).reshape(2 * n)
    visible = np.asarray(visible, dtype=bool).reshape(n)
    if reliab.c.size != n:
        raise ValueError("reliability length does not match landmark count")

    J = pdm.jacobian(model, params)
    wdiag = cfg.w_global * np.concatenate([reliab.c, reliab.c])
    wdiag[~np.concatenate([visible, visible])] = 0.0

    lam_inv = np.concatenate([np.zeros(6), 1.0 / model.eigenvalues])
    A = J.T @ (wdiag[:, None] * J) + cfg.r * np.diag(lam_inv)
    rhs = J.T @ (wdiag * v) - cfg.r * lam_inv * params.as_vector()
    return _solve_normal_equations(A, rhs)


def yaw_of(rotation) -> float:
    """Global yaw (rotation about the vertical axis) of an axis-angle vector."""
    R = pdm.rotation_matrix(rotation)
    return float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))


def select_view(views_yaw, rotation) -> int:
    """Index of the view whose yaw is nearest the current global yaw.

    Ties break toward the smaller absolute yaw, then the smaller index.
    """
    views = [float(v) for v in views_yaw]
    if not views:
        raise ValueError("view list is empty")
    yaw = yaw_of(rotation)
    best = min(range(len(views)), key=lambda i: (abs(views[i] - yaw), abs(views[i]), i))
    return best


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` at float coordinates, clamping to the border."""
    h, w = image.shape
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros_like(x, int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros_like(y, int)
    fx = x - x0
    fy = y - y0
    return (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x0 + 1] * fx * (1 - fy)
        + image[y0 + 1, x0] * (1 - fx) * fy
        + image[y0 + 1, x0 + 1] * fx * fy
    )


def extract_roi(image: np.ndarray, center, size: int, step: float):
    """Sample a size x size ROI around ``center`` at the working scale.

    Returns the ROI and the image-space coordinate of response-map cell
    (0, 0), i.e. the center of the first full detector window. Samples
    falling outside the image are clamped to the border.
    """
    center = np.asarray(center, dtype=np.float64).reshape(2)
    offs = (np.arange(size) - (size - 1) / 2.0) * step
    xs = center[0] + offs
    ys = center[1] + offs
    roi = _bilinear_sample(image, xs[None, :].repeat(size, 0), ys[:, None].repeat(size, 1))
    half_k = KERNEL_SIZE // 2
    origin = center + (half_k - (size - 1) / 2.0) * step
    return roi, origin


def working_step(model: PdmModel, params: PdmParams, scale_px: int) -> float:
    """Image pixels per working-scale pixel for a detector trained at scale_px.

    Derived from the current interocular distance; identity when the model
    has no configured eye landmarks.
    """
    shape = pdm.shape_from_params(model, params)
    iod = pdm.interocular_distance(model, shape)
    if iod is None or iod < 1e-9:
        return 1.0
    zoom = float(np.clip(scale_px / iod, 0.05, 20.0))
    return 1.0 / zoom


def map_score(
    rmaps: dict[int, ResponseMap],
    model: PdmModel,
    params: PdmParams,
    cfg: NurlmsConfig,
    visible: np.ndarray,
) -> float:
    """Penalized log-probability of a hypothesis: sum of log responses at the
    current landmark positions minus the weighted shape prior."""
    pts = pdm.shape_from_params(model, params).points
    total = 0.0
    for i, rmap in rmaps.items():
        if visible[i]:
            total += float(np.log(max(rmap.sample(pts[i]), _LOG_FLOOR)))
    return total - cfg.r * pdm.regularization(model, params)


def kde_energy(
    rmaps: dict[int, ResponseMap],
    model: PdmModel,
    params: PdmParams,
    cfg: NurlmsConfig,
    visible: np.ndarray,
) -> float:
    """Objective driven by the iteration: negative log of the KDE-smoothed
    response density per landmark plus the weighted shape prior."""
    pts = pdm.shape_from_params(model, params).points
    total = cfg.r * pdm.regularization(model, params)
    for i, rmap in rmaps.items():
        if not visible[i]:
            continue
        xs, ys = rmap.grid_coords()
        gx = (pts[i, 0] - xs) / rmap.step
        gy = (pts[i, 1] - ys) / rmap.step
        dens = float(
            (rmap.values * np.exp(-(gx[None, :] ** 2 + gy[:, None] ** 2) / (2 * cfg.rho))).sum()
        )
        total -= np.log(max(dens, _LOG_FLOOR))
    return total


def _stage_response_maps(
    cens, image, pts, visible, view, scale_px, roi_size, step, threads
):
    """Response maps for all visible landmarks, keyed by landmark index."""

    def one(i: int):
        roi, origin = extract_roi(image, pts[i], roi_size, step)
        det = cens.detector(i, view, scale_px)
        return i, det.respond(roi, origin, step)

    idx = [i for i in range(len(pts)) if visible[i]]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, idx))
    else:
        pairs = [one(i) for i in idx]
    return dict(pairs)


def fit(
    model: PdmModel,
    cens,
    image: np.ndarray,
    init: PdmParams,
    cfg: NurlmsConfig,
    reliab: LandmarkReliability | None = None,
    visibility=None,
    threads: int = 1,
    reject_threshold: float | None = None,
) -> FitResult:
    """Fit the shape model to one image from a single initialization.

    ``cens`` is any detector bank exposing ``views_yaw``, ``scales_px`` and
    ``detector(landmark, view, scale_px)``. Response maps are computed once
    per stage; the inner loop mean-shifts within them and updates parameters
    until the step norm drops under the tolerance. When ``reject_threshold``
    is set, fitting is abandoned as soon as a stage ends with a hypothesis
    score below it (used by multi-hypothesis evaluation).
    """
    image = np.asarray(image, dtype=np.float64)
    n = model.n_landmarks
    if reliab is None:
        reliab = LandmarkReliability.uniform(n)
    visible = (
        np.ones(n, dtype=bool)
        if visibility is None
        else np.asarray(visibility, dtype=bool).reshape(n)
    )
    if not visible.any():
        raise ValueError("at least one landmark must be visible")
    scales = sorted(cens.scales_px)
    if not scales:
        raise BankConfigError("detector bank lists no scales")

    params = init
    iterations: list[int] = []
    converged_all = True
    discarded = False
    rmaps: dict[int, ResponseMap] = {}

    for stage, roi_size in enumerate(cfg.roi_schedule):
        scale_px = scales[min(stage, len(scales) - 1)]
        view = select_view(cens.views_yaw, params.rotation)
        step = working_step(model, params, scale_px)
        pts = pdm.shape_from_params(model, params).points
        rmaps = _stage_response_maps(
            cens, image, pts, visible, view, scale_px, roi_size, step, threads
        )

        iters = 0
        stage_converged = False
        for _ in range(cfg.max_iters):
            iters += 1
            pts = pdm.shape_from_params(model, params).points
            v = np.zeros(2 * n)
            for i, rmap in rmaps.items():
                try:
                    target = kde_mean(rmap, rmap.clamp_point(pts[i]), cfg.rho)
                    v[i] = target[0] - pts[i, 0]
                    v[n + i] = target[1] - pts[i, 1]
                except DegenerateResponseError:
                    pass  # leave v at zero for this landmark
            dp = update_step(model, params, v, reliab, visible, cfg)
            params = pdm.apply_update(model, params, dp)
            if np.linalg.norm(dp) < cfg.convergence_tol:
                stage_converged = True
                break
        iterations.append(iters)
        converged_all = converged_all and stage_converged

        if reject_threshold is not None:
            interim = map_score(rmaps, model, params, cfg, visible)
            if interim < reject_threshold:
                log.debug("stage %d score %.3f below reject threshold", stage, interim)
                discarded = True
                break

    score = map_score(rmaps, model, params, cfg, visible)
    landmarks = LandmarkSet(pdm.shape_from_params(model, params).points, visible)
    return FitResult(
        params=params,
        landmarks=landmarks,
        map_score=score,
        iterations=iterations,
        converged=converged_all,
        discarded=discarded,
    )


def hypothesis_orientations(cfg: NurlmsConfig) -> list[np.ndarray]:
    """Initialization orientations in fixed evaluation order.

    Frontal first, then +/-30 degrees of yaw, pitch, and roll; four extra
    yaw initializations (+/-55, +/-90 degrees) when extended views are on.
    """
    a = np.deg2rad(30.0)
    orients = [
        np.zeros(3),
        np.array([0.0, a, 0.0]),
        np.array([0.0, -a, 0.0]),
        np.array([a, 0.0, 0.0]),
        np.array([-a, 0.0, 0.0]),
        np.array([0.0, 0.0, a]),
        np.array([0.0, 0.0, -a]),
    ]
    if cfg.extended_views:
        for deg in (55.0, -55.0, 90.0, -90.0):
            orients.append(np.array([0.0, np.deg2rad(deg), 0.0]))
    return orients


def multi_hypothesis_fit(
    model: PdmModel,
    cens,
    image: np.ndarray,
    bbox,
    cfg: NurlmsConfig,
    reliab: LandmarkReliability | None = None,
    visibility=None,
    threads: int = 1,
    exhaustive: bool = False,
) -> FitResult:
    """Fit from multiple orientation hypotheses and keep the best score.

    Hypotheses run in a fixed order. Unless ``exhaustive`` is set, evaluation
    stops as soon as a completed hypothesis scores at or above the accept
    threshold, and individual hypotheses are abandoned mid-fit when their
    score drops below the reject threshold. If every hypothesis was
    discarded, the best partial result is returned flagged low-confidence.
    """
    results: list[FitResult] = []
    started = 0
    for orient in hypothesis_orientations(cfg):
        started += 1
        init = pdm.init_from_bbox(model, bbox, orient)
        res = fit(
            model,
            cens,
            image,
            init,
            cfg,
            reliab=reliab,
            visibility=visibility,
            threads=threads,
            reject_threshold=None if exhaustive else cfg.reject_threshold,
        )
        res.hypothesis_index = started - 1
        results.append(res)
        if not exhaustive and not res.discarded and res.map_score >= cfg.accept_threshold:
            break

    completed = [r for r in results if not r.discarded]
    pool = completed if completed else results
    best = pool[0]
    for r in pool[1:]:
        if r.map_score > best.map_score:
            best = r
    best.accepted = (not best.discarded) and best.map_score >= cfg.accept_threshold
    best.low_confidence = not best.accepted
    best.hypotheses_started = started
    best.hypotheses_completed = len(completed)
    return best
