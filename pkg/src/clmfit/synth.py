"""Closed-loop synthetic data: rendered landmark scenes and oracle detectors.

Scenes are grayscale images with one appearance stamp per landmark, placed at
the nearest pixel to the landmark's exact position. Each stamp draws from one
of a few parametric appearance prototypes (oriented edge, corner, blob) with
per-sample contrast, brightness, and noise jitter, which is what gives a
mixture-of-experts detector something to specialize on. Everything is
deterministic under the seed.

Oracle detectors replace trained networks in closed-loop tests: they emit a
unit-peak Gaussian response centered on the scene's true landmark position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clmfit.cen import ResponseMap
from clmfit.pdm import LandmarkSet, PdmModel, PdmParams, shape_from_params

STAMP_SIZE = 13
N_PROTOTYPES = 3
BACKGROUND = 0.5


@dataclass(frozen=True)
class SyntheticScene:
    """A rendered image together with the exact geometry that produced it."""

    image: np.ndarray
    true_params: PdmParams
    true_landmarks: LandmarkSet
    prototype_ids: np.ndarray
    eye_indices: tuple[int, int] | None = None


def prototype_stamp(proto: int, rng: np.random.Generator, size: int = STAMP_SIZE) -> np.ndarray:
    """One appearance stamp with its feature centered on the stamp center."""
    half = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - half
    contrast = rng.uniform(0.25, 0.45)
    brightness = rng.uniform(0.45, 0.55)
    if proto % N_PROTOTYPES == 0:
        # Oriented edge through the center.
        ang = np.pi / 6
        s = np.tanh((np.cos(ang) * xx + np.sin(ang) * yy) / 1.2)
    elif proto % N_PROTOTYPES == 1:
        # Corner: dark quadrant with its vertex at the center.
        s = np.tanh(xx / 1.2) * np.tanh(yy / 1.2)
    else:
        # Bright blob on a dark surround.
        s = 2.0 * np.exp(-(xx**2 + yy**2) / (2.0 * 2.5**2)) - 1.0
    stamp = brightness + contrast * s
    stamp = stamp + rng.normal(0.0, 0.02, stamp.shape)
    return np.clip(stamp, 0.0, 1.0)


def render_scene(
    model: PdmModel,
    params: PdmParams,
    size: tuple[int, int],
    seed: int,
    margin: int = 16,
    background_noise: float = 0.02,
) -> SyntheticScene:
    """Render the parametrized shape into a (width, height) grayscale image.

    Stamps are placed at nearest-pixel positions, so translating the
    parameters by a whole number of pixels shifts every stamp exactly.
    Raises if any landmark would come within ``margin`` pixels of the border.
    """
    w, h = size
    landmarks = shape_from_params(model, params)
    pts = landmarks.points
    if (
        pts[:, 0].min() < margin
        or pts[:, 1].min() < margin
        or pts[:, 0].max() > w - 1 - margin
        or pts[:, 1].max() > h - 1 - margin
    ):
        raise ValueError("projected shape leaves the image margin")

    rng = np.random.default_rng(seed)
    proto_ids = rng.integers(0, N_PROTOTYPES, size=len(pts))
    img = np.full((h, w), BACKGROUND)
    if background_noise > 0:
        img += rng.normal(0.0, background_noise, img.shape)
        img = np.clip(img, 0.0, 1.0)
    half = STAMP_SIZE // 2
    for i, (x, y) in enumerate(pts):
        stamp = prototype_stamp(int(proto_ids[i]), rng)
        cx = int(np.round(x))
        cy = int(np.round(y))
        img[cy - half : cy + half + 1, cx - half : cx + half + 1] = stamp
    return SyntheticScene(
        img, params, landmarks, proto_ids, eye_indices=model.eye_indices
    )


def oracle_response(
    scene: SyntheticScene,
    landmark: int,
    origin,
    step: float,
    size: int,
    sigma: float,
) -> ResponseMap:
    """Ideal response map: unit-peak Gaussian at the true landmark position.

    ``sigma`` is the Gaussian standard deviation in working-scale pixels
    (grid units of ``step``).
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(2)
    truth = scene.true_landmarks.points[landmark]
    idx = np.arange(size)
    gx = (origin[0] + idx * step - truth[0]) / step
    gy = (origin[1] + idx * step - truth[1]) / step
    vals = np.exp(-(gx[None, :] ** 2 + gy[:, None] ** 2) / (2.0 * sigma**2))
    return ResponseMap(vals, origin=origin, step=step)


class OracleDetector:
    """Bank-compatible detector that answers from scene ground truth."""

    def __init__(self, scene: SyntheticScene, landmark: int, sigma: float):
        self.scene = scene
        self.landmark = landmark
        self.sigma = sigma

    def respond(self, roi, origin, step: float) -> ResponseMap:
        size = np.asarray(roi).shape[0] - 10
        return oracle_response(self.scene, self.landmark, origin, step, size, self.sigma)


class OracleBank:
    """Drop-in detector bank serving oracle responses for one scene."""

    def __init__(self, scene: SyntheticScene, sigma: float = 2.0,
                 views_yaw=(0.0,), scales_px=(30,)):
        self.scene = scene
        self.sigma = sigma
        self.views_yaw = tuple(float(v) for v in views_yaw)
        self.scales_px = tuple(int(s) for s in scales_px)

    def detector(self, landmark: int, view: int, scale_px: int) -> OracleDetector:
        return OracleDetector(self.scene, landmark, self.sigma)


# ---------------------------------------------------------------------------
# Scene I/O: P5 PGM images plus a JSON sidecar with the exact geometry.

def write_pgm(path, image: np.ndarray) -> None:
    """Write a grayscale image in [0, 1] as binary 8-bit PGM."""
    img8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img8.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a float array in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def scene_sidecar(scene: SyntheticScene) -> dict:
    p = scene.true_params
    return {
        "version": 1,
        "true_params": {
            "scale": float(p.scale),
            "translation": p.translation.tolist(),
            "rotation": p.rotation.tolist(),
            "nonrigid": p.nonrigid.tolist(),
        },
        "true_landmarks": scene.true_landmarks.points.tolist(),
        "visibility": scene.true_landmarks.visibility.astype(int).tolist(),
        "prototype_ids": scene.prototype_ids.tolist(),
        "eye_indices": list(scene.eye_indices) if scene.eye_indices else None,
    }


def save_scene(scene: SyntheticScene, pgm_path, json_path) -> None:
    write_pgm(pgm_path, scene.image)
    with open(json_path, "w") as f:
        json.dump(scene_sidecar(scene), f, indent=1)
        f.write("\n")


def load_sidecar(path) -> dict:
    with open(path) as f:
        data = json.load(f)
    if data.get("version") != 1:
        raise ValueError(f"{path}: unsupported sidecar version {data.get('version')!r}")
    return data


def sidecar_params(data: dict) -> PdmParams:
    p = data["true_params"]
    return PdmParams(p["scale"], p["translation"], p["rotation"], p["nonrigid"])


def sidecar_landmarks(data: dict) -> LandmarkSet:
    return LandmarkSet(np.asarray(data["true_landmarks"]),
                       np.asarray(data["visibility"], dtype=bool))


def random_scene_params(
    model: PdmModel,
    size: tuple[int, int],
    rng: np.random.Generator,
    yaw_range: float = 0.0,
    pitch_range: float = 0.0,
    roll_range: float = 0.0,
    q_std: float = 0.25,
    margin: int = 16,
) -> PdmParams:
    """Sample pose parameters whose rendered shape fits inside ``size``."""
    w, h = size
    q = rng.normal(0.0, 1.0, model.n_modes) * q_std * np.sqrt(model.eigenvalues)
    rot = np.array(
        [
            rng.uniform(-pitch_range, pitch_range) if pitch_range else 0.0,
            rng.uniform(-yaw_range, yaw_range) if yaw_range else 0.0,
            rng.uniform(-roll_range, roll_range) if roll_range else 0.0,
        ]
    )
    base = shape_from_params(
        model, PdmParams(1.0, np.zeros(2), rot, q)
    ).points
    span = max(np.ptp(base[:, 0]), np.ptp(base[:, 1]))
    target = 0.45 * min(w, h) * rng.uniform(0.9, 1.1)
    s = target / span
    center = np.array([w / 2.0, h / 2.0]) + rng.uniform(-0.04, 0.04, 2) * min(w, h)
    t = center - s * (base.min(axis=0) + base.max(axis=0)) / 2.0
    params = PdmParams(s, t, rot, q)
    # Shrink until the rendered stamps clear the margin.
    for _ in range(8):
        pts = shape_from_params(model, params).points
        if (
            pts[:, 0].min() >= margin
            and pts[:, 1].min() >= margin
            and pts[:, 0].max() <= w - 1 - margin
            and pts[:, 1].max() <= h - 1 - margin
        ):
            return params
        params = PdmParams(params.scale * 0.9, t, rot, q)
    raise ValueError("could not fit the sampled shape inside the image")
