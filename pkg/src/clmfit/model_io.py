"""Versioned JSON serialization for shape models, detector banks, and configs.

Every loader validates the full set of type invariants at the boundary so no
invalid object ever enters the pipeline. Floats are serialized with Python's
shortest round-trip representation, which makes save -> load the identity on
all weights.

A detector bank is a directory holding one JSON file per detector plus a
manifest naming the view and scale tables. Views with no model of their own
are served lazily by mirroring the opposite-yaw model.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from clmfit import cen as _cen
from clmfit.cen import CenModel, ResponseMap
from clmfit.errors import BankConfigError, ModelFormatError
from clmfit.nurlms import LandmarkReliability, NurlmsConfig
from clmfit.pdm import PdmModel, check_orthonormal

PDM_VERSION = 1
CEN_VERSION = 1
BANK_VERSION = 1


def _require_version(data: dict, expected: int, path) -> None:
    if data.get("version") != expected:
        raise ModelFormatError(
            f"{path}: expected version {expected}, got {data.get('version')!r}"
        )


# ---------------------------------------------------------------------------
# Shape model

def save_pdm(model: PdmModel, path) -> None:
    obj = {
        "version": PDM_VERSION,
        "n": model.n_landmarks,
        "m": model.n_modes,
        "mean": model.mean_shape.tolist(),
        "basis": model.basis.tolist(),
        "eigenvalues": model.eigenvalues.tolist(),
    }
    if model.eye_indices is not None:
        obj["eye_indices"] = list(model.eye_indices)
    with open(path, "w") as f:
        json.dump(obj, f)
        f.write("\n")


def load_pdm(path) -> PdmModel:
    with open(path) as f:
        data = json.load(f)
    _require_version(data, PDM_VERSION, path)
    n, m = data["n"], data["m"]
    mean = np.asarray(data["mean"], dtype=np.float64)
    basis = np.asarray(data["basis"], dtype=np.float64)
    eig = np.asarray(data["eigenvalues"], dtype=np.float64)
    if mean.shape != (3 * n,):
        raise ModelFormatError(f"{path}: mean has shape {mean.shape}, expected ({3*n},)")
    if basis.shape != (3 * n, m):
        raise ModelFormatError(
            f"{path}: basis has shape {basis.shape}, expected ({3*n}, {m})"
        )
    if eig.shape != (m,):
        raise ModelFormatError(f"{path}: eigenvalues have shape {eig.shape}, expected ({m},)")
    eye = data.get("eye_indices")
    try:
        model = PdmModel(mean, basis, eig, eye_indices=tuple(eye) if eye else None)
        check_orthonormal(model, tol=1e-8)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# Detectors

def _cen_to_dict(model: CenModel) -> dict:
    return {
        "version": CEN_VERSION,
        "landmark": model.landmark,
        "view": model.view,
        "scale_px": model.scale_px,
        "c1": {"w": model.kernels.tolist(), "b": model.bias1.tolist()},
        "c2": {"w": model.w2.tolist(), "b": model.b2.tolist()},
        "c3": {"w": model.w3.tolist(), "b": model.b3.tolist()},
        "combiner": {"w": model.combiner_w.tolist(), "b": model.combiner_b},
    }


def save_cen(model: CenModel, path) -> None:
    with open(path, "w") as f:
        json.dump(_cen_to_dict(model), f)
        f.write("\n")


def load_cen(path, allow_negative_combiner: bool = False) -> CenModel:
    with open(path) as f:
        data = json.load(f)
    _require_version(data, CEN_VERSION, path)
    try:
        model = CenModel(
            kernels=np.asarray(data["c1"]["w"], dtype=np.float64),
            bias1=np.asarray(data["c1"]["b"], dtype=np.float64),
            w2=np.asarray(data["c2"]["w"], dtype=np.float64),
            b2=np.asarray(data["c2"]["b"], dtype=np.float64),
            w3=np.asarray(data["c3"]["w"], dtype=np.float64),
            b3=np.asarray(data["c3"]["b"], dtype=np.float64),
            combiner_w=np.asarray(data["combiner"]["w"], dtype=np.float64),
            combiner_b=data["combiner"]["b"],
            landmark=int(data["landmark"]),
            view=int(data["view"]),
            scale_px=int(data["scale_px"]),
        )
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    if not allow_negative_combiner:
        try:
            _cen.validate_nonneg(model)
        except ModelFormatError as exc:
            raise ModelFormatError(f"{path}: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# Banks

class _CenDetector:
    def __init__(self, model: CenModel):
        self.model = model

    def respond(self, roi, origin, step: float) -> ResponseMap:
        return _cen.response_map(roi, self.model, origin=origin, step=step)


class _MirroredDetector:
    def __init__(self, model: CenModel):
        self.model = model

    def respond(self, roi, origin, step: float) -> ResponseMap:
        return _cen.mirrored_response_map(roi, self.model, origin=origin, step=step)


class CenBank:
    """Detector lookup by (landmark, view index, scale).

    ``views_yaw`` (radians) is the physical view table extended with the
    negations of every yaw, so a request for a view that only exists with the
    opposite sign is served by a mirrored detector. A bank built from a single
    model file serves that model for every landmark.
    """

    def __init__(self, models, views_yaw_deg, scales_px, shared_model: CenModel | None = None):
        scales = [int(s) for s in scales_px]
        if scales != sorted(scales):
            raise ModelFormatError("scale list must be sorted ascending")
        self.scales_px = tuple(scales)
        phys = [float(v) for v in views_yaw_deg]
        table = sorted({round(v, 9) for v in phys} | {round(-v, 9) for v in phys})
        self.views_yaw_deg = tuple(table)
        self.views_yaw = tuple(math.radians(v) for v in table)
        self._phys_yaw_deg = phys
        self._shared = shared_model
        self._index: dict[tuple[int, float, int], CenModel] = {}
        for entry_view_deg, m in models:
            key = (m.landmark, round(float(entry_view_deg), 9), m.scale_px)
            if key in self._index:
                raise ModelFormatError(f"duplicate detector for {key}")
            self._index[key] = m

    def detector(self, landmark: int, view: int, scale_px: int):
        if self._shared is not None:
            return _CenDetector(self._shared)
        if not 0 <= view < len(self.views_yaw_deg):
            raise BankConfigError(f"view index {view} outside the view table")
        yaw = self.views_yaw_deg[view]
        direct = self._index.get((landmark, yaw, scale_px))
        if direct is not None:
            return _CenDetector(direct)
        mirror = self._index.get((landmark, round(-yaw, 9), scale_px))
        if mirror is not None:
            return _MirroredDetector(mirror)
        raise BankConfigError(
            f"no detector for landmark={landmark} view_yaw_deg={yaw} scale_px={scale_px}"
        )

    def validate_for(self, n_landmarks: int) -> None:
        """Check every (landmark, view, scale) the fitter may request resolves."""
        if self._shared is not None:
            return
        for lm in range(n_landmarks):
            for vi in range(len(self.views_yaw_deg)):
                for sc in self.scales_px:
                    self.detector(lm, vi, sc)


def save_bank(dir_path, models, views_yaw_deg, scales_px) -> None:
    """Write a bank directory: per-model JSON files plus a manifest.

    ``models`` are CenModels whose ``view`` indexes into ``views_yaw_deg``.
    """
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in models:
        fname = f"cen_l{m.landmark}_v{m.view}_s{m.scale_px}.json"
        save_cen(m, d / fname)
        entries.append(
            {"landmark": m.landmark, "view": m.view, "scale": m.scale_px, "file": fname}
        )
    manifest = {
        "version": BANK_VERSION,
        "views_yaw_deg": [float(v) for v in views_yaw_deg],
        "scales_px": [int(s) for s in scales_px],
        "models": entries,
    }
    with open(d / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def load_bank(path, allow_negative_combiner: bool = False) -> CenBank:
    """Load a bank directory, or build a single-model bank from one JSON file."""
    p = Path(path)
    if p.is_file():
        model = load_cen(p, allow_negative_combiner=allow_negative_combiner)
        return CenBank([], [0.0], [model.scale_px], shared_model=model)
    manifest_path = p / "manifest.json"
    with open(manifest_path) as f:
        manifest = json.load(f)
    _require_version(manifest, BANK_VERSION, manifest_path)
    views = manifest["views_yaw_deg"]
    models = []
    for entry in manifest["models"]:
        m = load_cen(p / entry["file"], allow_negative_combiner=allow_negative_combiner)
        for fld in ("landmark", "view"):
            if getattr(m, fld) != entry[fld]:
                raise ModelFormatError(
                    f"{entry['file']}: {fld}={getattr(m, fld)} does not match "
                    f"manifest entry {entry[fld]}"
                )
        if m.scale_px != entry["scale"]:
            raise ModelFormatError(
                f"{entry['file']}: scale_px={m.scale_px} does not match manifest "
                f"entry {entry['scale']}"
            )
        if not 0 <= entry["view"] < len(views):
            raise ModelFormatError(f"{entry['file']}: view index outside view table")
        models.append((views[entry["view"]], m))
    try:
        return CenBank(models, views, manifest["scales_px"])
    except ModelFormatError as exc:
        raise ModelFormatError(f"{manifest_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Reliability vectors and fit configurations

def save_reliability(reliab: LandmarkReliability, path) -> None:
    with open(path, "w") as f:
        json.dump(reliab.c.tolist(), f)
        f.write("\n")


def load_reliability(path) -> LandmarkReliability:
    with open(path) as f:
        data = json.load(f)
    try:
        return LandmarkReliability(np.asarray(data, dtype=np.float64))
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def load_config(path) -> NurlmsConfig:
    """Fit configuration from a JSON object of NurlmsConfig field overrides."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ModelFormatError(f"{path}: config must be a JSON object")
    allowed = set(NurlmsConfig.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise ModelFormatError(f"{path}: unknown config keys {sorted(unknown)}")
    if "roi_schedule" in data:
        data["roi_schedule"] = tuple(data["roi_schedule"])
    try:
        return NurlmsConfig(**data)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
