"""Toy-scale detector training: synthetic patches, BCE loss, projected Adam.

The detector is trained to reproduce per-pixel alignment probabilities: the
ground truth for a patch is a Gaussian bump centered on the landmark's true
position within the patch's response grid. Because the first stage normalizes
input windows, its kernels act as a plain linear layer over precomputed
normalized-window features, which keeps the hand-written backward pass small.

Training minimizes mean per-pixel binary cross-entropy with Adam; when the
non-negativity constraint is on, the combiner weights are clamped to zero
from below after every update (projected gradient). Disabling the constraint
is the mixture-of-experts ablation. All of it is bit-deterministic under the
configured seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from clmfit.cen import KERNEL_SIZE, CenModel
from clmfit.errors import TrainingDivergedError
from clmfit.kernels import ZNORM_EPS, znorm_windows
from clmfit.synth import N_PROTOTYPES, SyntheticScene, prototype_stamp

DEFAULT_ARCH = (16, 8, 6)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 100
    batch_size: int = 512
    label_sigma: float = 1.0
    seed: int = 0
    enforce_nonneg: bool = True
    roi_size: int = 19
    prototype_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    noise_sigma: float = 0.03

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.label_sigma > 0:
            raise ValueError("label_sigma must be positive")
        if self.roi_size <= KERNEL_SIZE:
            raise ValueError("roi_size must exceed the kernel size")
        w = np.asarray(self.prototype_weights, dtype=np.float64)
        if len(w) != N_PROTOTYPES or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("prototype_weights must be a probability vector")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults: 20 epochs, mini-batches of 64."""
        base = dict(epochs=20, batch_size=64)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class PatchDataset:
    """Aligned arrays of ROI patches and their ground-truth response maps."""

    rois: np.ndarray  # (N, L, L)
    targets: np.ndarray  # (N, L-10, L-10), values in [0, 1]
    split: str = "train"
    prototype_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        rois = np.asarray(self.rois, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if rois.ndim != 3 or rois.shape[1] != rois.shape[2]:
            raise ValueError("rois must be (N, L, L)")
        grid = rois.shape[1] - KERNEL_SIZE + 1
        if targets.shape != (rois.shape[0], grid, grid):
            raise ValueError(
                f"targets must be ({rois.shape[0]}, {grid}, {grid}), got {targets.shape}"
            )
        if targets.size and (targets.min() < 0 or targets.max() > 1):
            raise ValueError("target values must lie in [0, 1]")
        proto = self.prototype_ids
        if proto is None:
            proto = np.zeros(rois.shape[0], dtype=int)
        object.__setattr__(self, "rois", rois)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "prototype_ids", np.asarray(proto, dtype=int))

    def __len__(self) -> int:
        return self.rois.shape[0]


def _gaussian_label(grid: int, center: np.ndarray, sigma: float) -> np.ndarray:
    idx = np.arange(grid, dtype=np.float64)
    gx = (idx - center[0]) / sigma
    gy = (idx - center[1]) / sigma
    return np.exp(-(gx[None, :] ** 2 + gy[:, None] ** 2) / 2.0)


def gen_synthetic_patches(cfg: TrainConfig, count: int, split: str = "train") -> PatchDataset:
    """Parametric patch dataset: one stamped landmark per ROI at a known offset.

    The stamp's prototype is drawn from ``cfg.prototype_weights`` and placed
    at an integer offset inside the response grid (one cell of margin); the
    label is a Gaussian of std ``label_sigma`` centered on that cell.
    Deterministic: the same config and count reproduce identical arrays.
    """
    rng = np.random.default_rng([cfg.seed, {"train": 0, "test": 1}.get(split, 2)])
    L = cfg.roi_size
    grid = L - KERNEL_SIZE + 1
    half_reach = (grid - 1) // 2 - 1
    rois = np.empty((count, L, L))
    targets = np.empty((count, grid, grid))
    protos = np.empty(count, dtype=int)
    half_stamp = prototype_stamp(0, np.random.default_rng(0)).shape[0] // 2
    center = (grid - 1) / 2.0
    for k in range(count):
        proto = int(rng.choice(N_PROTOTYPES, p=cfg.prototype_weights))
        off = rng.integers(-half_reach, half_reach + 1, size=2) if half_reach > 0 else np.zeros(2, int)
        patch = np.full((L, L), 0.5)
        stamp = prototype_stamp(proto, rng)
        cx = int(round((L - 1) / 2.0)) + int(off[0])
        cy = int(round((L - 1) / 2.0)) + int(off[1])
        patch[cy - half_stamp : cy + half_stamp + 1, cx - half_stamp : cx + half_stamp + 1] = stamp[
            max(0, half_stamp - cy) : stamp.shape[0] - max(0, cy + half_stamp + 1 - L),
            max(0, half_stamp - cx) : stamp.shape[1] - max(0, cx + half_stamp + 1 - L),
        ]
        patch += rng.normal(0.0, cfg.noise_sigma, patch.shape)
        rois[k] = np.clip(patch, 0.0, 1.0)
        targets[k] = _gaussian_label(
            grid, np.array([center + off[0], center + off[1]]), cfg.label_sigma
        )
        protos[k] = proto
    return PatchDataset(rois, targets, split=split, prototype_ids=protos)


def dataset_from_scenes(
    scenes: list[SyntheticScene],
    cfg: TrainConfig,
    patches_per_landmark: int = 4,
    split_fraction: float = 0.8,
) -> tuple[PatchDataset, PatchDataset]:
    """Crop training patches around the true landmarks of rendered scenes.

    Each patch is centered a random integer offset away from a landmark so
    the landmark stays inside the response grid; the label Gaussian sits at
    the landmark's exact (sub-cell) position. Scenes are split by index into
    train and test portions.
    """
    rng = np.random.default_rng([cfg.seed, 3])
    L = cfg.roi_size
    grid = L - KERNEL_SIZE + 1
    half_reach = (grid - 1) // 2 - 1
    half_l = (L - 1) / 2.0
    rois, targets, protos, is_train = [], [], [], []
    n_train_scenes = max(1, int(round(split_fraction * len(scenes))))
    for si, scene in enumerate(scenes):
        h, w = scene.image.shape
        for li, (lx, ly) in enumerate(scene.true_landmarks.points):
            for _ in range(patches_per_landmark):
                off = (
                    rng.integers(-half_reach, half_reach + 1, size=2)
                    if half_reach > 0
                    else np.zeros(2, int)
                )
                cx = int(round(lx)) - int(off[0])
                cy = int(round(ly)) - int(off[1])
                x0, y0 = cx - int(half_l), cy - int(half_l)
                if x0 < 0 or y0 < 0 or x0 + L > w or y0 + L > h:
                    continue
                roi = scene.image[y0 : y0 + L, x0 : x0 + L]
                # Landmark position in response-grid coordinates.
                gx = lx - x0 - (KERNEL_SIZE // 2)
                gy = ly - y0 - (KERNEL_SIZE // 2)
                rois.append(roi)
                targets.append(_gaussian_label(grid, np.array([gx, gy]), cfg.label_sigma))
                protos.append(int(scene.prototype_ids[li]))
                is_train.append(si < n_train_scenes)
    if not rois:
        raise ValueError("no patches could be extracted from the scenes")
    rois_a = np.asarray(rois)
    targets_a = np.asarray(targets)
    protos_a = np.asarray(protos)
    mask = np.asarray(is_train, dtype=bool)
    train = PatchDataset(rois_a[mask], targets_a[mask], "train", protos_a[mask])
    test = PatchDataset(rois_a[~mask], targets_a[~mask], "test", protos_a[~mask])
    return train, test


# ---------------------------------------------------------------------------
# Forward / backward over precomputed normalized-window features

_PARAM_NAMES = ("k1", "b1", "w2", "b2", "w3", "b3", "cw", "cb")


def model_to_weights(model: CenModel) -> dict[str, np.ndarray]:
    c1 = model.kernels.shape[0]
    return {
        "k1": model.kernels.reshape(c1, -1).copy(),
        "b1": model.bias1.copy(),
        "w2": model.w2.copy(),
        "b2": model.b2.copy(),
        "w3": model.w3.copy(),
        "b3": model.b3.copy(),
        "cw": model.combiner_w.copy(),
        "cb": np.array([model.combiner_b]),
    }


def weights_to_model(
    weights: dict[str, np.ndarray], landmark: int = 0, view: int = 0, scale_px: int = 30
) -> CenModel:
    c1 = weights["k1"].shape[0]
    return CenModel(
        kernels=weights["k1"].reshape(c1, KERNEL_SIZE, KERNEL_SIZE),
        bias1=weights["b1"],
        w2=weights["w2"],
        b2=weights["b2"],
        w3=weights["w3"],
        b3=weights["b3"],
        combiner_w=weights["cw"],
        combiner_b=float(weights["cb"][0]),
        landmark=landmark,
        view=view,
        scale_px=scale_px,
    )


def init_weights(
    arch: tuple[int, int, int], seed: int, base_rate: float = 0.1
) -> dict[str, np.ndarray]:
    """Seeded scaled-Gaussian initialization; combiner weights start positive.

    The final bias starts at the logit of ``base_rate`` (the typical mean of
    the label maps) so that early updates do not slam every combiner weight
    into the non-negativity clamp before the experts differentiate.
    """
    c1, c2, c3 = arch
    rng = np.random.default_rng([seed, 17])
    d = KERNEL_SIZE * KERNEL_SIZE
    base_rate = min(max(base_rate, 1e-3), 1.0 - 1e-3)
    cw = np.abs(rng.normal(0.0, np.sqrt(1.0 / c3), c3))
    return {
        "k1": rng.normal(0.0, 1.0 / np.sqrt(d), (c1, d)),
        "b1": np.zeros(c1),
        "w2": rng.normal(0.0, np.sqrt(2.0 / c1), (c2, c1)),
        "b2": np.zeros(c2),
        "w3": rng.normal(0.0, np.sqrt(2.0 / c2), (c3, c2)),
        "b3": np.zeros(c3),
        "cw": cw,
        "cb": np.array([np.log(base_rate / (1.0 - base_rate)) - 0.5 * cw.sum()]),
    }


def roi_features(rois: np.ndarray) -> np.ndarray:
    """Normalized-window features, shape (N, pixels, k*k)."""
    return np.stack([znorm_windows(r, KERNEL_SIZE, ZNORM_EPS) for r in rois])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_probs(weights: dict[str, np.ndarray], feats: np.ndarray) -> np.ndarray:
    """Per-pixel alignment probabilities for a feature batch (N, P, d)."""
    h1 = feats @ weights["k1"].T + weights["b1"]
    h2 = np.maximum(h1 @ weights["w2"].T + weights["b2"], 0.0)
    e = _sigmoid(h2 @ weights["w3"].T + weights["b3"])
    z = e @ weights["cw"] + weights["cb"][0]
    return _sigmoid(z)


def loss_on_batch(weights, feats, targets) -> float:
    """Mean per-pixel binary cross-entropy, computed stably from logits."""
    h1 = feats @ weights["k1"].T + weights["b1"]
    h2 = np.maximum(h1 @ weights["w2"].T + weights["b2"], 0.0)
    e = _sigmoid(h2 @ weights["w3"].T + weights["b3"])
    z = e @ weights["cw"] + weights["cb"][0]
    t = targets.reshape(z.shape)
    softplus = np.logaddexp(0.0, z)
    return float(np.mean(softplus - t * z))


def loss_and_gradients(weights, feats, targets):
    """Loss plus analytic gradients for every parameter array.

    ``feats`` is (N, P, d) normalized-window features, ``targets`` (N, P) or
    (N, g, g) ground-truth probabilities.
    """
    N, P, d = feats.shape
    t = targets.reshape(N, P)

    h1 = feats @ weights["k1"].T + weights["b1"]  # (N, P, c1)
    z2 = h1 @ weights["w2"].T + weights["b2"]
    h2 = np.maximum(z2, 0.0)
    z3 = h2 @ weights["w3"].T + weights["b3"]
    e = _sigmoid(z3)
    z4 = e @ weights["cw"] + weights["cb"][0]  # (N, P)
    p = _sigmoid(z4)

    loss = float(np.mean(np.logaddexp(0.0, z4) - t * z4))

    dz4 = (p - t) / (N * P)  # (N, P)
    grads = {}
    grads["cw"] = np.einsum("np,npc->c", dz4, e)
    grads["cb"] = np.array([dz4.sum()])
    de = dz4[:, :, None] * weights["cw"]
    dz3 = de * e * (1.0 - e)
    grads["w3"] = np.einsum("npc,npk->ck", dz3, h2)
    grads["b3"] = dz3.sum(axis=(0, 1))
    dh2 = dz3 @ weights["w3"]
    dz2 = dh2 * (z2 > 0)
    grads["w2"] = np.einsum("npc,npk->ck", dz2, h1)
    grads["b2"] = dz2.sum(axis=(0, 1))
    dh1 = dz2 @ weights["w2"]
    grads["k1"] = np.einsum("npc,npd->cd", dh1, feats)
    grads["b1"] = dh1.sum(axis=(0, 1))
    return loss, grads


@dataclass
class TrainResult:
    model: CenModel
    history: list[dict]  # per-epoch: epoch, train_loss, test_r2, test_rmse


def train_cen(
    data: PatchDataset,
    cfg: TrainConfig,
    arch: tuple[int, int, int] = DEFAULT_ARCH,
    test_data: PatchDataset | None = None,
    landmark: int = 0,
    view: int = 0,
    scale_px: int = 30,
) -> TrainResult:
    """Train one detector with Adam on mean per-pixel BCE.

    After every update, the combiner weights are projected onto the
    non-negative orthant when ``cfg.enforce_nonneg`` is set. Raises
    TrainingDivergedError if the loss becomes non-finite.
    """
    if len(data) == 0:
        raise ValueError("training split is empty")
    base_rate = float(np.mean(data.targets)) if data.targets.size else 0.1
    weights = init_weights(arch, cfg.seed, base_rate=base_rate)
    feats = roi_features(data.rois)
    targets = data.targets.reshape(len(data), -1)
    test_feats = test_targets = None
    if test_data is not None and len(test_data):
        test_feats = roi_features(test_data.rois)
        test_targets = test_data.targets.reshape(len(test_data), -1)

    m_state = {k: np.zeros_like(v) for k, v in weights.items()}
    v_state = {k: np.zeros_like(v) for k, v in weights.items()}
    step = 0
    rng = np.random.default_rng([cfg.seed, 29])
    history: list[dict] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for start in range(0, len(data), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(weights, feats[batch], targets[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            step += 1
            bc1 = 1.0 - ADAM_BETA1**step
            bc2 = 1.0 - ADAM_BETA2**step
            for k in _PARAM_NAMES:
                m_state[k] = ADAM_BETA1 * m_state[k] + (1 - ADAM_BETA1) * grads[k]
                v_state[k] = ADAM_BETA2 * v_state[k] + (1 - ADAM_BETA2) * grads[k] ** 2
                weights[k] = weights[k] - cfg.learning_rate * (m_state[k] / bc1) / (
                    np.sqrt(v_state[k] / bc2) + ADAM_EPS
                )
            if cfg.enforce_nonneg:
                np.maximum(weights["cw"], 0.0, out=weights["cw"])
            epoch_losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        if test_feats is not None:
            r2, rmse = _r2_rmse(forward_probs(weights, test_feats), test_targets)
            row["test_r2"] = r2
            row["test_rmse"] = rmse
        history.append(row)

    model = weights_to_model(weights, landmark, view, scale_px)
    return TrainResult(model=model, history=history)


def _r2_rmse(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    p = pred.reshape(-1)
    t = truth.reshape(-1)
    rmse = float(np.sqrt(np.mean((p - t) ** 2)))
    sp = p.std()
    st = t.std()
    if sp == 0.0 or st == 0.0:
        return 0.0, rmse
    r = float(np.mean((p - p.mean()) * (t - t.mean())) / (sp * st))
    return r * r, rmse


def evaluate_detector(model: CenModel, data: PatchDataset) -> tuple[float, float]:
    """Squared Pearson correlation and RMSE of predicted vs. true maps.

    Predictions with zero variance define r^2 as 0.
    """
    if len(data) == 0:
        raise ValueError("evaluation split is empty")
    weights = model_to_weights(model)
    preds = forward_probs(weights, roi_features(data.rois))
    return _r2_rmse(preds, data.targets.reshape(len(data), -1))


def reliability_floor(r2: float, floor: float = 1e-3) -> float:
    """Detector accuracy for the fit weighting; kept strictly positive."""
    return max(float(r2), floor)


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w") as f:
        f.write("epoch,train_loss,test_r2,test_rmse\n")
        for row in history:
            r2 = row.get("test_r2", "")
            rmse = row.get("test_rmse", "")
            f.write(
                f"{row['epoch']},{row['train_loss']!r},"
                f"{'' if r2 == '' else repr(r2)},{'' if rmse == '' else repr(rmse)}\n"
            )
