"""Command-line entry point: fit, synth, train, eval.

Exit codes: 0 success, 2 low-confidence fit, 3 I/O failure, 4 validation
failure, 5 numerical failure. All subcommands are deterministic under a
fixed --seed with --threads 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from clmfit import metrics, model_io, nurlms, pdm, synth, trainer
from clmfit.errors import (
    BankConfigError,
    ModelFormatError,
    SingularSystemError,
    TrainingDivergedError,
)

EXIT_OK = 0
EXIT_LOW_CONFIDENCE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERICAL = 5

log = logging.getLogger("clmfit.cli")


class _ValidationError(Exception):
    pass


def _parse_bbox(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise _ValidationError(f"--bbox expects x,y,w,h but got {text!r}")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise _ValidationError(f"--bbox has a non-numeric field in {text!r}")
    if w <= 0 or h <= 0:
        raise _ValidationError(f"--bbox width and height must be positive, got {text!r}")
    return x, y, w, h


def cmd_fit(args) -> int:
    model = model_io.load_pdm(args.pdm)
    bank = model_io.load_bank(args.bank, allow_negative_combiner=args.allow_ablation)
    bank.validate_for(model.n_landmarks)
    image = synth.read_pgm(args.image)
    bbox = _parse_bbox(args.bbox)
    cfg = model_io.load_config(args.config) if args.config else nurlms.NurlmsConfig()
    reliab_path = Path(args.bank) / "reliability.json" if Path(args.bank).is_dir() else None
    if reliab_path is not None and reliab_path.exists():
        reliab = model_io.load_reliability(reliab_path)
    else:
        reliab = nurlms.LandmarkReliability.uniform(model.n_landmarks)
    result = nurlms.multi_hypothesis_fit(
        model,
        bank,
        image,
        bbox,
        cfg,
        reliab=reliab,
        threads=args.threads,
        exhaustive=args.exhaustive,
    )
    result.save_csv(args.out)
    log.info(
        "fit: score=%.4f hypotheses=%d/%d accepted=%s",
        result.map_score,
        result.hypotheses_completed,
        result.hypotheses_started,
        result.accepted,
    )
    return EXIT_OK if result.accepted else EXIT_LOW_CONFIDENCE


def cmd_synth(args) -> int:
    model = model_io.load_pdm(args.pdm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = (args.width, args.height)
    seeds = np.random.SeedSequence(args.seed).spawn(args.count)
    for k in range(args.count):
        rng = np.random.default_rng(seeds[k])
        params = synth.random_scene_params(
            model, size, rng, yaw_range=args.yaw_range, pitch_range=0.1, roll_range=0.1
        )
        scene = synth.render_scene(model, params, size, seed=int(seeds[k].generate_state(1)[0]))
        synth.save_scene(scene, out / f"scene_{k:03d}.pgm", out / f"scene_{k:03d}.json")
    log.info("synth: wrote %d scenes to %s", args.count, out)
    return EXIT_OK


def _parse_arch(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise _ValidationError(f"--arch expects c1,c2,c3 but got {text!r}")
    try:
        c1, c2, c3 = (int(p) for p in parts)
    except ValueError:
        raise _ValidationError(f"--arch has a non-integer field in {text!r}")
    if min(c1, c2, c3) < 1:
        raise _ValidationError("--arch channel counts must be positive")
    return c1, c2, c3


def _load_scenes(data_dir: Path):
    sidecars = sorted(data_dir.glob("*.json"))
    scenes = []
    for sc_path in sidecars:
        img_path = sc_path.with_suffix(".pgm")
        if not img_path.exists():
            continue
        data = synth.load_sidecar(sc_path)
        image = synth.read_pgm(img_path)
        landmarks = synth.sidecar_landmarks(data)
        eye = data.get("eye_indices")
        scenes.append(
            synth.SyntheticScene(
                image,
                synth.sidecar_params(data),
                landmarks,
                np.asarray(data["prototype_ids"], dtype=int),
                eye_indices=tuple(eye) if eye else None,
            )
        )
    if not scenes:
        raise _ValidationError(f"no scene (.pgm + .json) pairs found in {data_dir}")
    return scenes


def cmd_train(args) -> int:
    scenes = _load_scenes(Path(args.data))
    cfg = trainer.TrainConfig.toy(
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        enforce_nonneg=not args.no_nonneg,
    )
    train_ds, test_ds = trainer.dataset_from_scenes(scenes, cfg)
    # The detector's native scale is the interocular distance it saw in training.
    iods = [
        np.linalg.norm(s.true_landmarks.points[s.eye_indices[0]]
                       - s.true_landmarks.points[s.eye_indices[1]])
        for s in scenes
        if s.eye_indices is not None
    ]
    scale_px = int(round(float(np.mean(iods)))) if iods else 30
    arch = _parse_arch(args.arch)
    result = trainer.train_cen(train_ds, cfg, arch=arch, test_data=test_ds, scale_px=scale_px)
    eval_ds = test_ds if len(test_ds) else train_ds
    r2, rmse = trainer.evaluate_detector(result.model, eval_ds)
    model_io.save_cen(result.model, args.out)
    trainer.write_loss_csv(result.history, Path(args.out).with_suffix(".loss.csv"))
    print(f"r2={r2!r} rmse={rmse!r}")
    return EXIT_OK


def _collect_pairs(pred_arg: str, truth_arg: str):
    pred_p, truth_p = Path(pred_arg), Path(truth_arg)
    if pred_p.is_dir() != truth_p.is_dir():
        raise _ValidationError("--pred and --truth must both be files or both be directories")
    if not pred_p.is_dir():
        return [(pred_p, truth_p)]
    pairs = []
    for pred_file in sorted(pred_p.glob("*.csv")):
        truth_file = truth_p / (pred_file.stem + ".json")
        if not truth_file.exists():
            raise FileNotFoundError(f"no ground truth for {pred_file.name}")
        pairs.append((pred_file, truth_file))
    if not pairs:
        raise _ValidationError(f"no prediction CSVs found in {pred_p}")
    return pairs


def cmd_eval(args) -> int:
    if args.self_check:
        return _eval_self_check(args)
    pairs = _collect_pairs(args.pred, args.truth)
    errors = []
    for pred_file, truth_file in pairs:
        pred = nurlms.landmarks_from_csv(pred_file)
        data = synth.load_sidecar(truth_file)
        truth = synth.sidecar_landmarks(data)
        eye = data.get("eye_indices")
        errors.append(
            metrics.normalized_error(
                pred, truth, mode=args.mode, eye_indices=tuple(eye) if eye else None
            )
        )
    median = float(np.median(errors))
    print(f"median={median!r}")
    if args.curve:
        thresholds = np.linspace(0.0, args.curve_max, 51)
        metrics.write_curve_csv(metrics.cumulative_curve(errors, thresholds), args.curve)
    return EXIT_OK


def _eval_self_check(args) -> int:
    """Re-derive each sidecar's landmarks from its parameters and compare."""
    if not args.pdm:
        raise _ValidationError("--self-check requires --pdm")
    model = model_io.load_pdm(args.pdm)
    truth_p = Path(args.truth)
    files = sorted(truth_p.glob("*.json")) if truth_p.is_dir() else [truth_p]
    failures = 0
    for path in files:
        data = synth.load_sidecar(path)
        params = synth.sidecar_params(data)
        stored = synth.sidecar_landmarks(data).points
        derived = pdm.shape_from_params(model, params).points
        ok = stored.shape == derived.shape and np.allclose(stored, derived, atol=1e-9)
        print(f"{path.name}: {'ok' if ok else 'MISMATCH'}")
        if not ok:
            failures += 1
    return EXIT_OK if failures == 0 else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clmfit", description="Landmark fitting with convolutional patch experts"
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit landmarks to one image")
    p_fit.add_argument("--pdm", required=True)
    p_fit.add_argument("--bank", required=True, help="bank directory or single detector JSON")
    p_fit.add_argument("--image", required=True, help="input image (binary PGM)")
    p_fit.add_argument("--bbox", required=True, help="face box as x,y,w,h")
    p_fit.add_argument("--out", required=True, help="output landmark CSV")
    p_fit.add_argument("--config", help="JSON of fit-config overrides")
    p_fit.add_argument("--exhaustive", action="store_true",
                       help="evaluate every hypothesis (disables early stopping)")
    p_fit.add_argument("--allow-ablation", action="store_true",
                       help="accept detectors with negative combiner weights")
    p_fit.set_defaults(func=cmd_fit)

    p_synth = sub.add_parser("synth", help="generate synthetic scenes")
    p_synth.add_argument("--pdm", required=True)
    p_synth.add_argument("--count", type=int, required=True)
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--width", type=int, default=128)
    p_synth.add_argument("--height", type=int, default=128)
    p_synth.add_argument("--yaw-range", type=float, default=0.1)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a toy detector on synthetic scenes")
    p_train.add_argument("--data", required=True, help="directory of scenes from `synth`")
    p_train.add_argument("--arch", default="16,8,6", help="channel counts c1,c2,c3")
    p_train.add_argument("--out", required=True, help="output detector JSON")
    p_train.add_argument("--no-nonneg", action="store_true",
                         help="drop the non-negative combiner constraint (ablation)")
    p_train.add_argument("--epochs", type=int, default=20)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--learning-rate", type=float, default=5e-4)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", help="prediction CSV or directory of CSVs")
    p_eval.add_argument("--truth", required=True, help="sidecar JSON or directory")
    p_eval.add_argument("--mode", choices=[metrics.IOD, metrics.FACE_SIZE],
                        default=metrics.IOD)
    p_eval.add_argument("--curve", help="write a cumulative error curve CSV here")
    p_eval.add_argument("--curve-max", type=float, default=0.1)
    p_eval.add_argument("--self-check", action="store_true",
                        help="validate sidecar landmarks against their parameters")
    p_eval.add_argument("--pdm", help="shape model (required for --self-check)")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("CLMFIT_LOG", "DEBUG" if args.verbose else "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s: %(message)s")
    if args.command == "eval" and not args.self_check and not args.pred:
        print("error: --pred is required unless --self-check is set", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except _ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ModelFormatError, BankConfigError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SingularSystemError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
