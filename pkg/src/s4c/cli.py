"""Command-line entry point wiring the whole pipeline together.

Machine-readable JSON goes to stdout, logs to stderr.  Exit codes: 1 for
usage errors, 2 for data errors, 3 for numerical failures.  Every
subcommand is reproducible under a fixed seed with ``--threads 1``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from .clsnet import (
    ClsConfig,
    is_abnormal,
    load_head,
    predict_case_probability,
    save_head,
    train_cls,
)
from .errors import DataError, NumericalError, S4CError
from .evaluation import (
    cross_validate,
    evaluate_predictions,
    fused_table,
    phase_table,
)
from .inference import DEFAULT_STRIDE, predict_volume
from .phantom import generate_dataset
from .postclassify import classify_phase, fuse_phases
from .segnet import SegNetConfig, load_model, save_model, train
from .volume import (
    PHASES,
    load_manifest,
    read_mask,
    read_volume,
    write_mask,
)

log = logging.getLogger("s4c.cli")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


@dataclasses.dataclass
class RunConfig:
    """One JSON document holding every tunable: network configs plus
    pipeline flags.  Unknown keys are rejected."""

    segnet: SegNetConfig = dataclasses.field(default_factory=SegNetConfig)
    clsnet: ClsConfig = dataclasses.field(default_factory=ClsConfig)
    stride: int = DEFAULT_STRIDE
    connectivity: int = 26
    tumor_threshold: int = 40
    duct_threshold: int = 500
    seed: int = 0
    threads: int | None = None


def _build_section(cls, doc: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise DataError(f"config section {name!r} has unknown keys: {sorted(unknown)}")
    if "loss_weights" in doc:
        doc["loss_weights"] = tuple(doc["loss_weights"])
    if "head_channels" in doc:
        doc["head_channels"] = tuple(doc["head_channels"])
    return cls(**doc)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise DataError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable config {path}: {e}") from e
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise DataError(f"config {path} has unknown keys: {sorted(unknown)}")
    cfg = RunConfig(
        segnet=_build_section(SegNetConfig, doc.get("segnet", {}), "segnet"),
        clsnet=_build_section(ClsConfig, doc.get("clsnet", {}), "clsnet"),
    )
    for key in ("stride", "connectivity", "tumor_threshold", "duct_threshold", "seed", "threads"):
        if key in doc:
            setattr(cfg, key, doc[key])
    return cfg


def _setup_threads(args) -> None:
    n = getattr(args, "threads", None)
    if n is None:
        env = os.environ.get("S4C_THREADS")
        n = int(env) if env else None
    if n is None:
        n = os.cpu_count() or 1
    torch.set_num_threads(int(n))


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=1)
    sys.stdout.write("\n")


def _parse_dims(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise DataError(f"--dims wants one or three integers, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    man = generate_dataset(
        n_normal=args.normal, n_abnormal=args.abnormal, dims=_parse_dims(args.dims),
        seed=args.seed, difficulty=args.difficulty, out_dir=args.out,
    )
    _emit({
        "manifest": os.path.join(args.out, "manifest.json"),
        "cases": len(man.entries),
        "n_abnormal": sum(e.label for e in man.entries),
    })
    return 0


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seg_cfg = cfg.segnet
    if args.seed is not None:
        seg_cfg = dataclasses.replace(seg_cfg, seed=args.seed)
    man = load_manifest(args.manifest)
    model, state = train(man, args.phase, seg_cfg)
    save_model(model, args.out)
    _emit({
        "model": args.out,
        "iterations": state.iteration,
        "final_loss": state.loss_history[-1] if state.loss_history else None,
    })
    return 0


def _cmd_infer(args) -> int:
    model = load_model(args.model)
    vol_path = os.path.join(args.case_dir, f"{args.phase}.raw")
    volume = read_volume(vol_path)
    mask = predict_volume(model, volume, stride=args.stride)
    write_mask(mask, args.out)
    _emit({
        "mask": args.out,
        "voxels": {str(c): int((mask.labels == c).sum()) for c in range(4)},
    })
    return 0


def _cmd_classify(args) -> int:
    decisions = {}
    first = classify_phase(
        read_mask(args.mask), tumor_threshold=args.tumor_thresh,
        duct_threshold=args.duct_thresh, connectivity=args.connectivity,
    )
    decisions["phase1"] = first
    if args.mask2:
        decisions["phase2"] = classify_phase(
            read_mask(args.mask2), tumor_threshold=args.tumor_thresh,
            duct_threshold=args.duct_thresh, connectivity=args.connectivity,
        )
    _emit(fuse_phases(decisions).to_json_dict())
    return 0


def _cmd_eval(args) -> int:
    man = load_manifest(args.manifest)
    rep = evaluate_predictions(
        man, args.pred_dir, tumor_threshold=args.tumor_thresh,
        duct_threshold=args.duct_thresh, connectivity=args.connectivity,
    )
    if args.emit_table:
        sys.stderr.write(phase_table(rep.per_phase) + "\n")
        sys.stderr.write(fused_table([("s4c fused", rep.fused)]) + "\n")
    _emit(rep.to_json_dict())
    return 0


def _cmd_cv(args) -> int:
    cfg = load_run_config(args.config)
    seg_cfg = cfg.segnet
    if args.seed is not None:
        seg_cfg = dataclasses.replace(seg_cfg, seed=args.seed)
    man = load_manifest(args.manifest)
    rep = cross_validate(
        man, seg_cfg, mode=args.mode, cls_config=cfg.clsnet,
        k=args.k, seed=args.seed if args.seed is not None else cfg.seed,
        stride=cfg.stride, tumor_threshold=cfg.tumor_threshold,
        duct_threshold=cfg.duct_threshold, connectivity=cfg.connectivity,
        out_dir=args.workdir,
    )
    if args.emit_table:
        sys.stderr.write(phase_table(rep.per_phase) + "\n")
        sys.stderr.write(fused_table([(f"{args.mode} fused", rep.fused)]) + "\n")
    doc = rep.to_json_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    _emit(doc)
    return 0


def _cmd_train_cls(args) -> int:
    cfg = load_run_config(args.config)
    seg = load_model(args.segmodel)
    man = load_manifest(args.manifest)
    cls_cfg = cfg.clsnet
    if args.seed is not None:
        cls_cfg = dataclasses.replace(cls_cfg, seed=args.seed)
    head, history = train_cls(man, args.phase, seg, cls_cfg)
    save_head(head, 4 * seg.config.base_channels, args.out)
    _emit({
        "classifier": args.out,
        "iterations": len(history),
        "final_loss": history[-1] if history else None,
    })
    return 0


def _cmd_infer_cls(args) -> int:
    seg = load_model(args.segmodel)
    head, _ = load_head(args.clsmodel)
    volume = read_volume(os.path.join(args.case_dir, f"{args.phase}.raw"))
    pred_mask = read_mask(args.mask) if args.mask else predict_volume(seg, volume, stride=args.stride)
    p = predict_case_probability(head, seg, volume, pred_mask, head.config)
    _emit({
        "phase": args.phase,
        "abnormal_probability": p,
        "verdict": "abnormal" if is_abnormal(p) else "normal",
    })
    return 0


def _cmd_run(args) -> int:
    models = {}
    if args.model_arterial:
        models["arterial"] = load_model(args.model_arterial)
    if args.model_venous:
        models["venous"] = load_model(args.model_venous)
    if not models:
        raise DataError("run needs --model-arterial and/or --model-venous")
    decisions = {}
    voxel_counts = {}
    for phase, model in models.items():
        vol_path = os.path.join(args.case_dir, f"{phase}.raw")
        if not os.path.exists(vol_path):
            raise DataError(f"case dir {args.case_dir} has no {phase}.raw")
        volume = read_volume(vol_path)
        mask = predict_volume(model, volume, stride=args.stride)
        if args.out_dir:
            os.makedirs(args.out_dir, exist_ok=True)
            write_mask(mask, os.path.join(args.out_dir, f"{phase}_mask.raw"))
        decisions[phase] = classify_phase(
            mask, tumor_threshold=args.tumor_thresh,
            duct_threshold=args.duct_thresh, connectivity=args.connectivity,
        )
        voxel_counts[phase] = {str(c): int((mask.labels == c).sum()) for c in range(4)}
    fused = fuse_phases(decisions)
    doc = fused.to_json_dict()
    doc["voxel_counts"] = voxel_counts
    _emit(doc)
    return 0


_CLASS_COLORS = {1: (60, 80, 255), 2: (255, 40, 40), 3: (40, 220, 60)}


def _cmd_overlay(args) -> int:
    volume = read_volume(os.path.join(args.case_dir, f"{args.phase}.raw"))
    mask = read_mask(args.mask)
    if mask.dims != volume.dims:
        raise DataError(f"mask dims {mask.dims} do not match volume dims {volume.dims}")
    os.makedirs(args.out, exist_ok=True)
    hu = volume.data.astype(np.float64)
    lo, hi = np.percentile(hu, 1.0), np.percentile(hu, 99.0)
    gray = np.clip((hu - lo) / max(hi - lo, 1e-6) * 255.0, 0, 255).astype(np.uint8)
    w, h, l = volume.dims
    written = []
    for z in range(l):
        rgb = np.stack([gray[:, :, z]] * 3, axis=-1)
        for cls, color in _CLASS_COLORS.items():
            rgb[mask.labels[:, :, z] == cls] = color
        # pixmap rows scan y, columns scan x
        img = rgb.transpose(1, 0, 2)
        path = os.path.join(args.out, f"slice_{z:03d}.ppm")
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(img.tobytes())
        written.append(path)
    _emit({"slices": len(written), "out": args.out})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="s4c", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="torch thread count (default: all cores, env S4C_THREADS)")
        sp.add_argument("--config", default=None, help="RunConfig JSON file")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")

    sp = sub.add_parser("gen", help="generate a phantom dataset")
    sp.add_argument("--normal", type=int, required=True)
    sp.add_argument("--abnormal", type=int, required=True)
    sp.add_argument("--dims", default="64", help="voxels per axis, e.g. 64 or 64,64,48")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--difficulty", choices=["easy", "hard"], default="easy")
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_gen)

    sp = sub.add_parser("train", help="train the segmentation network on one phase")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--phase", choices=list(PHASES), required=True)
    sp.add_argument("--out", required=True)
    add_common(sp)
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("infer", help="predict a dense mask for one case phase")
    sp.add_argument("--model", required=True)
    sp.add_argument("--case-dir", required=True)
    sp.add_argument("--phase", choices=list(PHASES), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_infer)

    sp = sub.add_parser("classify", help="rule-based abnormality call from masks")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--mask2", default=None, help="other-phase mask for fusion")
    sp.add_argument("--connectivity", type=int, choices=[6, 26], default=26)
    sp.add_argument("--tumor-thresh", type=int, default=40)
    sp.add_argument("--duct-thresh", type=int, default=500)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_classify)

    sp = sub.add_parser("eval", help="evaluate stored prediction masks")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--connectivity", type=int, choices=[6, 26], default=26)
    sp.add_argument("--tumor-thresh", type=int, default=40)
    sp.add_argument("--duct-thresh", type=int, default=500)
    sp.add_argument("--emit-table", action="store_true")
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("cv", help="cross-validated training and evaluation")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", choices=["s4c", "clsnet"], default="s4c")
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--out", default=None, help="write the report JSON here too")
    sp.add_argument("--workdir", default=None,
                    help="cache fold models/predictions here (resumable)")
    sp.add_argument("--emit-table", action="store_true")
    add_common(sp)
    sp.set_defaults(fn=_cmd_cv)

    sp = sub.add_parser("train-cls", help="train the classification head")
    sp.add_argument("--segmodel", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--phase", choices=list(PHASES), required=True)
    sp.add_argument("--out", required=True)
    add_common(sp)
    sp.set_defaults(fn=_cmd_train_cls)

    sp = sub.add_parser("infer-cls", help="classify one case phase with the head")
    sp.add_argument("--clsmodel", required=True)
    sp.add_argument("--segmodel", required=True)
    sp.add_argument("--case-dir", required=True)
    sp.add_argument("--phase", choices=list(PHASES), required=True)
    sp.add_argument("--mask", default=None, help="precomputed segmentation mask for the ROI")
    sp.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_infer_cls)

    sp = sub.add_parser("run", help="segment, classify, and fuse one case end to end")
    sp.add_argument("--case-dir", required=True)
    sp.add_argument("--model-arterial", default=None)
    sp.add_argument("--model-venous", default=None)
    sp.add_argument("--out-dir", default=None, help="write predicted masks here")
    sp.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    sp.add_argument("--connectivity", type=int, choices=[6, 26], default=26)
    sp.add_argument("--tumor-thresh", type=int, default=40)
    sp.add_argument("--duct-thresh", type=int, default=500)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_run)

    sp = sub.add_parser("overlay", help="write color-coded slice pixmaps")
    sp.add_argument("--case-dir", required=True)
    sp.add_argument("--phase", choices=list(PHASES), required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_overlay)

    return p


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _setup_threads(args)
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except DataError as e:
        sys.stderr.write(f"data error: {e}\n")
        return 2
    except NumericalError as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return 3
    except S4CError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
