"""Metrics and the 4-fold cross-validated evaluation harness.

Segmentation quality is the Dice-Sorensen coefficient; the pancreas score
uses the whole organ set (classes {1,2,3}), reported separately over
normal and abnormal cases, and the tumor score uses class 2 over abnormal
cases (case means).  Classification quality is sensitivity/specificity
derived from pooled per-case outcomes across all test folds (pool first,
then compute, so every case counts once).  Percentages are displayed with
two decimals, half-up, exactly as rational arithmetic dictates.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .clsnet import ClsConfig, predict_case_probability, is_abnormal, train_cls
from .errors import DataError
from .inference import DEFAULT_STRIDE, predict_volume
from .postclassify import classify_phase
from .prng import Prng
from .segnet import SegModel, SegNetConfig, load_model, save_model, train
from .volume import (
    CLASS_TUMOR,
    DatasetManifest,
    LabelMask,
    load_case,
    read_mask,
    write_mask,
)

log = logging.getLogger("s4c.evaluation")

PANCREAS_SET_CLASSES = (1, 2, 3)


def dsc(pred, truth) -> float:
    """Dice-Sorensen coefficient 2|A(intersect)B| / (|A|+|B|).

    Accepts boolean arrays or sets of coordinates; two empty sets score 1.0
    (nothing to find, nothing found).
    """
    if isinstance(pred, (set, frozenset)) or isinstance(truth, (set, frozenset)):
        a, b = set(pred), set(truth)
        inter, na, nb = len(a & b), len(a), len(b)
    else:
        a = np.asarray(pred, dtype=bool)
        b = np.asarray(truth, dtype=bool)
        if a.shape != b.shape:
            raise DataError(f"dsc shape mismatch {a.shape} vs {b.shape}")
        inter, na, nb = int((a & b).sum()), int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def mask_dsc_scores(pred: LabelMask, truth: LabelMask) -> tuple[float, float]:
    """(pancreas-set DSC, tumor DSC) between predicted and truth masks."""
    p, t = pred.labels, truth.labels
    pancreas = dsc(np.isin(p, PANCREAS_SET_CLASSES), np.isin(t, PANCREAS_SET_CLASSES))
    tumor = dsc(p == CLASS_TUMOR, t == CLASS_TUMOR)
    return pancreas, tumor


def percent_display(numerator: int, denominator: int) -> str | None:
    """Exact two-decimal half-up percentage string, e.g. 204/228 -> '89.47'."""
    if denominator == 0:
        return None
    val = Decimal(numerator * 100) / Decimal(denominator)
    return str(val.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class CaseOutcome:
    case_id: str
    label: int
    predicted_abnormal: bool
    pancreas_dsc: float | None = None
    tumor_dsc: float | None = None


@dataclass
class EvalReport:
    n_normal: int
    n_abnormal: int
    misses: int
    wrong_calls: int
    sensitivity: float | None
    specificity: float | None
    sensitivity_pct: str | None
    specificity_pct: str | None
    normal_pancreas_dsc: float | None
    abnormal_pancreas_dsc: float | None
    tumor_dsc: float | None
    per_case: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float | None:
        n = self.n_normal + self.n_abnormal
        if n == 0:
            return None
        correct = (self.n_abnormal - self.misses) + (self.n_normal - self.wrong_calls)
        return correct / n

    def to_json_dict(self) -> dict:
        return {
            "n_normal": self.n_normal,
            "n_abnormal": self.n_abnormal,
            "misses": self.misses,
            "wrong_calls": self.wrong_calls,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "sensitivity_pct": self.sensitivity_pct,
            "specificity_pct": self.specificity_pct,
            "accuracy": self.accuracy,
            "normal_pancreas_dsc": self.normal_pancreas_dsc,
            "abnormal_pancreas_dsc": self.abnormal_pancreas_dsc,
            "tumor_dsc": self.tumor_dsc,
            "per_case": self.per_case,
        }


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def evaluate(outcomes: list[CaseOutcome]) -> EvalReport:
    """Pooled report over per-case outcomes.

    A rate whose class is absent is reported as None, never as 0.
    """
    ids = [o.case_id for o in outcomes]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate case in outcomes")
    normals = [o for o in outcomes if o.label == 0]
    abnormals = [o for o in outcomes if o.label == 1]
    misses = sum(not o.predicted_abnormal for o in abnormals)
    wrong = sum(o.predicted_abnormal for o in normals)
    n_n, n_a = len(normals), len(abnormals)
    return EvalReport(
        n_normal=n_n,
        n_abnormal=n_a,
        misses=misses,
        wrong_calls=wrong,
        sensitivity=(n_a - misses) / n_a if n_a else None,
        specificity=(n_n - wrong) / n_n if n_n else None,
        sensitivity_pct=percent_display(n_a - misses, n_a),
        specificity_pct=percent_display(n_n - wrong, n_n),
        normal_pancreas_dsc=_mean_or_none(
            [o.pancreas_dsc for o in normals if o.pancreas_dsc is not None]
        ),
        abnormal_pancreas_dsc=_mean_or_none(
            [o.pancreas_dsc for o in abnormals if o.pancreas_dsc is not None]
        ),
        tumor_dsc=_mean_or_none(
            [o.tumor_dsc for o in abnormals if o.tumor_dsc is not None]
        ),
        per_case=[
            {
                "case_id": o.case_id,
                "label": o.label,
                "predicted_abnormal": o.predicted_abnormal,
                "pancreas_dsc": o.pancreas_dsc,
                "tumor_dsc": o.tumor_dsc,
            }
            for o in outcomes
        ],
    )


def make_folds(manifest: DatasetManifest, k: int = 4, seed: int = 0):
    """Label-stratified k-fold split; returns [(train_ids, test_ids), ...].

    Every case lands in exactly one test fold, per-fold class counts differ
    by at most one from perfect stratification, and the split is a pure
    function of (manifest order, k, seed).
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    normals = [e.case_id for e in manifest.entries if e.label == 0]
    abnormals = [e.case_id for e in manifest.entries if e.label == 1]
    if len(normals) < k or len(abnormals) < k:
        raise DataError(
            f"need at least k={k} cases of each label, have {len(normals)} normal"
            f" and {len(abnormals)} abnormal"
        )
    rng = Prng(seed, 0xF07D)
    normals = rng.shuffled(normals)
    abnormals = rng.shuffled(abnormals)

    def chunks(ids: list[str]) -> list[list[str]]:
        base, extra = divmod(len(ids), k)
        out, pos = [], 0
        for i in range(k):
            size = base + (1 if i < extra else 0)
            out.append(ids[pos : pos + size])
            pos += size
        return out

    n_chunks, a_chunks = chunks(normals), chunks(abnormals)
    folds = []
    for i in range(k):
        test = sorted(n_chunks[i] + a_chunks[i])
        train = sorted(set(manifest.case_ids) - set(test))
        folds.append((train, test))
    return folds


@dataclass
class CrossValReport:
    mode: str
    k: int
    per_phase: dict[str, EvalReport]
    fused: EvalReport
    fold_tests: list[list[str]]

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "per_phase": {t: r.to_json_dict() for t, r in self.per_phase.items()},
            "fused": self.fused.to_json_dict(),
            "fold_tests": self.fold_tests,
        }


def _fold_seed(base_seed: int, phase: str, fold: int) -> int:
    phase_idx = {"arterial": 1, "venous": 2}[phase]
    return int(Prng(base_seed, 0xCF, phase_idx, fold).u64(1)[0] >> 1)


def _seg_model_for_fold(
    manifest, phase, fold, train_ids, seg_config: SegNetConfig, out_dir: str | None
) -> SegModel:
    path = os.path.join(out_dir, "models", f"{phase}_fold{fold}.bin") if out_dir else None
    if path and os.path.exists(path):
        log.info("fold %d %s: loading cached model %s", fold, phase, path)
        return load_model(path)
    cfg = replace(seg_config, seed=_fold_seed(seg_config.seed, phase, fold))
    t0 = time.time()
    model, state = train(manifest, phase, cfg, case_ids=train_ids)
    log.info(
        "fold %d %s: trained %d iters in %.1fs (last-100 mean loss %.4f)",
        fold, phase, state.iteration, time.time() - t0,
        float(np.mean(state.loss_history[-100:])) if state.loss_history else float("nan"),
    )
    if path:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_model(model, path)
    return model


def _predict_case_mask(
    model, manifest, case_id, phase, stride, out_dir
) -> LabelMask | None:
    entry = manifest.entry(case_id)
    files = entry.phase_files.get(phase)
    if files is None:
        return None
    path = (
        os.path.join(out_dir, "predictions", f"{case_id}_{phase}_mask.raw")
        if out_dir
        else None
    )
    if path and os.path.exists(path):
        return read_mask(path)
    case = load_case(manifest, case_id)
    pred = predict_volume(model, case.phases[phase].volume, stride=stride)
    if path:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_mask(pred, path)
    return pred


def cross_validate(
    manifest: DatasetManifest,
    seg_config: SegNetConfig,
    mode: str = "s4c",
    cls_config: ClsConfig | None = None,
    k: int = 4,
    seed: int = 0,
    phases: tuple[str, ...] = ("arterial", "venous"),
    stride: int = DEFAULT_STRIDE,
    tumor_threshold: int = 40,
    duct_threshold: int = 500,
    connectivity: int = 26,
    out_dir: str | None = None,
) -> CrossValReport:
    """Train per fold and phase, evaluate on the fold's test cases, pool.

    mode "s4c": segmentation -> retention rules -> per-phase verdicts; the
    fused verdict is the OR over phases.  mode "clsnet": the classification
    head over encoder features (ROI from the fold model's own prediction at
    test time); fused by the same OR rule for comparability.  When
    `out_dir` is set, fold models and predicted masks are cached there and
    reused if present, so an interrupted run resumes.
    """
    if mode not in ("s4c", "clsnet"):
        raise DataError(f"mode must be s4c or clsnet, got {mode!r}")
    folds = make_folds(manifest, k=k, seed=seed)
    phase_outcomes: dict[str, list[CaseOutcome]] = {p: [] for p in phases}
    fused_outcomes: list[CaseOutcome] = []
    for fold, (train_ids, test_ids) in enumerate(folds):
        fold_verdicts: dict[str, dict[str, bool]] = {cid: {} for cid in test_ids}
        for phase in phases:
            model = _seg_model_for_fold(manifest, phase, fold, train_ids, seg_config, out_dir)
            head = None
            if mode == "clsnet":
                ccfg = replace(
                    cls_config or ClsConfig(),
                    seed=_fold_seed((cls_config or ClsConfig()).seed, phase, fold),
                )
                head, _ = train_cls(manifest, phase, model, ccfg, case_ids=train_ids)
            for cid in test_ids:
                case = load_case(manifest, cid)
                ph = case.phases.get(phase)
                if ph is None:
                    continue
                pred = _predict_case_mask(model, manifest, cid, phase, stride, out_dir)
                pancreas_score = tumor_score = None
                if ph.mask is not None and pred is not None:
                    pancreas_score, tumor_score = mask_dsc_scores(pred, ph.mask)
                if mode == "s4c":
                    decision = classify_phase(
                        pred, tumor_threshold=tumor_threshold,
                        duct_threshold=duct_threshold, connectivity=connectivity,
                    )
                    abnormal = decision.abnormal
                else:
                    prob = predict_case_probability(
                        head, model, ph.volume, pred, cls_config or ClsConfig()
                    )
                    abnormal = is_abnormal(prob)
                fold_verdicts[cid][phase] = abnormal
                phase_outcomes[phase].append(
                    CaseOutcome(
                        case_id=cid, label=case.label, predicted_abnormal=abnormal,
                        pancreas_dsc=pancreas_score, tumor_dsc=tumor_score,
                    )
                )
        for cid in test_ids:
            verdicts = fold_verdicts[cid]
            if not verdicts:
                continue
            label = manifest.entry(cid).label
            fused_outcomes.append(
                CaseOutcome(
                    case_id=cid, label=label,
                    predicted_abnormal=any(verdicts.values()),
                )
            )
        log.info("fold %d/%d done (%s)", fold + 1, len(folds), mode)
    report = CrossValReport(
        mode=mode,
        k=k,
        per_phase={p: evaluate(phase_outcomes[p]) for p in phases},
        fused=evaluate(fused_outcomes),
        fold_tests=[test for _, test in folds],
    )
    return report


def evaluate_predictions(
    manifest: DatasetManifest,
    pred_dir: str,
    phases: tuple[str, ...] = ("arterial", "venous"),
    tumor_threshold: int = 40,
    duct_threshold: int = 500,
    connectivity: int = 26,
) -> CrossValReport:
    """Rule-based evaluation of already-written prediction masks.

    Expects `pred_dir/<case>_<phase>_mask.raw` payloads as written by the
    inference tooling.
    """
    phase_outcomes: dict[str, list[CaseOutcome]] = {p: [] for p in phases}
    fused_outcomes: list[CaseOutcome] = []
    for entry in manifest.entries:
        verdicts: dict[str, bool] = {}
        case = load_case(manifest, entry.case_id)
        for phase in phases:
            ph = case.phases.get(phase)
            if ph is None:
                continue
            path = os.path.join(pred_dir, f"{entry.case_id}_{phase}_mask.raw")
            if not os.path.exists(path):
                raise DataError(f"missing prediction {path}")
            pred = read_mask(path)
            pancreas_score = tumor_score = None
            if ph.mask is not None:
                pancreas_score, tumor_score = mask_dsc_scores(pred, ph.mask)
            decision = classify_phase(
                pred, tumor_threshold=tumor_threshold,
                duct_threshold=duct_threshold, connectivity=connectivity,
            )
            verdicts[phase] = decision.abnormal
            phase_outcomes[phase].append(
                CaseOutcome(
                    case_id=entry.case_id, label=entry.label,
                    predicted_abnormal=decision.abnormal,
                    pancreas_dsc=pancreas_score, tumor_dsc=tumor_score,
                )
            )
        if verdicts:
            fused_outcomes.append(
                CaseOutcome(
                    case_id=entry.case_id, label=entry.label,
                    predicted_abnormal=any(verdicts.values()),
                )
            )
    return CrossValReport(
        mode="s4c",
        k=0,
        per_phase={p: evaluate(phase_outcomes[p]) for p in phases},
        fused=evaluate(fused_outcomes),
        fold_tests=[],
    )


def fused_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Text table of fused classification results, one method per row."""
    lines = [
        f"{'Method':<14} {'Misses':>10} {'W.Calls':>10} {'Sensitivity':>12} {'Specificity':>12}"
    ]
    for name, r in rows:
        sens = f"{r.sensitivity_pct}%" if r.sensitivity_pct is not None else "n/a"
        spec = f"{r.specificity_pct}%" if r.specificity_pct is not None else "n/a"
        lines.append(
            f"{name:<14} {f'{r.misses}/{r.n_abnormal}':>10}"
            f" {f'{r.wrong_calls}/{r.n_normal}':>10} {sens:>12} {spec:>12}"
        )
    return "\n".join(lines)


def phase_table(per_phase: dict[str, EvalReport]) -> str:
    """Text table of per-phase segmentation and classification results."""
    lines = [
        f"{'Phase':<10} {'N.Pancreas':>11} {'A.Pancreas':>11} {'Tumor':>8}"
        f" {'Misses':>9} {'W.Calls':>9} {'Sens':>8} {'Spec':>8}"
    ]

    def pct(x):
        return f"{100 * x:.2f}%" if x is not None else "n/a"

    def rate(p):
        return f"{p}%" if p is not None else "n/a"

    for phase, r in per_phase.items():
        lines.append(
            f"{phase:<10} {pct(r.normal_pancreas_dsc):>11} {pct(r.abnormal_pancreas_dsc):>11}"
            f" {pct(r.tumor_dsc):>8} {f'{r.misses}/{r.n_abnormal}':>9}"
            f" {f'{r.wrong_calls}/{r.n_normal}':>9}"
            f" {rate(r.sensitivity_pct):>8} {rate(r.specificity_pct):>8}"
        )
    return "\n".join(lines)
