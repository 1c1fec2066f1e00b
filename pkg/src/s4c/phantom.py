"""Seeded synthetic dual-phase cases with exact ground-truth masks.

A phantom case is a noisy background volume containing a pancreas
ellipsoid, optionally a spherical tumor (whose contrast differs between
the arterial and venous phases) and/or a tubular dilated duct along a
polyline.  Geometry is shared between phases; the noise field is drawn
independently per phase.  Everything is a pure function of the spec, so a
fixed seed regenerates byte-identical files.

Default intensities make the tumor arterial-enhancing: background -50 HU,
pancreas 90/110 HU (arterial/venous), tumor delta +60/+15 HU, duct delta
-40 HU in both phases, noise sigma 10 HU.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .prng import Prng
from .volume import (
    CLASS_DUCT,
    CLASS_PANCREAS,
    CLASS_TUMOR,
    CaseRecord,
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    Phase,
    Volume3D,
    load_manifest,
    save_manifest,
    write_mask,
    write_volume,
)

DIFFICULTIES = ("easy", "hard")
_DIFFICULTY_CODE = {"easy": 1, "hard": 2}


@dataclass(frozen=True)
class PancreasGeom:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    hu_mean: dict[str, float] = field(
        default_factory=lambda: {"arterial": 90.0, "venous": 110.0}
    )


@dataclass(frozen=True)
class TumorGeom:
    center: tuple[float, float, float]
    radius: float
    delta_hu: dict[str, float] = field(
        default_factory=lambda: {"arterial": 60.0, "venous": 15.0}
    )


@dataclass(frozen=True)
class DuctGeom:
    # polyline control points through the pancreas
    points: tuple[tuple[float, float, float], ...]
    radius: float
    delta_hu: dict[str, float] = field(
        default_factory=lambda: {"arterial": -40.0, "venous": -40.0}
    )


@dataclass(frozen=True)
class PhantomSpec:
    pancreas: PancreasGeom
    dims: tuple[int, int, int] = (96, 96, 96)
    background_hu: float = -50.0
    noise_sigma: float = 10.0
    tumor: TumorGeom | None = None
    duct: DuctGeom | None = None
    seed: int = 0

    def validate(self) -> None:
        w, h, l = self.dims
        if min(self.dims) < 1:
            raise DataError(f"bad dims {self.dims}")
        if self.tumor is not None:
            t = self.tumor
            if t.radius < 1:
                raise DataError(f"tumor radius must be >= 1, got {t.radius}")
            for c, d in zip(t.center, self.dims):
                if c - t.radius < 0 or c + t.radius > d - 1:
                    raise DataError(f"tumor ball at {t.center} r={t.radius} leaves the volume")
            if not all(np.isfinite(list(t.delta_hu.values()))):
                raise DataError("tumor deltas must be finite")
        if self.duct is not None:
            dct = self.duct
            if dct.radius < 1:
                raise DataError(f"duct radius must be >= 1, got {dct.radius}")
            if len(dct.points) < 2:
                raise DataError("duct polyline needs at least 2 points")
            for p in dct.points:
                for c, d in zip(p, self.dims):
                    if c - dct.radius < 0 or c + dct.radius > d - 1:
                        raise DataError(f"duct point {p} r={dct.radius} leaves the volume")
            if not all(np.isfinite(list(dct.delta_hu.values()))):
                raise DataError("duct deltas must be finite")


def _coords(dims):
    x, y, z = np.indices(dims, dtype=np.float64)
    return x, y, z


def ball_mask(dims, center, radius) -> np.ndarray:
    x, y, z = _coords(dims)
    d2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    return d2 <= radius * radius


def ellipsoid_mask(dims, center, semi_axes) -> np.ndarray:
    x, y, z = _coords(dims)
    q = (
        ((x - center[0]) / semi_axes[0]) ** 2
        + ((y - center[1]) / semi_axes[1]) ** 2
        + ((z - center[2]) / semi_axes[2]) ** 2
    )
    return q <= 1.0


def tube_mask(dims, points, radius) -> np.ndarray:
    """Voxels within `radius` of any segment of the polyline."""
    x, y, z = _coords(dims)
    best = np.full(dims, np.inf)
    for p, q in zip(points[:-1], points[1:]):
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        seg = q - p
        seg_len2 = float(seg @ seg)
        if seg_len2 == 0.0:
            d2 = (x - p[0]) ** 2 + (y - p[1]) ** 2 + (z - p[2]) ** 2
        else:
            t = ((x - p[0]) * seg[0] + (y - p[1]) * seg[1] + (z - p[2]) * seg[2]) / seg_len2
            np.clip(t, 0.0, 1.0, out=t)
            d2 = (
                (x - (p[0] + t * seg[0])) ** 2
                + (y - (p[1] + t * seg[1])) ** 2
                + (z - (p[2] + t * seg[2])) ** 2
            )
        np.minimum(best, d2, out=best)
    return best <= radius * radius


_PHASE_STREAM = {"arterial": 1, "venous": 2}


def generate_case(spec: PhantomSpec) -> CaseRecord:
    """Render both phases and the shared ground-truth mask.

    Class assignment: pancreas-only voxels get 1, duct voxels 3, tumor
    voxels 2 (tumor wins where tumor and duct overlap).  The case label is
    1 exactly when a tumor is present.
    """
    spec.validate()
    dims = spec.dims
    panc = ellipsoid_mask(dims, spec.pancreas.center, spec.pancreas.semi_axes)
    tumor = ball_mask(dims, spec.tumor.center, spec.tumor.radius) if spec.tumor else None
    duct = tube_mask(dims, spec.duct.points, spec.duct.radius) if spec.duct else None

    labels = np.zeros(dims, dtype=np.uint8)
    labels[panc] = CLASS_PANCREAS
    if duct is not None:
        labels[duct] = CLASS_DUCT
    if tumor is not None:
        labels[tumor] = CLASS_TUMOR
    mask = LabelMask(labels=labels)

    phases: dict[str, Phase] = {}
    for tag, stream in _PHASE_STREAM.items():
        base = np.full(dims, spec.background_hu, dtype=np.float64)
        mean = spec.pancreas.hu_mean[tag]
        base[panc] = mean
        if duct is not None:
            base[duct] = mean + spec.duct.delta_hu[tag]
        if tumor is not None:
            base[tumor] = mean + spec.tumor.delta_hu[tag]
        noise = Prng(spec.seed, stream).gaussian(int(np.prod(dims))).reshape(dims)
        hu = base + spec.noise_sigma * noise
        data = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
        phases[tag] = Phase(volume=Volume3D(data=data), mask=mask)

    label = 1 if spec.tumor is not None else 0
    return CaseRecord(case_id=f"phantom_{spec.seed}", phases=phases, label=label)


def _sample_pancreas(rng: Prng, dims) -> PancreasGeom:
    scale = min(dims) / 64.0
    center = tuple(d / 2.0 + rng.uniform1(-3.0, 3.0) * scale for d in dims)
    semi_axes = (
        rng.uniform1(18.0, 23.0) * scale,
        rng.uniform1(13.0, 18.0) * scale,
        rng.uniform1(10.0, 15.0) * scale,
    )
    hu = {
        "arterial": rng.uniform1(82.0, 98.0),
        "venous": rng.uniform1(102.0, 118.0),
    }
    return PancreasGeom(center=center, semi_axes=semi_axes, hu_mean=hu)


def _sample_tumor_center(rng: Prng, panc: PancreasGeom, radius, dims):
    # rejection-sample a center inside the middle of the ellipsoid whose
    # ball stays inside the volume
    for _ in range(200):
        u = rng.uniform(3) * 1.2 - 0.6
        cand = tuple(c + u_i * a for c, a, u_i in zip(panc.center, panc.semi_axes, u))
        inside = (
            sum(((ci - c) / a) ** 2 for ci, c, a in zip(cand, panc.center, panc.semi_axes))
            <= 0.55
        )
        in_volume = all(radius <= ci <= d - 1 - radius for ci, d in zip(cand, dims))
        if inside and in_volume:
            return cand
    raise DataError("could not place tumor inside pancreas")


def _duct_polyline(panc: PancreasGeom, dims, radius) -> tuple[tuple[float, float, float], ...]:
    cx, cy, cz = panc.center
    ax = panc.semi_axes[0] * 0.8
    bend = panc.semi_axes[1] * 0.35

    def clamp(pt):
        return tuple(min(max(c, radius + 1.0), d - 2.0 - radius) for c, d in zip(pt, dims))

    return (
        clamp((cx - ax, cy - bend, cz)),
        clamp((cx, cy + bend, cz)),
        clamp((cx + ax, cy - bend, cz)),
    )


def _case_spec(rng: Prng, dims, abnormal: bool, difficulty: str, idx: int, seed: int) -> PhantomSpec:
    panc = _sample_pancreas(rng, dims)
    scale = min(dims) / 64.0
    tumor = None
    duct = None
    if abnormal:
        if difficulty == "easy":
            radius = max(1.0, rng.uniform1(7.0, 9.5) * scale)
            delta = {
                "arterial": rng.uniform1(55.0, 85.0),
                "venous": rng.uniform1(45.0, 70.0),
            }
        else:
            # hard: contrast near zero in exactly one phase, alternating,
            # so single-phase reading misses what dual-phase fusion catches
            radius = max(1.0, rng.uniform1(5.0, 7.0) * scale)
            weak = rng.uniform1(-3.0, 3.0)
            strong = rng.uniform1(55.0, 80.0)
            if idx % 2 == 0:
                delta = {"arterial": strong, "venous": weak}
            else:
                delta = {"arterial": weak, "venous": strong}
        center = _sample_tumor_center(rng, panc, radius, dims)
        tumor = TumorGeom(center=center, radius=radius, delta_hu=delta)
        if difficulty == "hard" and idx % 3 == 0:
            duct_r = max(1.0, 2.5 * scale)
            duct = DuctGeom(
                points=_duct_polyline(panc, dims, duct_r), radius=duct_r,
                delta_hu={"arterial": -40.0, "venous": -40.0},
            )
    else:
        if difficulty == "hard" and idx % 4 == 1:
            # tumor-free but duct-dilated: normal by the strict tumor-presence
            # label, yet large enough (>500 voxels) to trip the duct rule
            r = max(1.0, rng.uniform1(2.8, 3.2) * scale)
            duct = DuctGeom(
                points=_duct_polyline(panc, dims, r), radius=r,
                delta_hu={"arterial": -40.0, "venous": -40.0},
            )
    case_seed = int(Prng(seed).spawn(_DIFFICULTY_CODE[difficulty], idx).u64(1)[0] >> 1)
    return PhantomSpec(
        pancreas=panc, dims=dims, tumor=tumor, duct=duct, seed=case_seed,
    )


def generate_dataset(
    n_normal: int,
    n_abnormal: int,
    dims: tuple[int, int, int],
    seed: int,
    difficulty: str,
    out_dir: str,
) -> DatasetManifest:
    """Write a phantom dataset under `out_dir` and return its manifest.

    Case geometry is drawn from difficulty-dependent ranges; the hard tier
    mixes in weak-single-phase tumors and tumor-free dilated-duct cases.
    Regenerating with the same arguments reproduces every byte.
    """
    if difficulty not in DIFFICULTIES:
        raise DataError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    if n_normal < 0 or n_abnormal < 0:
        raise DataError("case counts must be non-negative")
    os.makedirs(out_dir, exist_ok=True)
    labels = [1] * n_abnormal + [0] * n_normal
    entries: list[ManifestEntry] = []
    norm_idx = abn_idx = 0
    for i, lab in enumerate(labels):
        sub = abn_idx if lab else norm_idx
        if lab:
            abn_idx += 1
        else:
            norm_idx += 1
        rng = Prng(seed).spawn(0xD1F, _DIFFICULTY_CODE[difficulty], i)
        spec = _case_spec(rng, dims, abnormal=bool(lab), difficulty=difficulty, idx=sub, seed=seed * 1_000_003 + i)
        case = generate_case(spec)
        cid = f"{difficulty}_{i:04d}"
        case_dir = os.path.join(out_dir, cid)
        os.makedirs(case_dir, exist_ok=True)
        phase_files = {}
        for tag, ph in case.phases.items():
            vol_rel = os.path.join(cid, f"{tag}.raw")
            mask_rel = os.path.join(cid, f"{tag}_mask.raw")
            write_volume(ph.volume, os.path.join(out_dir, vol_rel))
            write_mask(ph.mask, os.path.join(out_dir, mask_rel))
            phase_files[tag] = (vol_rel, mask_rel)
        entries.append(ManifestEntry(case_id=cid, label=lab, phase_files=phase_files))
    manifest = DatasetManifest(root=out_dir, entries=entries, seed=seed)
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return load_manifest(os.path.join(out_dir, "manifest.json"))
