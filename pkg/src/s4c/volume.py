"""Volumetric data types, dataset manifests, and bit-exact file IO.

Conventions fixed here and relied on everywhere else:

* A volume of dims ``(W, H, L)`` is a dense grid indexed by ``(x, y, z)``
  with ``0 <= x < W`` etc.  The linear/file order is x-fastest:
  ``i = x + W * (y + H * z)``.
* Hounsfield values are stored as little-endian signed 16-bit integers,
  label masks as unsigned 8-bit class ids in {0 background, 1 pancreas,
  2 tumor, 3 dilated duct}.
* Each binary payload ``<name>`` has a JSON sidecar ``<name>.json`` holding
  dims, spacing, dtype and order, so a file round-trip is the identity on
  (dims, spacing, data).

Arrays are marked read-only after construction; types are safe to share
across workers.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PHASES = ("arterial", "venous")
NUM_CLASSES = 4
CLASS_BACKGROUND, CLASS_PANCREAS, CLASS_TUMOR, CLASS_DUCT = 0, 1, 2, 3

_VOLUME_DTYPE = "i16"
_MASK_DTYPE = "u8"
_ORDER = "xyz-row-major"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def linear_index(coord: tuple[int, int, int], dims: tuple[int, int, int]) -> int:
    """File/linear offset of voxel (x, y, z); x varies fastest."""
    x, y, z = coord
    w, h, l = dims
    if not (0 <= x < w and 0 <= y < h and 0 <= z < l):
        raise IndexError(f"coordinate {coord} outside dims {dims}")
    return x + w * (y + h * z)


def coord_at(index: int, dims: tuple[int, int, int]) -> tuple[int, int, int]:
    """Inverse of `linear_index`."""
    w, h, l = dims
    if not 0 <= index < w * h * l:
        raise IndexError(f"index {index} outside dims {dims}")
    x = index % w
    y = (index // w) % h
    z = index // (w * h)
    return (x, y, z)


@dataclass(frozen=True)
class Volume3D:
    """Scalar 3D grid of Hounsfield-unit values.

    ``data`` has shape (W, H, L) and dtype int16; ``spacing`` is millimeters
    per voxel and is metadata only.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise DataError(f"all dims must be >= 1, got {self.data.shape}")
        if self.data.dtype != np.int16:
            raise DataError(f"volume dtype must be int16, got {self.data.dtype}")
        object.__setattr__(self, "data", _freeze(self.data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMask:
    """Per-voxel class grid over {0, 1, 2, 3}, same layout as `Volume3D`."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise DataError(f"mask must be 3-D, got shape {self.labels.shape}")
        if self.labels.dtype != np.uint8:
            raise DataError(f"mask dtype must be uint8, got {self.labels.dtype}")
        if self.labels.size and self.labels.max() >= NUM_CLASSES:
            raise DataError(
                f"mask contains class id {int(self.labels.max())}, valid ids are 0..{NUM_CLASSES - 1}"
            )
        object.__setattr__(self, "labels", _freeze(self.labels))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class Phase:
    """One acquisition phase of a case: the volume plus its optional mask."""

    volume: Volume3D
    mask: LabelMask | None = None

    def __post_init__(self):
        if self.mask is not None and self.mask.dims != self.volume.dims:
            raise DataError(
                f"mask dims {self.mask.dims} do not match volume dims {self.volume.dims}"
            )


@dataclass(frozen=True)
class CaseRecord:
    """A case: id, per-phase data, and the binary abnormality label."""

    case_id: str
    phases: dict[str, Phase]
    label: int

    def __post_init__(self):
        if not self.phases:
            raise DataError(f"case {self.case_id!r} has no phases")
        for tag in self.phases:
            if tag not in PHASES:
                raise DataError(f"case {self.case_id!r}: unknown phase tag {tag!r}")
        if self.label not in (0, 1):
            raise DataError(f"case {self.case_id!r}: label must be 0 or 1, got {self.label}")

    def check_label_consistency(self, strict: bool) -> None:
        """Abnormal cases with masks must show at least one tumor voxel.

        Enforced for generated phantom data; external data only warns.
        """
        masks = [p.mask for p in self.phases.values() if p.mask is not None]
        if self.label == 1 and masks:
            if not any((m.labels == CLASS_TUMOR).any() for m in masks):
                msg = f"case {self.case_id!r} is labelled abnormal but no mask contains a tumor voxel"
                if strict:
                    raise DataError(msg)
                warnings.warn(msg)


def _sidecar_path(path: str) -> str:
    return path + ".json"


def _write_payload(arr: np.ndarray, spacing, dtype_tag: str, np_dtype, path: str) -> None:
    sidecar = {
        "dims": [int(d) for d in arr.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype_tag,
        "order": _ORDER,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh)
        fh.write("\n")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr).astype(np_dtype, copy=False).tobytes(order="F"))


def _read_payload(path: str, expect_dtype: str, np_dtype):
    sc_path = _sidecar_path(path)
    if not os.path.exists(sc_path):
        raise DataError(f"missing sidecar {sc_path}")
    if not os.path.exists(path):
        raise DataError(f"missing payload {path}")
    with open(sc_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable sidecar {sc_path}: {e}") from e
    for key in ("dims", "dtype", "order"):
        if key not in meta:
            raise DataError(f"sidecar {sc_path} missing field {key!r}")
    if meta["dtype"] != expect_dtype:
        raise DataError(f"{path}: dtype {meta['dtype']!r} where {expect_dtype!r} expected")
    if meta["order"] != _ORDER:
        raise DataError(f"{path}: unsupported order {meta['order']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise DataError(f"{path}: bad dims {dims}")
    raw = open(path, "rb").read()
    itemsize = np.dtype(np_dtype).itemsize
    expected = dims[0] * dims[1] * dims[2] * itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw)} bytes, dims {dims} require {expected}")
    flat = np.frombuffer(raw, dtype=np_dtype)
    arr = flat.reshape(dims, order="F")
    spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
    return arr, spacing


def write_volume(volume: Volume3D, path: str) -> None:
    _write_payload(volume.data, volume.spacing, _VOLUME_DTYPE, "<i2", path)


def read_volume(path: str) -> Volume3D:
    arr, spacing = _read_payload(path, _VOLUME_DTYPE, "<i2")
    return Volume3D(data=arr.astype(np.int16), spacing=spacing)


def write_mask(mask: LabelMask, path: str) -> None:
    _write_payload(mask.labels, (1.0, 1.0, 1.0), _MASK_DTYPE, "u1", path)


def read_mask(path: str) -> LabelMask:
    arr, _ = _read_payload(path, _MASK_DTYPE, "u1")
    return LabelMask(labels=arr.astype(np.uint8))


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    label: int
    # phase tag -> (volume path, mask path or None); paths relative to root
    phase_files: dict[str, tuple[str, str | None]]


@dataclass(frozen=True)
class DatasetManifest:
    """Index of a dataset on disk; `seed` is set for generated phantom sets."""

    root: str
    entries: list[ManifestEntry]
    seed: int | None = None

    def entry(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise DataError(f"unknown case_id {case_id!r}")

    @property
    def case_ids(self) -> list[str]:
        return [e.case_id for e in self.entries]

    def resolve(self, rel: str) -> str:
        return os.path.normpath(os.path.join(self.root, rel))


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    doc = {
        "seed": manifest.seed,
        "cases": [
            {
                "id": e.case_id,
                "label": e.label,
                "phases": {
                    tag: ({"vol": vol} if mask is None else {"vol": vol, "mask": mask})
                    for tag, (vol, mask) in e.phase_files.items()
                },
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_manifest(path: str) -> DatasetManifest:
    if not os.path.exists(path):
        raise DataError(f"manifest {path} does not exist")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable manifest {path}: {e}") from e
    if "cases" not in doc or not isinstance(doc["cases"], list):
        raise DataError(f"manifest {path} has no 'cases' list")
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen: set[str] = set()
    for case in doc["cases"]:
        cid = case.get("id")
        if not isinstance(cid, str) or not cid:
            raise DataError(f"manifest {path}: case with missing/empty id")
        if cid in seen:
            raise DataError(f"manifest {path}: duplicate case_id {cid!r}")
        seen.add(cid)
        label = case.get("label")
        if label not in (0, 1):
            raise DataError(f"manifest {path}: case {cid!r} label must be 0 or 1")
        phases = case.get("phases", {})
        if not phases:
            raise DataError(f"manifest {path}: case {cid!r} lists no phases")
        phase_files: dict[str, tuple[str, str | None]] = {}
        for tag, files in phases.items():
            if tag not in PHASES:
                raise DataError(f"manifest {path}: case {cid!r} unknown phase {tag!r}")
            vol = files.get("vol")
            if not vol:
                raise DataError(f"manifest {path}: case {cid!r} phase {tag!r} missing 'vol'")
            mask = files.get("mask")
            for rel in (vol, mask) if mask else (vol,):
                full = os.path.normpath(os.path.join(root, rel))
                if not os.path.exists(full):
                    raise DataError(f"manifest {path}: referenced file {full} does not exist")
            phase_files[tag] = (vol, mask)
        entries.append(ManifestEntry(case_id=cid, label=int(label), phase_files=phase_files))
    return DatasetManifest(root=root, entries=entries, seed=doc.get("seed"))


def load_case(manifest: DatasetManifest, case_id: str) -> CaseRecord:
    entry = manifest.entry(case_id)
    phases: dict[str, Phase] = {}
    for tag, (vol_rel, mask_rel) in entry.phase_files.items():
        volume = read_volume(manifest.resolve(vol_rel))
        mask = read_mask(manifest.resolve(mask_rel)) if mask_rel else None
        phases[tag] = Phase(volume=volume, mask=mask)
    record = CaseRecord(case_id=case_id, phases=phases, label=entry.label)
    record.check_label_consistency(strict=manifest.seed is not None)
    return record


def merge_manifests(paths: list[str], out_path: str) -> DatasetManifest:
    """Combine manifests into one at `out_path`, re-rooting relative paths.

    Seeds are dropped unless all inputs agree (a merged set is no longer a
    single-seed artifact, but label-consistency checks should stay strict
    for pure phantom unions).
    """
    out_root = os.path.dirname(os.path.abspath(out_path))
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    seeds = set()
    for p in paths:
        m = load_manifest(p)
        seeds.add(m.seed)
        for e in m.entries:
            if e.case_id in seen:
                raise DataError(f"merge: duplicate case_id {e.case_id!r}")
            seen.add(e.case_id)
            rerooted = {
                tag: (
                    os.path.relpath(m.resolve(vol), out_root),
                    os.path.relpath(m.resolve(mask), out_root) if mask else None,
                )
                for tag, (vol, mask) in e.phase_files.items()
            }
            entries.append(ManifestEntry(e.case_id, e.label, rerooted))
    seed = seeds.pop() if len(seeds) == 1 else None
    merged = DatasetManifest(root=out_root, entries=entries, seed=seed)
    save_manifest(merged, out_path)
    return load_manifest(out_path)
