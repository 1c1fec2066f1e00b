"""Connected-component retention and the rule-based abnormality decision.

From a predicted mask, foreground components (classes {1,2,3} jointly, so
tumor and duct fragments attached to the organ survive) are labeled under
6- or 26-connectivity.  The largest component is always kept; another
component survives if its size exceeds 20% of the largest or if its
minimum pairwise voxel distance to the largest is under 27 voxels.  A
phase is called abnormal when the retained voxels include at least 40
tumor voxels or at least 500 dilated-duct voxels; a case is abnormal when
any phase is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DataError
from .volume import CLASS_DUCT, CLASS_TUMOR, LabelMask

FOREGROUND_CLASSES = frozenset({1, 2, 3})
TUMOR_THRESHOLD = 40
DUCT_THRESHOLD = 500
SIZE_FRACTION = 0.20
DISTANCE_LIMIT = 27.0

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: np.ones((3, 3, 3), dtype=bool),
}


@dataclass(frozen=True)
class Component:
    """One connected foreground component: voxel coordinates and their
    class ids, in lexicographic (x, y, z) order."""

    voxels: np.ndarray   # (n, 3) int32
    classes: np.ndarray  # (n,) uint8

    @property
    def size(self) -> int:
        return len(self.voxels)

    @property
    def anchor(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.voxels[0])

    def count_of(self, class_id: int) -> int:
        return int((self.classes == class_id).sum())


def connected_components(
    mask: LabelMask | np.ndarray,
    classes=FOREGROUND_CLASSES,
    connectivity: int = 26,
) -> list[Component]:
    """Maximal connected components of the selected classes."""
    if connectivity not in _STRUCTURES:
        raise DataError(f"connectivity must be 6 or 26, got {connectivity}")
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    if not set(classes) <= FOREGROUND_CLASSES:
        raise DataError(f"classes must be a subset of {set(FOREGROUND_CLASSES)}")
    fg = np.isin(labels, list(classes))
    comp_ids, n = ndimage.label(fg, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    coords = np.argwhere(comp_ids)  # lexicographic (x, y, z) order
    ids = comp_ids[tuple(coords.T)]
    order = np.argsort(ids, kind="stable")
    coords = coords[order].astype(np.int32)
    ids = ids[order]
    cls = labels[tuple(coords.T)].astype(np.uint8)
    bounds = np.searchsorted(ids, np.arange(1, n + 2))
    return [
        Component(voxels=coords[bounds[i] : bounds[i + 1]], classes=cls[bounds[i] : bounds[i + 1]])
        for i in range(n)
    ]


def min_distance(a: Component, b: Component) -> float:
    """Minimum pairwise Euclidean distance between voxel centers."""
    tree = cKDTree(b.voxels)
    d, _ = tree.query(a.voxels, k=1)
    return float(np.min(d))


def largest_component(components: list[Component]) -> Component:
    """Largest component; ties broken by lowest lexicographic anchor."""
    return min(components, key=lambda c: (-c.size, c.anchor))


def retain_components(
    components: list[Component],
    size_fraction: float = SIZE_FRACTION,
    distance_limit: float = DISTANCE_LIMIT,
) -> list[Component]:
    """Keep the largest component plus every component that is either
    strictly larger than `size_fraction` of it or strictly closer than
    `distance_limit` voxels to it."""
    if not components:
        raise DataError("retain_components requires at least one component")
    cmax = largest_component(components)
    kept = []
    for comp in components:
        if comp is cmax:
            kept.append(comp)
        elif comp.size > size_fraction * cmax.size:
            kept.append(comp)
        elif min_distance(comp, cmax) < distance_limit:
            kept.append(comp)
    return kept


@dataclass(frozen=True)
class PhaseDecision:
    abnormal: bool
    tumor_voxels: int
    duct_voxels: int

    @property
    def verdict(self) -> str:
        return "abnormal" if self.abnormal else "normal"


@dataclass(frozen=True)
class CaseDecision:
    phases: dict[str, PhaseDecision]
    fused_abnormal: bool

    @property
    def fused_verdict(self) -> str:
        return "abnormal" if self.fused_abnormal else "normal"

    def to_json_dict(self) -> dict:
        return {
            "phases": {
                tag: {
                    "verdict": d.verdict,
                    "tumor_voxels": d.tumor_voxels,
                    "duct_voxels": d.duct_voxels,
                }
                for tag, d in self.phases.items()
            },
            "fused_verdict": self.fused_verdict,
        }


def classify_phase(
    mask: LabelMask | np.ndarray,
    tumor_threshold: int = TUMOR_THRESHOLD,
    duct_threshold: int = DUCT_THRESHOLD,
    connectivity: int = 26,
) -> PhaseDecision:
    """Retention first (over all foreground classes jointly), then the
    voxel-count rule on what survived."""
    components = connected_components(mask, FOREGROUND_CLASSES, connectivity)
    tumor = duct = 0
    if components:
        for comp in retain_components(components):
            tumor += comp.count_of(CLASS_TUMOR)
            duct += comp.count_of(CLASS_DUCT)
    return PhaseDecision(
        abnormal=(tumor >= tumor_threshold or duct >= duct_threshold),
        tumor_voxels=tumor,
        duct_voxels=duct,
    )


def fuse_phases(decisions: dict[str, PhaseDecision]) -> CaseDecision:
    """A case is abnormal when any phase is (logical OR)."""
    if not decisions:
        raise DataError("fuse_phases requires at least one phase decision")
    return CaseDecision(
        phases=dict(decisions),
        fused_abnormal=any(d.abnormal for d in decisions.values()),
    )
