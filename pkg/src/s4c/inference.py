"""Whole-volume dense prediction: sliding window with majority voting.

Windows of the training patch size slide with a fixed stride (default 20
voxels); a clamped final window guarantees full coverage.  Each window
casts one vote per voxel for its argmax class; softmax probabilities,
accumulated as fixed-point integers, break vote ties, and remaining ties
fall to the lower class id.  Because both accumulators are integers, the
final mask is bit-identical under any window processing order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, NumericalError
from .segnet import SegModel, _working_copy, normalize_hu, resolve_precision
from .volume import NUM_CLASSES, LabelMask, Volume3D

DEFAULT_STRIDE = 20

# softmax probabilities are accumulated as multiples of 2^-24; integer sums
# make the tie channel associative and therefore order-independent
PROB_SCALE = 1 << 24


def window_starts(extent: int, patch: int = 64, stride: int = DEFAULT_STRIDE) -> list[int]:
    """Start offsets along one axis, covering [0, extent).

    Regular starts step by `stride`; if they leave a tail, a final window
    clamped to `extent - patch` is appended.  Extents smaller than the
    patch yield the single start 0 (padding happens downstream).
    """
    if extent < 1:
        raise DataError(f"extent must be >= 1, got {extent}")
    if patch < 1 or stride < 1:
        raise DataError("patch and stride must be positive")
    if extent <= patch:
        return [0]
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


@dataclass
class VoteGrid:
    """Per-voxel class votes plus fixed-point probability sums."""

    dims: tuple[int, int, int]
    votes: np.ndarray = field(init=False)
    prob_sums: np.ndarray = field(init=False)

    def __post_init__(self):
        self.votes = np.zeros((NUM_CLASSES, *self.dims), dtype=np.int32)
        self.prob_sums = np.zeros((NUM_CLASSES, *self.dims), dtype=np.int64)

    def add_window(self, start, labels: np.ndarray, probs: np.ndarray) -> None:
        """Accumulate one window: argmax labels and class probabilities."""
        sx, sy, sz = start
        px, py, pz = labels.shape
        region = (slice(sx, sx + px), slice(sy, sy + py), slice(sz, sz + pz))
        for c in range(NUM_CLASSES):
            self.votes[(c, *region)] += labels == c
        self.prob_sums[(slice(None), *region)] += np.rint(
            probs.astype(np.float64) * PROB_SCALE
        ).astype(np.int64)

    def finalize(self) -> LabelMask:
        """Winner per voxel: most votes, then larger probability sum, then
        lower class id."""
        total = self.votes.sum(axis=0)
        if (total < 1).any():
            raise DataError("some voxels received no votes; window coverage is broken")
        best = np.zeros(self.dims, dtype=np.uint8)
        best_votes = self.votes[0].copy()
        best_prob = self.prob_sums[0].copy()
        for c in range(1, NUM_CLASSES):
            better = (self.votes[c] > best_votes) | (
                (self.votes[c] == best_votes) & (self.prob_sums[c] > best_prob)
            )
            best[better] = c
            best_votes[better] = self.votes[c][better]
            best_prob[better] = self.prob_sums[c][better]
        return LabelMask(labels=best)





def predict_volume(
    model: SegModel,
    volume: Volume3D,
    stride: int = DEFAULT_STRIDE,
    window_order: list[int] | None = None,
    batch_windows: int = 4,
) -> LabelMask:
    """Dense 4-class prediction for a whole volume.

    Volumes smaller than the patch are padded with their border-mean HU
    (the effective background level) and the pad region is cropped from
    the output.  Each window is normalized exactly as during training.
    """
    patch = model.config.patch_size
    dims = volume.dims
    hu = volume.data.astype(np.float32)
    padded_dims = tuple(max(d, patch) for d in dims)
    if padded_dims != dims:
        faces = [hu[0], hu[-1], hu[:, 0], hu[:, -1], hu[:, :, 0], hu[:, :, -1]]
        fill = float(np.mean([f.mean() for f in faces]))
        padded = np.full(padded_dims, fill, dtype=np.float32)
        padded[: dims[0], : dims[1], : dims[2]] = hu
        hu = padded

    starts = [
        (sx, sy, sz)
        for sx in window_starts(padded_dims[0], patch, stride)
        for sy in window_starts(padded_dims[1], patch, stride)
        for sz in window_starts(padded_dims[2], patch, stride)
    ]
    if window_order is not None:
        if sorted(window_order) != list(range(len(starts))):
            raise DataError("window_order must be a permutation of the window indices")
        starts = [starts[i] for i in window_order]

    precision = resolve_precision(model.config.precision)
    dtype = torch.bfloat16 if precision == "bf16" else torch.float32
    work = _working_copy(model, precision)
    grid = VoteGrid(dims=padded_dims)
    with torch.no_grad():
        for i in range(0, len(starts), max(1, batch_windows)):
            chunk = starts[i : i + max(1, batch_windows)]
            wins = np.stack(
                [
                    normalize_hu(
                        hu[sx : sx + patch, sy : sy + patch, sz : sz + patch],
                        model.config.normalization,
                    )
                    for sx, sy, sz in chunk
                ]
            )
            x = torch.from_numpy(wins[:, None]).to(dtype)
            x = x.contiguous(memory_format=torch.channels_last_3d)
            logits = work(x)[0].float()
            if not torch.isfinite(logits).all():
                raise NumericalError(f"non-finite logits in window at {chunk[0]}")
            probs = torch.softmax(logits, dim=1).numpy()
            labels = probs.argmax(axis=1).astype(np.uint8)
            for j, st in enumerate(chunk):
                grid.add_window(st, labels[j], probs[j])
    full = grid.finalize().labels
    return LabelMask(labels=np.ascontiguousarray(full[: dims[0], : dims[1], : dims[2]]))
