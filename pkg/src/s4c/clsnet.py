"""Direct binary classification over segmentation encoder features.

The comparison baseline: crop the pancreas region of interest, push it
through the (frozen) segmentation encoder to its third-pooling features,
then classify with a small head of two conv+GroupNorm+ReLU blocks, global
average pooling, and a linear layer to a 2-way softmax.  ROI boxes come
from ground truth during training and from the segmentation prediction
(with a margin) at test time; because ROI sizes vary, the batch size is 1.
Everything here runs in float32; the tensors are small.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericalError
from .prng import Prng
from .segnet import SegModel
from .volume import LabelMask, Volume3D

log = logging.getLogger("s4c.clsnet")


@dataclass(frozen=True)
class RoiBox:
    """Inclusive voxel-space bounding box."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise DataError(f"empty RoiBox {self.lo}..{self.hi}")
        if any(l < 0 for l in self.lo):
            raise DataError(f"RoiBox below zero: {self.lo}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


@dataclass
class ClsConfig:
    lr_base: float = 0.001
    lr_power: float = 0.9
    max_iters: int = 1000          # published scale: 20_000
    batch_size: int = 1            # ROI sizes differ case to case
    head_channels: tuple[int, int] = (64, 64)
    groups: int = 8
    test_margin: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    log_every: int = 200

    def validate(self) -> None:
        if self.batch_size != 1:
            raise DataError("variable ROI sizes require batch_size 1")
        if min(self.head_channels) < 1 or self.groups < 1 or self.max_iters < 0:
            raise DataError("bad classification configuration")
        if any(c % self.groups for c in self.head_channels):
            raise DataError("head channels must be divisible by the group count")


def roi_from_mask(mask: LabelMask, margin: int = 0) -> RoiBox:
    """Tight foreground bounding box, dilated by `margin`, clipped to bounds."""
    labels = mask.labels
    coords = np.argwhere(labels > 0)
    if len(coords) == 0:
        raise DataError("mask has no foreground; no ROI can be derived")
    lo = np.maximum(coords.min(axis=0) - margin, 0)
    hi = np.minimum(coords.max(axis=0) + margin, np.array(labels.shape) - 1)
    return RoiBox(lo=tuple(int(v) for v in lo), hi=tuple(int(v) for v in hi))


def whole_volume_roi(dims) -> RoiBox:
    return RoiBox(lo=(0, 0, 0), hi=tuple(d - 1 for d in dims))


def extract_pool3_features(
    segmodel: SegModel, volume: Volume3D, roi: RoiBox
) -> torch.Tensor:
    """Encoder features after the third pooling, over the ROI crop.

    The crop is normalized like a training patch, zero-padded up to a
    multiple of 8 per axis, and the feature grid is cut back to the ROI
    footprint at 1/8 scale.  Channel count is 4x the base width.
    """
    from .segnet import normalize_hu

    crop = normalize_hu(volume.data[roi.slices], segmodel.config.normalization)
    padded_shape = tuple(max(8, -(-s // 8) * 8) for s in crop.shape)
    if padded_shape != crop.shape:
        padded = np.zeros(padded_shape, dtype=np.float32)
        padded[: crop.shape[0], : crop.shape[1], : crop.shape[2]] = crop
        crop = padded
    with torch.no_grad():
        work = segmodel.float()
        feats = work.encode_pool3(torch.from_numpy(crop[None, None]))
    foot = tuple(-(-s // 8) for s in roi.shape)
    return feats[:, :, : foot[0], : foot[1], : foot[2]].contiguous()


class ClsHead(nn.Module):
    """Two conv+GroupNorm+ReLU blocks, global average pool, linear softmax."""

    def __init__(self, in_channels: int, config: ClsConfig):
        super().__init__()
        config.validate()
        self.config = config
        c1, c2 = config.head_channels
        self.conv1 = nn.Conv3d(in_channels, c1, 3, padding=1)
        self.norm1 = nn.GroupNorm(config.groups, c1, eps=1e-6)
        self.conv2 = nn.Conv3d(c1, c2, 3, padding=1)
        self.norm2 = nn.GroupNorm(config.groups, c2, eps=1e-6)
        self.linear = nn.Linear(c2, 2)
        self._portable_init(config.seed)

    def _portable_init(self, seed: int) -> None:
        rng = Prng(seed, 0xC15)
        for idx, (name, p) in enumerate(self.named_parameters()):
            with torch.no_grad():
                if "norm" in name:
                    # GroupNorm keeps its identity affine (weight 1, bias 0)
                    continue
                if name.endswith("bias"):
                    p.zero_()
                    continue
                fan_in = int(np.prod(p.shape[1:]))
                vals = rng.spawn(idx).gaussian(p.numel()) * (2.0 / fan_in) ** 0.5
                p.copy_(torch.from_numpy(vals.reshape(tuple(p.shape))).to(p.dtype))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.norm1(self.conv1(feats)))
        x = F.relu(self.norm2(self.conv2(x)))
        x = x.mean(dim=(2, 3, 4))
        return self.linear(x)


def abnormal_probability(head: ClsHead, feats: torch.Tensor) -> float:
    with torch.no_grad():
        logits = head(feats)
        return float(torch.softmax(logits.double(), dim=1)[0, 1])


def predict_case_probability(
    head: ClsHead,
    segmodel: SegModel,
    volume: Volume3D,
    pred_mask: LabelMask | None,
    config: ClsConfig,
) -> float:
    """Abnormality probability for one phase volume.

    The ROI comes from the predicted segmentation with the configured
    margin; an empty prediction falls back to the whole volume.
    """
    try:
        roi = roi_from_mask(pred_mask, config.test_margin) if pred_mask is not None else None
    except DataError:
        roi = None
    if roi is None:
        log.warning("empty segmentation prediction; using whole-volume ROI")
        roi = whole_volume_roi(volume.dims)
    feats = extract_pool3_features(segmodel, volume, roi)
    return abnormal_probability(head, feats)


def is_abnormal(probability: float) -> bool:
    """Decision threshold at 0.5 (strictly greater)."""
    return probability > 0.5


def train_head(
    features: list[torch.Tensor],
    labels: list[int],
    in_channels: int,
    config: ClsConfig,
) -> tuple[ClsHead, list[float]]:
    """SGD training of the head on precomputed per-case feature grids."""
    config.validate()
    if len(features) != len(labels) or not features:
        raise DataError("need matching, non-empty features and labels")
    head = ClsHead(in_channels, config)
    if config.max_iters == 0:
        return head, []
    velocities = {n: torch.zeros_like(p) for n, p in head.named_parameters()}
    rng_root = Prng(config.seed, 0xC17)
    history: list[float] = []
    for it in range(config.max_iters):
        pick = rng_root.spawn(it).randint(0, len(features))
        logits = head(features[pick])
        target = torch.tensor([labels[pick]], dtype=torch.long)
        loss = F.cross_entropy(logits, target)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite classification loss at iteration {it}")
        head.zero_grad(set_to_none=True)
        loss.backward()
        frac = 1.0 - it / config.max_iters
        lr = config.lr_base * frac**config.lr_power
        with torch.no_grad():
            for n, p in head.named_parameters():
                g = p.grad + config.weight_decay * p
                v = velocities[n]
                v.mul_(config.momentum).add_(g)
                p.add_(v, alpha=-lr)
        history.append(loss.item())
        if config.log_every and (it + 1) % config.log_every == 0:
            log.info("cls iter %d/%d loss %.4f", it + 1, config.max_iters,
                     float(np.mean(history[-config.log_every:])))
    return head, history


def train_cls(
    manifest,
    phase: str,
    segmodel: SegModel,
    config: ClsConfig,
    case_ids=None,
) -> tuple[ClsHead, list[float]]:
    """Train the classification head on one phase of a dataset.

    Features come from the frozen segmentation encoder over ground-truth
    ROIs (tight boxes); the case label is the target.
    """
    from .volume import load_case

    ids = case_ids if case_ids is not None else manifest.case_ids
    feats, labels = [], []
    for cid in ids:
        case = load_case(manifest, cid)
        ph = case.phases.get(phase)
        if ph is None or ph.mask is None:
            raise DataError(f"case {cid!r} lacks phase {phase!r} with a mask")
        roi = roi_from_mask(ph.mask, margin=0)
        feats.append(extract_pool3_features(segmodel, ph.volume, roi))
        labels.append(case.label)
    in_channels = feats[0].shape[1]
    return train_head(feats, labels, in_channels, config)


_HEAD_MAGIC = b"S4CCLS1\n"


def save_head(head: ClsHead, in_channels: int, path: str) -> None:
    import json
    import struct
    from dataclasses import asdict

    header = {
        "config": asdict(head.config),
        "in_channels": in_channels,
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in head.named_parameters()],
        "dtype": "f32",
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in head.named_parameters():
            fh.write(p.detach().float().numpy().astype("<f4").tobytes())


def load_head(path: str) -> tuple[ClsHead, int]:
    import json
    import os
    import struct

    if not os.path.exists(path):
        raise DataError(f"classifier file {path} does not exist")
    with open(path, "rb") as fh:
        if fh.read(len(_HEAD_MAGIC)) != _HEAD_MAGIC:
            raise DataError(f"{path} is not a classification head file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        cfg = header["config"]
        cfg["head_channels"] = tuple(cfg["head_channels"])
        config = ClsConfig(**cfg)
        head = ClsHead(header["in_channels"], config)
        for meta, (name, p) in zip(header["tensors"], head.named_parameters()):
            if meta["name"] != name or list(p.shape) != meta["shape"]:
                raise DataError(f"{path}: tensor layout mismatch at {name}")
            raw = fh.read(4 * p.numel())
            if len(raw) != 4 * p.numel():
                raise DataError(f"{path}: truncated tensor payload at {name}")
            vals = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"])
            with torch.no_grad():
                p.copy_(torch.from_numpy(vals.copy()))
    return head, header["in_channels"]
