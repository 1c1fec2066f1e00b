"""Deeply supervised 3D encoder-decoder segmentation network and trainer.

The network compresses a 64x64x64 single-channel patch through three
average-pooling stages (channel widths C, 2C, 4C, 8C), then decompresses with
transposed convolutions, adding sum-residual skips from the matching
encoder stage.  Three 1x1x1 heads emit 4-class logits at full, half, and
quarter resolution; the total loss is voxelwise softmax cross-entropy
weighted 1:2:5 (aux quarter : aux half : main), normalized to sum to 1.

Training is plain SGD with momentum, weight decay, and a polynomially
decayed learning rate.  Master weights are float32; on AMX-capable CPUs
the compute-heavy forward/backward runs in bfloat16 channels-last, which
is selected automatically (``precision="auto"``) and can be forced either
way.  All randomness (init, patch sampling, augmentation) comes from the
portable counter PRNG, so single-threaded runs are reproducible.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericalError
from .prng import Prng
from .volume import DatasetManifest, read_mask, read_volume

log = logging.getLogger("s4c.segnet")

_MODEL_MAGIC = b"S4CSEG1\n"

# identity, three quarter-turns about each axis, one flip about each axis
AUGMENTATIONS = (
    ("identity", None, None),
    *[("rot", axis, k) for axis in (0, 1, 2) for k in (1, 2, 3)],
    *[("flip", axis, None) for axis in (0, 1, 2)],
)
_ROT_PLANES = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


@dataclass
class SegNetConfig:
    base_channels: int = 8          # 32 reproduces the published widths
    num_classes: int = 4
    patch_size: int = 64
    loss_weights: tuple[float, float, float] = (1 / 8, 2 / 8, 5 / 8)  # aux1, aux2, main
    lr_base: float = 0.01
    lr_power: float = 0.9
    max_iters: int = 2000           # published scale: 80_000
    batch_size: int = 4             # published scale: 16
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    precision: str = "auto"         # auto | f32 | bf16
    normalization: str = "fixed-hu"  # fixed-hu | patch-z
    prior_bias_init: bool = True    # start head biases at class log-priors
    fg_patch_prob: float = 0.5
    log_every: int = 100

    def validate(self) -> None:
        if self.patch_size % 8 != 0 or self.patch_size < 8:
            raise DataError(f"patch_size must be a positive multiple of 8, got {self.patch_size}")
        w = self.loss_weights
        if len(w) != 3 or any(x <= 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise DataError(f"loss_weights must be three positive values summing to 1, got {w}")
        if self.precision not in ("auto", "f32", "bf16"):
            raise DataError(f"precision must be auto/f32/bf16, got {self.precision!r}")
        if self.normalization not in ("fixed-hu", "patch-z"):
            raise DataError(
                f"normalization must be fixed-hu or patch-z, got {self.normalization!r}"
            )
        if self.num_classes != 4:
            raise DataError("the label space is fixed at 4 classes")
        if self.max_iters < 0 or self.batch_size < 1 or self.base_channels < 1:
            raise DataError("bad training configuration")


def cpu_supports_amx_bf16() -> bool:
    try:
        with open("/proc/cpuinfo") as fh:
            return "amx_bf16" in fh.read()
    except OSError:
        return False


def resolve_precision(precision: str) -> str:
    if precision == "auto":
        return "bf16" if cpu_supports_amx_bf16() else "f32"
    return precision


def lr_at(iteration: int, config: SegNetConfig) -> float:
    """Polynomially decayed learning rate: base * (1 - t/T)^power."""
    if iteration < 0 or iteration > config.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {config.max_iters}]")
    if config.max_iters == 0:
        return 0.0
    frac = 1.0 - iteration / config.max_iters
    return config.lr_base * frac**config.lr_power


def _pool(x: torch.Tensor) -> torch.Tensor:
    """2x average pooling; bfloat16 lacks a CPU kernel, so pool in f32."""
    if x.dtype == torch.bfloat16:
        return F.avg_pool3d(x.float(), 2).bfloat16()
    return F.avg_pool3d(x, 2)


class SegModel(nn.Module):
    """Encoder-decoder with sum-residual skips and three prediction heads."""

    def __init__(self, config: SegNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.base_channels
        k = config.num_classes
        conv = lambda ci, co: nn.Conv3d(ci, co, 3, padding=1)
        deconv = lambda ci, co: nn.ConvTranspose3d(ci, co, 2, stride=2)
        self.conv1a, self.conv1b = conv(1, c), conv(c, c)
        self.conv2a, self.conv2b = conv(c, 2 * c), conv(2 * c, 2 * c)
        self.conv3a, self.conv3b = conv(2 * c, 4 * c), conv(4 * c, 4 * c)
        self.conv4a, self.conv4b = conv(4 * c, 8 * c), conv(8 * c, 8 * c)
        self.deconv3 = deconv(8 * c, 4 * c)
        self.conv5a, self.conv5b = conv(4 * c, 4 * c), conv(4 * c, 4 * c)
        self.deconv2 = deconv(4 * c, 2 * c)
        self.conv6a, self.conv6b = conv(2 * c, 2 * c), conv(2 * c, 2 * c)
        self.deconv1 = deconv(2 * c, c)
        self.conv7a, self.conv7b = conv(c, c), conv(c, c)
        self.head_main = nn.Conv3d(c, k, 1)
        self.head_aux2 = nn.Conv3d(2 * c, k, 1)
        self.head_aux1 = nn.Conv3d(4 * c, k, 1)
        self._portable_init(config.seed)

    def _portable_init(self, seed: int) -> None:
        """He-style fan-in init drawn from the portable PRNG; zero biases."""
        rng = Prng(seed, 0x5E6)
        for idx, (name, p) in enumerate(self.named_parameters()):
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                    continue
                shape = p.shape
                fan_in = int(np.prod(shape[1:])) if "deconv" not in name else int(
                    shape[0] * np.prod(shape[2:])
                )
                std = (2.0 / fan_in) ** 0.5
                vals = rng.spawn(idx).gaussian(p.numel()) * std
                p.copy_(torch.from_numpy(vals.reshape(shape)).to(p.dtype))

    def _encode(self, x):
        r = F.relu
        e1 = r(self.conv1b(r(self.conv1a(x))))
        e2 = r(self.conv2b(r(self.conv2a(_pool(e1)))))
        e3 = r(self.conv3b(r(self.conv3a(_pool(e2)))))
        p3 = _pool(e3)
        return e1, e2, e3, p3

    def encode_pool3(self, x):
        """Encoder features right after the third pooling (4C channels)."""
        return self._encode(x)[3]

    def forward(self, x):
        d = x.shape[-1]
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[-3:] != (d, d, d) or d % 8:
            raise DataError(f"expected input (B, 1, d, d, d) with d % 8 == 0, got {tuple(x.shape)}")
        r = F.relu
        e1, e2, e3, p3 = self._encode(x)
        e4 = r(self.conv4b(r(self.conv4a(p3))))
        d3 = r(self.conv5b(r(self.conv5a(self.deconv3(e4) + e3))))
        d2 = r(self.conv6b(r(self.conv6a(self.deconv2(d3) + e2))))
        d1 = r(self.conv7b(r(self.conv7a(self.deconv1(d2) + e1))))
        return self.head_main(d1), self.head_aux2(d2), self.head_aux1(d3)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _flat_ce(logits: torch.Tensor, target: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Mean voxelwise cross-entropy; logits (B,K,*), integer target (B,*)."""
    k = logits.shape[1]
    flat = logits.permute(0, 2, 3, 4, 1).reshape(-1, k).to(dtype)
    t = target.reshape(-1, 1)
    if int(t.max()) >= k or int(t.min()) < 0:
        raise DataError(f"target class out of range 0..{k - 1}")
    lse = torch.logsumexp(flat, dim=1)
    picked = flat.gather(1, t).squeeze(1)
    return (lse - picked).mean()


def downsample_target(target: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbor label downsampling (top-corner sample per block)."""
    return target[:, ::factor, ::factor, ::factor].contiguous()


def class_fractions(masks) -> np.ndarray:
    """Voxel fraction per class over an iterable of label arrays."""
    counts = np.zeros(4, dtype=np.float64)
    for labels in masks:
        counts += np.bincount(np.asarray(labels).ravel(), minlength=4)
    total = counts.sum()
    if total == 0:
        raise DataError("no voxels to derive class priors from")
    return counts / total


def apply_class_prior_bias(model: "SegModel", fractions: np.ndarray) -> None:
    """Start every head's biases at the class log-priors.

    With a rare foreground, zero-initialized biases make the early gradient
    flow fight the class imbalance for thousands of steps; log-prior biases
    remove that transient so the budgeted iteration count is spent learning
    appearance instead.
    """
    log_priors = np.log(np.maximum(np.asarray(fractions, dtype=np.float64), 1e-8))
    with torch.no_grad():
        for head in (model.head_main, model.head_aux2, model.head_aux1):
            head.bias.copy_(torch.from_numpy(log_priors).to(head.bias.dtype))


def training_loss(logits3, target: torch.Tensor, weights, dtype=torch.float32) -> torch.Tensor:
    """Deep-supervision loss: w_aux1*CE(1/4) + w_aux2*CE(1/2) + w_main*CE(full)."""
    main, aux2, aux1 = logits3
    w_aux1, w_aux2, w_main = weights
    t2 = downsample_target(target, 2)
    t1 = downsample_target(target, 4)
    return (
        w_main * _flat_ce(main, target, dtype)
        + w_aux2 * _flat_ce(aux2, t2, dtype)
        + w_aux1 * _flat_ce(aux1, t1, dtype)
    )


def loss(logits3, target, weights=(1 / 8, 2 / 8, 5 / 8)) -> float:
    """Double-precision total loss for (main, aux2, aux1) logits vs labels."""
    logits3 = tuple(torch.as_tensor(np.asarray(l)) for l in logits3)
    t = torch.as_tensor(np.asarray(target)).long()
    if t.ndim == 3:
        t = t[None]
    logits3 = tuple(l[None] if l.ndim == 4 else l for l in logits3)
    return float(training_loss(logits3, t, weights, dtype=torch.float64))


def backward(model: SegModel, patch, target, weights=None) -> dict[str, np.ndarray]:
    """Parameter gradients of the training loss, in double precision.

    This is the reference path used by finite-difference validation; the
    training loop itself runs the same graph at reduced precision.
    """
    weights = weights or model.config.loss_weights
    work = copy.deepcopy(model).double()
    x = torch.as_tensor(np.asarray(patch), dtype=torch.float64)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[None]
    t = torch.as_tensor(np.asarray(target)).long()
    if t.ndim == 3:
        t = t[None]
    out = work(x)
    l = training_loss(out, t, weights, dtype=torch.float64)
    work.zero_grad(set_to_none=True)
    l.backward()
    grads = {}
    for name, p in work.named_parameters():
        g = p.grad
        if g is None or not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
        grads[name] = g.detach().numpy().copy()
    return grads


# ---------------------------------------------------------------------------
# patch sampling and augmentation


def apply_augmentation(arr: np.ndarray, aug_id: int) -> np.ndarray:
    """Apply one element of the augmentation set to a 3-D array."""
    kind, axis, k = AUGMENTATIONS[aug_id]
    if kind == "identity":
        return arr
    if kind == "rot":
        return np.rot90(arr, k=k, axes=_ROT_PLANES[axis])
    return np.flip(arr, axis=axis)


# Hounsfield units are a calibrated scale, so the default input mapping is a
# fixed affine soft-tissue window; statistics-based per-patch scaling is kept
# as an option but lets the absolute tumor contrast drift with patch content.
HU_CENTER = 50.0
HU_SCALE = 150.0


def normalize_hu(arr: np.ndarray, mode: str) -> np.ndarray:
    """Map HU values to network inputs under the configured normalization."""
    arr = arr.astype(np.float32)
    if mode == "fixed-hu":
        return (arr - HU_CENTER) / HU_SCALE
    if mode == "patch-z":
        mu = float(arr.mean())
        sd = float(arr.std())
        return (arr - mu) / max(sd, 1e-6)
    raise DataError(f"unknown normalization mode {mode!r}")


def _border_mean(hu: np.ndarray) -> float:
    faces = [hu[0], hu[-1], hu[:, 0], hu[:, -1], hu[:, :, 0], hu[:, :, -1]]
    return float(np.mean([f.mean() for f in faces]))


def _crop_or_pad(arr: np.ndarray, start, size: int, pad_value) -> np.ndarray:
    out = np.full((size, size, size), pad_value, dtype=arr.dtype)
    src = []
    dst = []
    for ax in range(3):
        s0 = start[ax]
        take = min(size, arr.shape[ax] - s0)
        src.append(slice(s0, s0 + take))
        dst.append(slice(0, take))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def sample_training_patch(hu: np.ndarray, labels: np.ndarray, rng: Prng, config: SegNetConfig):
    """One augmented, normalized training patch and its label crop.

    With probability `fg_patch_prob` the crop is forced to contain at least
    one foreground voxel (when the mask has any); otherwise the position is
    uniform.  Volumes smaller than the patch are padded with the border-mean
    HU (the effective background level) and class 0; intensities are mapped
    by the configured normalization after augmentation.
    """
    p = config.patch_size
    dims = hu.shape
    want_fg = bool(labels.any()) and rng.uniform1(0.0, 1.0) < config.fg_patch_prob
    start = []
    if want_fg:
        fg = np.argwhere(labels > 0)
        v = fg[rng.randint(0, len(fg))]
        for ax in range(3):
            lo = max(0, int(v[ax]) - p + 1)
            hi = min(max(dims[ax] - p, 0), int(v[ax]))
            start.append(rng.randint(lo, hi + 1))
    else:
        for ax in range(3):
            start.append(rng.randint(0, max(dims[ax] - p, 0) + 1))
    pad_hu = np.int16(round(_border_mean(hu)))
    patch = _crop_or_pad(hu, start, p, pad_hu).astype(np.float32)
    target = _crop_or_pad(labels, start, p, np.uint8(0))
    aug = rng.randint(0, len(AUGMENTATIONS))
    patch = np.ascontiguousarray(apply_augmentation(patch, aug))
    target = np.ascontiguousarray(apply_augmentation(target, aug))
    return normalize_hu(patch, config.normalization), target


def sample_case_patch(case, phase: str, rng: Prng, config: SegNetConfig):
    """`sample_training_patch` on a CaseRecord phase (mask required)."""
    ph = case.phases.get(phase)
    if ph is None or ph.mask is None:
        raise DataError(f"case {case.case_id!r} has no mask for phase {phase!r}")
    return sample_training_patch(
        ph.volume.data.astype(np.float32), ph.mask.labels, rng, config
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)
    velocities: dict[str, torch.Tensor] = field(default_factory=dict)


def _load_phase_arrays(manifest: DatasetManifest, phase: str, case_ids=None):
    arrays = []
    ids = case_ids if case_ids is not None else manifest.case_ids
    for cid in ids:
        entry = manifest.entry(cid)
        files = entry.phase_files.get(phase)
        if files is None:
            raise DataError(f"case {cid!r} has no phase {phase!r}")
        vol_rel, mask_rel = files
        if mask_rel is None:
            raise DataError(f"case {cid!r} phase {phase!r} has no mask; cannot train")
        hu = read_volume(manifest.resolve(vol_rel)).data.astype(np.float32)
        labels = read_mask(manifest.resolve(mask_rel)).labels
        arrays.append((hu, labels))
    return arrays


def _working_copy(model: SegModel, precision: str) -> nn.Module:
    work = copy.deepcopy(model)
    if precision == "bf16":
        work = work.bfloat16()
    return work.to(memory_format=torch.channels_last_3d)


def train(
    manifest: DatasetManifest,
    phase: str,
    config: SegNetConfig,
    case_ids=None,
) -> tuple[SegModel, TrainState]:
    """SGD training of the segmentation net on one phase of a dataset.

    Returns the final master model (float32) and the training state with
    the per-iteration loss history.  Deterministic for a fixed seed when
    torch runs single-threaded.
    """
    config.validate()
    precision = resolve_precision(config.precision)
    data = _load_phase_arrays(manifest, phase, case_ids)
    if not data:
        raise DataError("no training cases")
    master = SegModel(config)
    if config.prior_bias_init:
        apply_class_prior_bias(master, class_fractions(lab for _, lab in data))
    state = TrainState()
    if config.max_iters == 0:
        return master, state
    work = _working_copy(master, precision)
    work_params = dict(work.named_parameters())
    dtype = torch.bfloat16 if precision == "bf16" else torch.float32
    state.velocities = {
        name: torch.zeros_like(p) for name, p in master.named_parameters()
    }
    sampler_root = Prng(config.seed, 0x3A3)
    window_losses: list[float] = []
    for it in range(config.max_iters):
        xs, ts = [], []
        for slot in range(config.batch_size):
            rng = sampler_root.spawn(it, slot)
            case_idx = rng.randint(0, len(data))
            hu, labels = data[case_idx]
            patch, target = sample_training_patch(hu, labels, rng, config)
            xs.append(patch)
            ts.append(target)
        x = torch.from_numpy(np.stack(xs)[:, None]).to(dtype)
        x = x.contiguous(memory_format=torch.channels_last_3d)
        t = torch.from_numpy(np.stack(ts).astype(np.int64))
        logits = work(x)
        l = training_loss(logits, t, config.loss_weights)
        if not torch.isfinite(l):
            raise NumericalError(f"non-finite loss at iteration {it}")
        work.zero_grad(set_to_none=True)
        l.backward()
        lr = lr_at(it, config)
        with torch.no_grad():
            for name, mp in master.named_parameters():
                g = work_params[name].grad
                if g is None or not torch.isfinite(g).all():
                    raise NumericalError(f"non-finite gradient in {name} at iteration {it}")
                g = g.float() + config.weight_decay * mp
                v = state.velocities[name]
                v.mul_(config.momentum).add_(g)
                mp.add_(v, alpha=-lr)
                work_params[name].data.copy_(mp.to(dtype))
        loss_value = l.item()
        state.loss_history.append(loss_value)
        state.iteration = it + 1
        window_losses.append(loss_value)
        if config.log_every and (it + 1) % config.log_every == 0:
            log.info(
                "iter %d/%d lr %.5f loss %.4f",
                it + 1, config.max_iters, lr, float(np.mean(window_losses)),
            )
            window_losses.clear()
    return master, state


# ---------------------------------------------------------------------------
# model file IO


def save_model(model: SegModel, path: str) -> None:
    header = {
        "config": asdict(model.config),
        "tensors": [
            {"name": n, "shape": list(p.shape)} for n, p in model.named_parameters()
        ],
        "dtype": "f32",
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in model.named_parameters():
            fh.write(p.detach().float().numpy().astype("<f4").tobytes())


def load_model(path: str) -> SegModel:
    if not os.path.exists(path):
        raise DataError(f"model file {path} does not exist")
    with open(path, "rb") as fh:
        magic = fh.read(len(_MODEL_MAGIC))
        if magic != _MODEL_MAGIC:
            raise DataError(f"{path} is not a segmentation model file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        cfg_dict = header["config"]
        cfg_dict["loss_weights"] = tuple(cfg_dict["loss_weights"])
        config = SegNetConfig(**cfg_dict)
        model = SegModel(config)
        for meta, (name, p) in zip(header["tensors"], model.named_parameters()):
            if meta["name"] != name or list(p.shape) != meta["shape"]:
                raise DataError(f"{path}: tensor layout mismatch at {name}")
            n = p.numel()
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise DataError(f"{path}: truncated tensor payload at {name}")
            vals = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"])
            with torch.no_grad():
                p.copy_(torch.from_numpy(vals.copy()))
    return model
