import numpy as np
import pytest
import torch

from s4c.errors import DataError
from s4c.inference import PROB_SCALE, VoteGrid, predict_volume, window_starts
from s4c.segnet import SegModel, SegNetConfig
from s4c.volume import Volume3D


def starts_oracle(extent, patch, stride):
    """Independent enumeration of the start policy."""
    if extent <= patch:
        return [0]
    regular = [s for s in range(0, extent - patch + 1) if s % stride == 0]
    covered_to = regular[-1] + patch
    if covered_to < extent:
        regular = regular + [extent - patch]
    return regular


def test_window_starts_examples():
    assert window_starts(104, 64, 20) == [0, 20, 40]
    assert window_starts(64, 64, 20) == [0]
    assert window_starts(150, 64, 20) == [0, 20, 40, 60, 80, 86]


def test_window_starts_match_oracle_and_cover():
    for extent in range(1, 301):
        got = window_starts(extent, 64, 20)
        assert got == starts_oracle(extent, 64, 20), extent
        covered = np.zeros(max(extent, 64), dtype=bool)
        for s in got:
            covered[s : s + 64] = True
        assert covered[:extent].all(), extent
        assert got == sorted(set(got))


def test_window_starts_validation():
    with pytest.raises(DataError):
        window_starts(0, 64, 20)
    with pytest.raises(DataError):
        window_starts(10, 0, 20)


def test_vote_grid_tie_broken_by_probability_sum():
    grid = VoteGrid(dims=(1, 1, 1))
    # window A votes class 2, window B votes class 1 with fatter probability
    grid.add_window((0, 0, 0), np.array([[[2]]], dtype=np.uint8),
                    np.array([0.05, 0.30, 0.55, 0.10]).reshape(4, 1, 1, 1))
    grid.add_window((0, 0, 0), np.array([[[1]]], dtype=np.uint8),
                    np.array([0.05, 0.80, 0.10, 0.05]).reshape(4, 1, 1, 1))
    out = grid.finalize()
    assert int(out.labels[0, 0, 0]) == 1


def test_vote_grid_full_tie_falls_to_lower_class():
    grid = VoteGrid(dims=(1, 1, 1))
    probs = np.array([0.25, 0.25, 0.25, 0.25]).reshape(4, 1, 1, 1)
    grid.add_window((0, 0, 0), np.array([[[3]]], dtype=np.uint8), probs)
    grid.add_window((0, 0, 0), np.array([[[2]]], dtype=np.uint8), probs)
    out = grid.finalize()
    assert int(out.labels[0, 0, 0]) == 2


def test_vote_grid_requires_coverage():
    grid = VoteGrid(dims=(2, 1, 1))
    grid.add_window((0, 0, 0), np.array([[[1]]], dtype=np.uint8),
                    np.full((4, 1, 1, 1), 0.25))
    with pytest.raises(DataError, match="no votes"):
        grid.finalize()


def _tiny_model(seed=0):
    cfg = SegNetConfig(base_channels=2, patch_size=16, precision="f32", seed=seed,
                       max_iters=0, log_every=0)
    return SegModel(cfg)


def _volume(arr):
    return Volume3D(data=np.asarray(arr, dtype=np.int16))


def test_single_window_equals_argmax_of_forward():
    model = _tiny_model()
    rng = np.random.default_rng(0)
    hu = rng.integers(-100, 200, (16, 16, 16)).astype(np.int16)
    vol = _volume(hu)
    pred = predict_volume(model, vol)
    from s4c.segnet import normalize_hu

    win = normalize_hu(hu, model.config.normalization)
    with torch.no_grad():
        logits = model(torch.from_numpy(win[None, None]))[0][0]
    want = logits.numpy().argmax(axis=0).astype(np.uint8)
    assert np.array_equal(pred.labels, want)


def test_window_order_permutation_is_byte_identical():
    model = _tiny_model(seed=3)
    rng = np.random.default_rng(1)
    vol = _volume(rng.integers(-100, 200, (24, 24, 24)))
    base = predict_volume(model, vol, stride=8)
    n_windows = len(window_starts(24, 16, 8)) ** 3
    order_rng = np.random.default_rng(7)
    for _ in range(10):
        order = order_rng.permutation(n_windows).tolist()
        shuffled = predict_volume(model, vol, stride=8, window_order=order)
        assert shuffled.labels.tobytes() == base.labels.tobytes()


def test_bad_window_order_rejected():
    model = _tiny_model()
    vol = _volume(np.zeros((24, 24, 24)))
    with pytest.raises(DataError, match="permutation"):
        predict_volume(model, vol, stride=8, window_order=[0, 0, 1])


def _pointwise_model(seed=0):
    model = _tiny_model(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("weight") and p.ndim == 5:
                if p.shape[2:] == (3, 3, 3):
                    center = p[:, :, 1:2, 1:2, 1:2].clone()
                    p.zero_()
                    p[:, :, 1:2, 1:2, 1:2] = center
                elif p.shape[2:] == (2, 2, 2):
                    p.copy_(p.mean(dim=(2, 3, 4), keepdim=True).expand_as(p))
    return model


def test_constant_volume_translation_invariant_model_gives_constant_mask():
    model = _pointwise_model(seed=5)
    vol = _volume(np.full((24, 24, 24), 37))
    pred = predict_volume(model, vol, stride=8)
    assert len(np.unique(pred.labels)) == 1


def test_volume_smaller_than_patch_is_padded_and_cropped():
    model = _tiny_model()
    rng = np.random.default_rng(4)
    vol = _volume(rng.integers(-50, 150, (10, 12, 9)))
    pred = predict_volume(model, vol)
    assert pred.dims == (10, 12, 9)


def test_prob_scale_quantum_is_documented_value():
    assert PROB_SCALE == 2**24
