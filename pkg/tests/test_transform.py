import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tsalign.transform import (
    NORM_EPS,
    RevIN,
    TransformError,
    channel_independence,
    instance_normalize,
    make_shift_targets,
    n_patches,
    patchify,
    restack_channels,
    revin_denormalize,
    revin_normalize,
    unfold_patches,
)


# ---------------------------------------------------------------------------
# instance normalization


def test_instance_normalize_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(loc=3.0, scale=2.0, size=(24, 3))
    normed, stats = instance_normalize(torch.from_numpy(x))
    mean = x.mean(axis=0, keepdims=True)
    std = np.sqrt(x.var(axis=0, keepdims=True) + NORM_EPS)  # population variance
    np.testing.assert_allclose(normed.numpy(), (x - mean) / std, atol=1e-12)
    np.testing.assert_allclose(stats.mean.numpy(), mean, atol=1e-12)
    np.testing.assert_allclose(stats.std.numpy(), std, atol=1e-12)


def test_instance_normalize_epsilon_inside_sqrt():
    # tiny variance separates sqrt(var + eps) from sqrt(var) + eps clearly
    x = torch.tensor([[0.0], [1e-4], [0.0], [1e-4]], dtype=torch.float64)
    normed, stats = instance_normalize(x)
    var = 2.5e-9
    assert stats.std[0, 0].item() == pytest.approx(np.sqrt(var + NORM_EPS), rel=1e-12)
    assert normed.abs().max().item() == pytest.approx(5e-5 / np.sqrt(var + NORM_EPS), rel=1e-9)


def test_instance_normalize_constant_window_is_finite():
    x = torch.full((10, 2), 4.2)
    normed, _ = instance_normalize(x)
    assert torch.isfinite(normed).all()
    assert normed.abs().max().item() == 0.0


def test_instance_normalize_batched_matches_loop():
    x = torch.randn(5, 12, 3, dtype=torch.float64)
    batched, stats = instance_normalize(x)
    assert stats.mean.shape == (5, 1, 3)
    for b in range(5):
        single, _ = instance_normalize(x[b])
        torch.testing.assert_close(batched[b], single, rtol=0, atol=0)


def test_instance_normalize_needs_two_steps():
    with pytest.raises(TransformError):
        instance_normalize(torch.zeros(1, 3))


# ---------------------------------------------------------------------------
# RevIN


def test_revin_normalize_applies_affine():
    x = torch.randn(16, 2, dtype=torch.float64)
    revin = RevIN(2, dtype=torch.float64)
    with torch.no_grad():
        revin.gamma.copy_(torch.tensor([2.0, -0.5], dtype=torch.float64))
        revin.beta.copy_(torch.tensor([1.0, 3.0], dtype=torch.float64))
    y, stats = revin.normalize(x)
    plain, _ = instance_normalize(x)
    torch.testing.assert_close(y, plain * revin.gamma + revin.beta, rtol=0, atol=1e-14)


def test_revin_round_trip_random_affines():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = torch.tensor(rng.normal(size=(32, 3)), dtype=torch.float64)
        revin = RevIN(3, dtype=torch.float64)
        with torch.no_grad():
            gamma = rng.uniform(0.01, 3.0, size=3) * rng.choice([-1.0, 1.0], size=3)
            revin.gamma.copy_(torch.tensor(gamma))
            revin.beta.copy_(torch.tensor(rng.normal(size=3)))
        y, stats = revin_normalize(x, revin)
        back = revin_denormalize(y, stats, revin)
        assert (back - x).abs().max().item() < 1e-12


def test_revin_denormalize_rejects_degenerate_gamma():
    revin = RevIN(2)
    x = torch.randn(8, 2)
    y, stats = revin.normalize(x)
    with torch.no_grad():
        revin.gamma[0] = 0.0
    with pytest.raises(TransformError, match="gamma"):
        revin.denormalize(y, stats)


def test_revin_trainable_flag():
    assert RevIN(2).gamma.requires_grad
    frozen = RevIN(2, trainable=False)
    assert not frozen.gamma.requires_grad and not frozen.beta.requires_grad


def test_revin_shares_affine_between_directions():
    # same parameter objects drive both directions, so editing gamma after
    # normalize breaks the round trip
    x = torch.randn(16, 1, dtype=torch.float64)
    revin = RevIN(1, dtype=torch.float64)
    y, stats = revin.normalize(x)
    with torch.no_grad():
        revin.gamma += 1.0
    assert (revin.denormalize(y, stats) - x).abs().max().item() > 1e-3


# ---------------------------------------------------------------------------
# channel independence


def test_channel_independence_2d():
    x = torch.arange(12.0).reshape(4, 3)
    ci = channel_independence(x)
    assert ci.shape == (3, 4)
    for c in range(3):
        torch.testing.assert_close(ci[c], x[:, c], rtol=0, atol=0)


def test_channel_independence_batched_window_major():
    x = torch.randn(4, 6, 3)
    ci = channel_independence(x)
    assert ci.shape == (12, 6)
    for b in range(4):
        for c in range(3):
            torch.testing.assert_close(ci[b * 3 + c], x[b, :, c], rtol=0, atol=0)


def test_restack_channels_inverts():
    x = torch.randn(5, 7, 2)
    torch.testing.assert_close(restack_channels(channel_independence(x), 2), x, rtol=0, atol=0)


def test_restack_channels_validates_multiple():
    with pytest.raises(TransformError):
        restack_channels(torch.zeros(7, 4), 2)


def test_channel_independence_rejects_4d():
    with pytest.raises(TransformError):
        channel_independence(torch.zeros(2, 2, 2, 2))


# ---------------------------------------------------------------------------
# patching


def test_n_patches_reference_settings():
    assert n_patches(512, 16, 8) == 63
    assert n_patches(336, 16, 8) == 41
    assert n_patches(512, 12, 12) == 42


def test_unfold_patches_matches_slicing_oracle():
    x = torch.arange(20.0)
    patches = unfold_patches(x, patch_len=6, stride=3)
    assert patches.shape == (5, 6)
    for j in range(5):
        torch.testing.assert_close(patches[j], x[j * 3 : j * 3 + 6], rtol=0, atol=0)


def test_unfold_patches_drops_trailing_remainder():
    # 11 samples with P=4, S=3 -> 3 patches; sample 10 is never used
    x = torch.arange(11.0)
    patches = unfold_patches(x, 4, 3)
    assert patches.shape == (3, 4)
    assert patches.max().item() == 9.0


def test_unfold_patches_short_series_errors():
    with pytest.raises(TransformError):
        unfold_patches(torch.zeros(3), patch_len=4, stride=1)


def test_patchify_timestamps_and_interval():
    x = torch.arange(10.0)
    ts = 1000 + 60 * np.arange(10, dtype=np.int64)
    grid = patchify(x, patch_len=4, stride=3, timestamps=ts)
    assert grid.t_p == 3
    np.testing.assert_array_equal(grid.patch_start_timestamps, [1000, 1180, 1360])
    assert grid.sampling_interval == 60


def test_patchify_rejects_multivariate():
    with pytest.raises(TransformError):
        patchify(torch.zeros(10, 2), 4, 2)


def test_patchify_timestamp_length_mismatch():
    with pytest.raises(TransformError):
        patchify(torch.zeros(10), 4, 2, timestamps=np.arange(9))


def test_make_shift_targets_exact():
    grid = patchify(torch.arange(16.0), patch_len=4, stride=2)
    pair = make_shift_targets(grid)
    assert pair.inputs.shape == pair.targets.shape == (grid.t_p - 1, 4)
    for j in range(grid.t_p - 1):
        assert torch.equal(pair.inputs[j], grid.patches[j])
        assert torch.equal(pair.targets[j], grid.patches[j + 1])


def test_make_shift_targets_needs_two_patches():
    grid = patchify(torch.arange(4.0), patch_len=4, stride=4)
    with pytest.raises(TransformError):
        make_shift_targets(grid)


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(
    t_in=st.integers(min_value=1, max_value=600),
    p=st.integers(min_value=1, max_value=32),
    s=st.integers(min_value=1, max_value=32),
)
def test_patch_count_property(t_in, p, s):
    if t_in < p:
        with pytest.raises(TransformError):
            unfold_patches(torch.zeros(t_in), p, s)
    else:
        count = unfold_patches(torch.zeros(t_in), p, s).shape[0]
        assert count == (t_in - p) // s + 1 == n_patches(t_in, p, s)
        # every patch fits inside the series
        assert (count - 1) * s + p <= t_in


@settings(max_examples=25, deadline=None)
@given(
    b=st.integers(min_value=1, max_value=4),
    t=st.integers(min_value=2, max_value=20),
    c=st.integers(min_value=1, max_value=5),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_normalize_statistics_property(b, t, c, seed):
    rng = np.random.default_rng(seed)
    # keep variance well above the epsilon so the expected std is predictable
    x = torch.tensor(rng.normal(scale=2.0, size=(b, t, c)) + rng.normal(size=c), dtype=torch.float64)
    normed, _ = instance_normalize(x)
    var = x.numpy().var(axis=1)
    np.testing.assert_allclose(normed.numpy().mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(
        normed.numpy().std(axis=1), np.sqrt(var / (var + NORM_EPS)), atol=1e-9
    )
