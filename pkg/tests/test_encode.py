import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tsalign.data import parse_timestamp
from tsalign.encode import (
    DEFAULT_ATTRIBUTES,
    EncodeError,
    EncoderConfig,
    PatchEncoder,
    TemporalAttributeSpec,
    combine_embeddings,
    extract_calendar,
    patch_attribute_indices,
    positional_embed,
    temporal_embed,
    token_encode,
)
from tsalign.transform import patchify


def gmtime_oracle(ts: int) -> list[int]:
    # independent route through the C gmtime, not datetime
    tm = time.gmtime(ts)
    return [tm.tm_min, tm.tm_hour, tm.tm_wday, tm.tm_mday - 1, tm.tm_mon - 1]


# ---------------------------------------------------------------------------
# calendar extraction


def test_extract_calendar_known_timestamps():
    # 2016-07-01 00:00:00 UTC is a Friday
    row = extract_calendar(np.array([parse_timestamp("2016-07-01 00:00:00")]))[0]
    np.testing.assert_array_equal(row, [0, 0, 4, 0, 6])
    # epoch zero is a Thursday
    row = extract_calendar(np.array([0]))[0]
    np.testing.assert_array_equal(row, [0, 0, 3, 0, 0])
    # leap day, late evening
    row = extract_calendar(np.array([parse_timestamp("2016-02-29 23:45:00")]))[0]
    np.testing.assert_array_equal(row, [45, 23, 0, 28, 1])  # a Monday


def test_extract_calendar_matches_gmtime_oracle():
    rng = np.random.default_rng(0)
    ts = rng.integers(0, 4_000_000_000, size=200)
    idx = extract_calendar(ts)
    for i, t in enumerate(ts):
        np.testing.assert_array_equal(idx[i], gmtime_oracle(int(t)))


def test_extract_calendar_respects_attribute_order():
    spec = TemporalAttributeSpec.from_names(("hour_of_day", "day_of_week"))
    ts = np.array([parse_timestamp("2016-07-01 13:00:00")])
    np.testing.assert_array_equal(extract_calendar(ts, spec), [[13, 4]])


def test_extract_calendar_month_boundary():
    before = parse_timestamp("2016-01-31 23:00:00")
    idx = extract_calendar(np.array([before, before + 3600]))
    np.testing.assert_array_equal(idx[0], [0, 23, 6, 30, 0])  # Sunday, Jan 31
    np.testing.assert_array_equal(idx[1], [0, 0, 0, 0, 1])  # Monday, Feb 1


def test_extract_calendar_minute_granularity():
    start = parse_timestamp("2016-07-01 00:00:00")
    ts = start + 900 * np.arange(4)
    np.testing.assert_array_equal(extract_calendar(ts)[:, 0], [0, 15, 30, 45])


@settings(max_examples=50, deadline=None)
@given(ts=st.integers(min_value=0, max_value=4_000_000_000))
def test_extract_calendar_index_ranges(ts):
    row = extract_calendar(np.array([ts]))[0]
    for value, (_, card) in zip(row, DEFAULT_ATTRIBUTES):
        assert 0 <= value < card


def test_temporal_attribute_spec_rejects_unknown():
    with pytest.raises(EncodeError):
        TemporalAttributeSpec(attributes=(("season", 4),))
    with pytest.raises(EncodeError):
        TemporalAttributeSpec(attributes=(("hour_of_day", 12),))


# ---------------------------------------------------------------------------
# token / positional / temporal embeddings


@pytest.fixture
def encoder():
    cfg = EncoderConfig(patch_len=4, embed_dim=6, kernel_width=3, max_patches=8)
    return PatchEncoder(cfg, dtype=torch.float64)


def test_token_embedding_matches_conv_oracle(encoder):
    rng = np.random.default_rng(1)
    patches = rng.normal(size=(5, 4))  # (T_p, P)
    out = encoder.token_embedding(torch.from_numpy(patches)).detach().numpy()
    w = encoder.token_conv.weight.detach().numpy()  # (D, P, K)
    b = encoder.token_conv.bias.detach().numpy()
    pad = 1
    padded = np.zeros((5 + 2 * pad, 4))
    padded[pad:-pad] = patches
    expected = np.zeros((5, 6))
    for t in range(5):
        for d in range(6):
            acc = b[d]
            for i in range(4):
                for k in range(3):
                    acc += w[d, i, k] * padded[t + k, i]
            expected[t, d] = acc
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_token_embedding_preserves_length_and_batches(encoder):
    patches = torch.randn(2, 7, 4, dtype=torch.float64)
    out = encoder.token_embedding(patches)
    assert out.shape == (2, 7, 6)
    single = encoder.token_embedding(patches[0])
    torch.testing.assert_close(out[0], single, rtol=0, atol=0)


def test_token_embedding_wrong_patch_len(encoder):
    with pytest.raises(EncodeError):
        encoder.token_embedding(torch.zeros(5, 3, dtype=torch.float64))


def test_positional_embedding_is_row_lookup(encoder):
    idx = torch.tensor([0, 3, 7])
    out = encoder.positional_embedding(idx)
    table = encoder.position_table.weight
    for row, i in enumerate((0, 3, 7)):
        torch.testing.assert_close(out[row], table[i], rtol=0, atol=0)


def test_positional_embedding_range_check(encoder):
    with pytest.raises(EncodeError):
        encoder.positional_embedding(torch.tensor([8]))
    with pytest.raises(EncodeError):
        encoder.positional_embedding(torch.tensor([-1]))


def test_temporal_embedding_sums_attribute_tables(encoder):
    idx = torch.tensor([[3, 14, 2, 7, 5], [59, 23, 6, 30, 11]])
    out = encoder.temporal_embedding(idx)
    names = encoder.config.temporal.names
    for t in range(2):
        expected = sum(
            encoder.temporal_tables[name].weight[idx[t, j]] for j, name in enumerate(names)
        )
        torch.testing.assert_close(out[t], expected, rtol=0, atol=1e-15)


def test_temporal_embedding_wrong_attribute_count(encoder):
    with pytest.raises(EncodeError):
        encoder.temporal_embedding(torch.zeros(3, 4, dtype=torch.long))


def test_mean_pooling_averages_timestamp_embeddings():
    cfg = EncoderConfig(patch_len=4, embed_dim=6, max_patches=8, pooling="mean")
    enc = PatchEncoder(cfg, dtype=torch.float64)
    idx = torch.randint(0, 7, size=(3, 4, 5))
    idx[..., 0] %= 60
    out = enc.temporal_embedding(idx)
    assert out.shape == (3, 6)
    # level 1 sums the tables at each timestamp, level 2 averages over the patch
    per_stamp = torch.stack(
        [
            sum(enc.temporal_tables[n].weight[idx[:, p, j]] for j, n in enumerate(cfg.temporal.names))
            for p in range(4)
        ],
        dim=1,
    )
    torch.testing.assert_close(out, per_stamp.mean(dim=1), rtol=0, atol=1e-15)


def test_forward_is_sum_of_three_encodings(encoder):
    patches = torch.randn(5, 4, dtype=torch.float64)
    start = parse_timestamp("2016-07-01 00:00:00")
    stamps = start + 3600 * np.arange(5, dtype=np.int64)
    idx = torch.from_numpy(extract_calendar(stamps))
    out = encoder(patches, idx)
    tok = encoder.token_embedding(patches)
    pos = encoder.positional_embedding(torch.arange(5))
    temp = encoder.temporal_embedding(idx)
    torch.testing.assert_close(out, combine_embeddings(tok, pos, temp), rtol=0, atol=1e-15)


def test_forward_without_temporal_indices(encoder):
    patches = torch.randn(5, 4, dtype=torch.float64)
    out = encoder(patches, None)
    tok = encoder.token_embedding(patches)
    pos = encoder.positional_embedding(torch.arange(5))
    torch.testing.assert_close(out, tok + pos, rtol=0, atol=1e-15)


def test_combine_embeddings_shape_check():
    with pytest.raises(EncodeError):
        combine_embeddings(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3, 2))


def test_no_temporal_tables_when_disabled():
    cfg = EncoderConfig(
        patch_len=4, embed_dim=6, max_patches=8, temporal=TemporalAttributeSpec.from_names(())
    )
    enc = PatchEncoder(cfg)
    assert len(enc.temporal_tables) == 0
    out = enc(torch.randn(3, 4), None)
    assert out.shape == (3, 6)


# ---------------------------------------------------------------------------
# patch-level attribute indices and op wrappers


def grid_with_times(t=16, p=4, s=4, interval=3600):
    start = parse_timestamp("2016-07-01 06:00:00")
    ts = start + interval * np.arange(t, dtype=np.int64)
    series = torch.arange(t, dtype=torch.float64)
    return patchify(series, p, s, timestamps=ts), ts


def test_patch_attribute_indices_select_first():
    grid, ts = grid_with_times()
    idx = patch_attribute_indices(grid, TemporalAttributeSpec())
    assert idx.shape == (4, 5)
    expected = extract_calendar(ts[::4][:4])
    np.testing.assert_array_equal(idx.numpy(), expected)


def test_patch_attribute_indices_mean_covers_every_timestamp():
    grid, ts = grid_with_times()
    idx = patch_attribute_indices(grid, TemporalAttributeSpec(), pooling="mean")
    assert idx.shape == (4, 4, 5)
    for j in range(4):
        np.testing.assert_array_equal(idx[j].numpy(), extract_calendar(ts[j * 4 : j * 4 + 4]))


def test_patch_attribute_indices_mean_needs_interval():
    grid = patchify(torch.arange(16.0), 4, 4)  # no timestamps
    with pytest.raises(EncodeError, match="interval"):
        patch_attribute_indices(grid, TemporalAttributeSpec(), pooling="mean")


def test_op_wrappers_match_module_methods(encoder):
    grid, _ = grid_with_times()
    torch.testing.assert_close(
        token_encode(grid, encoder),
        encoder.token_embedding(grid.patches),
        rtol=0,
        atol=0,
    )
    torch.testing.assert_close(
        positional_embed([0, 1, 2, 3], encoder),
        encoder.positional_embedding(torch.arange(4)),
        rtol=0,
        atol=0,
    )
    temp = temporal_embed(grid, encoder.config.temporal, encoder)
    assert temp.shape == (4, 6)


def test_temporal_embed_pooling_mismatch(encoder):
    grid, _ = grid_with_times()
    with pytest.raises(EncodeError, match="pooling"):
        temporal_embed(grid, encoder.config.temporal, encoder, pooling="mean")


def test_encoder_config_validation():
    with pytest.raises(EncodeError):
        EncoderConfig(patch_len=4, embed_dim=6, kernel_width=2)
    with pytest.raises(EncodeError):
        EncoderConfig(patch_len=0, embed_dim=6)
    with pytest.raises(EncodeError):
        EncoderConfig(patch_len=4, embed_dim=6, pooling="max")
