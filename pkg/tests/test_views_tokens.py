"""View, tokenization, masking, and embedding tests."""

import numpy as np
import pytest

from xkd.autograd import ContractError, Tensor
from xkd.views_tokens import (
    AUDIO,
    VIDEO,
    ClipPair,
    EmbedParams,
    TokenBatch,
    ViewConfig,
    embed,
    embed_batch,
    make_views,
    mask_tokens,
    patchify,
    unpatchify,
)


def tiny_clip(seed=0):
    rng = np.random.default_rng(seed)
    return ClipPair(
        video=rng.uniform(size=(8, 16, 16, 1)),
        audio=rng.normal(size=(16, 32)),
        label=0,
        seed=seed,
    )


def tiny_view_cfg(**kw):
    return ViewConfig(video_local_shape=(4, 8, 8), audio_local_frames=8, **kw)


# ---------------------------------------------------------------------------
# make_views
# ---------------------------------------------------------------------------


def test_make_views_deterministic():
    clip = tiny_clip()
    cfg = tiny_view_cfg(n_locals=2)
    a = make_views(clip, cfg, np.random.default_rng(42))
    b = make_views(clip, cfg, np.random.default_rng(42))
    np.testing.assert_array_equal(a.global_video, b.global_video)
    np.testing.assert_array_equal(a.global_audio, b.global_audio)
    for la, lb in zip(a.local_videos, b.local_videos):
        np.testing.assert_array_equal(la, lb)
    for la, lb in zip(a.local_audios, b.local_audios):
        np.testing.assert_array_equal(la, lb)


def test_make_views_identity_when_augmentation_off():
    clip = tiny_clip(3)
    cfg = tiny_view_cfg().without_augmentation()
    views = make_views(clip, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(views.global_video, clip.video)
    np.testing.assert_array_equal(views.global_audio, clip.audio)


def test_make_views_shapes_and_strict_crops():
    clip = tiny_clip(1)
    cfg = tiny_view_cfg(n_locals=3)
    views = make_views(clip, cfg, np.random.default_rng(5))
    assert views.global_video.shape == clip.video.shape
    assert views.global_audio.shape == clip.audio.shape
    assert views.n == 3
    for lv in views.local_videos:
        assert lv.shape == (4, 8, 8, 1)
    for la in views.local_audios:
        assert la.shape == (16, 8)


def test_make_views_rejects_oversized_local():
    clip = tiny_clip()
    cfg = ViewConfig(video_local_shape=(16, 8, 8), audio_local_frames=8)
    with pytest.raises(ContractError):
        make_views(clip, cfg, np.random.default_rng(0))


def test_paper_scale_local_video_is_8_frames():
    # 1-second window at 8 fps
    from xkd.presets import paper_view_config

    cfg = paper_view_config()
    assert cfg.video_local_shape == (8, 96, 96)
    assert cfg.audio_local_frames == 112


# ---------------------------------------------------------------------------
# patchify / unpatchify
# ---------------------------------------------------------------------------


def test_patchify_paper_scale_video_token_count():
    view = np.zeros((32, 112, 112, 3))
    batch = patchify(view, VIDEO, (4, 16, 16))
    assert batch.n_tokens == 392
    assert batch.tokens.shape == (392, 4 * 16 * 16 * 3)


def test_patchify_paper_scale_audio_token_count():
    view = np.zeros((80, 448))
    batch = patchify(view, AUDIO, (4, 16))
    assert batch.n_tokens == 560


def test_patchify_tiny_video_example():
    view = np.arange(8 * 16 * 16).reshape(8, 16, 16, 1).astype(float)
    batch = patchify(view, VIDEO, (2, 8, 8))
    assert batch.n_tokens == 16
    assert batch.tokens.shape[1] == 128


def test_patchify_token_order_is_grid_lexicographic():
    # encode grid coordinates in the values and check token 0 row-major order
    t, h, w = 4, 4, 4
    view = np.zeros((t, h, w, 1))
    for tt in range(t):
        for hh in range(h):
            for ww in range(w):
                view[tt, hh, ww, 0] = 100 * tt + 10 * hh + ww
    batch = patchify(view, VIDEO, (2, 2, 2))
    # token index = gt*4 + gh*2 + gw; its first element is the patch corner
    for gt in range(2):
        for gh in range(2):
            for gw in range(2):
                tok = batch.tokens[gt * 4 + gh * 2 + gw]
                assert tok[0] == 100 * (2 * gt) + 10 * (2 * gh) + 2 * gw
    # within-patch flattening is row-major over (t, h, w, c)
    assert batch.tokens[0][1] == view[0, 0, 1, 0]
    assert batch.tokens[0][2] == view[0, 1, 0, 0]
    assert batch.tokens[0][4] == view[1, 0, 0, 0]


def test_patchify_unpatchify_identity_video_and_audio():
    rng = np.random.default_rng(11)
    for _ in range(100):
        v = rng.normal(size=(4, 8, 8, 2))
        b = patchify(v, VIDEO, (2, 4, 4))
        np.testing.assert_array_equal(unpatchify(b.tokens, VIDEO, b.grid, (2, 4, 4), 2), v)
        a = rng.normal(size=(8, 12))
        ba = patchify(a, AUDIO, (4, 3))
        np.testing.assert_array_equal(unpatchify(ba.tokens, AUDIO, ba.grid, (4, 3)), a)


def test_patchify_rejects_non_divisible():
    with pytest.raises(ContractError):
        patchify(np.zeros((5, 8, 8, 1)), VIDEO, (2, 4, 4))
    with pytest.raises(ContractError):
        patchify(np.zeros((8, 9)), AUDIO, (4, 2))


# ---------------------------------------------------------------------------
# mask_tokens
# ---------------------------------------------------------------------------


def test_mask_zero_ratio():
    batch = patchify(np.zeros((8, 16)), AUDIO, (4, 4))
    out = mask_tokens(batch, 0.0, np.random.default_rng(0))
    assert not out.mask.any()
    np.testing.assert_array_equal(out.kept_indices, np.arange(out.n_tokens))


def test_mask_count_matches_floor_rule():
    tokens = TokenBatch(VIDEO, np.zeros((392, 4)), (392,), np.zeros(392, bool), np.arange(392))
    out = mask_tokens(tokens, 0.85, np.random.default_rng(1))
    assert out.mask.sum() == 333
    assert len(out.kept_indices) == 59


def test_mask_deterministic_and_partition():
    batch = patchify(np.zeros((8, 16)), AUDIO, (4, 4))
    a = mask_tokens(batch, 0.5, np.random.default_rng(9))
    b = mask_tokens(batch, 0.5, np.random.default_rng(9))
    np.testing.assert_array_equal(a.mask, b.mask)
    merged = np.sort(np.concatenate([a.kept_indices, np.flatnonzero(a.mask)]))
    np.testing.assert_array_equal(merged, np.arange(batch.n_tokens))


def test_mask_distribution_uniform():
    n, ratio, draws = 20, 0.3, 10_000
    batch = TokenBatch(AUDIO, np.zeros((n, 2)), (n,), np.zeros(n, bool), np.arange(n))
    rng = np.random.default_rng(123)
    counts = np.zeros(n)
    for _ in range(draws):
        counts += mask_tokens(batch, ratio, rng).mask
    freq = counts / draws
    assert np.abs(freq - ratio).max() < 0.02


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def _embed_params(d_patch, d_model, grids, scale=0.1, seed=0):
    rng = np.random.default_rng(seed)
    return EmbedParams.create(d_patch, d_model, grids, lambda s: rng.normal(size=s) * scale)


def test_embed_zero_params_give_zero_sequence():
    batch = patchify(np.ones((8, 16)), AUDIO, (4, 4))
    params = EmbedParams.create(16, 6, [batch.grid], np.zeros)
    out = embed(batch, params, drop_masked=False)
    assert out.shape == (batch.n_tokens + 1, 6)
    np.testing.assert_array_equal(out.data, 0.0)


def test_embed_dropped_length():
    rng = np.random.default_rng(2)
    batch = patchify(rng.normal(size=(8, 16)), AUDIO, (4, 4))  # 8 tokens
    masked = mask_tokens(batch, 0.5, rng)
    params = _embed_params(16, 6, [batch.grid])
    out = embed(masked, params, drop_masked=True)
    assert out.shape == (5, 6)  # 4 kept + CLS


def test_embed_ignores_masked_token_contents():
    rng = np.random.default_rng(3)
    batch = patchify(rng.normal(size=(8, 16)), AUDIO, (4, 4))
    masked = mask_tokens(batch, 0.5, rng)
    params = _embed_params(16, 6, [batch.grid])
    out1 = embed(masked, params, drop_masked=True)
    scrambled = masked.tokens.copy()
    scrambled[masked.mask] = rng.normal(size=scrambled[masked.mask].shape)
    masked2 = TokenBatch(AUDIO, scrambled, masked.grid, masked.mask, masked.kept_indices)
    out2 = embed(masked2, params, drop_masked=True)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_embed_positional_rows_follow_original_index():
    rng = np.random.default_rng(4)
    batch = patchify(rng.normal(size=(8, 16)), AUDIO, (4, 4))
    params = _embed_params(16, 6, [batch.grid])
    mask_a = mask_tokens(batch, 0.5, np.random.default_rng(10))
    mask_b = mask_tokens(batch, 0.5, np.random.default_rng(20))
    out_a = embed(mask_a, params, drop_masked=True)
    out_b = embed(mask_b, params, drop_masked=True)
    common = np.intersect1d(mask_a.kept_indices, mask_b.kept_indices)
    assert common.size > 0
    for idx in common:
        ra = 1 + np.flatnonzero(mask_a.kept_indices == idx)[0]
        rb = 1 + np.flatnonzero(mask_b.kept_indices == idx)[0]
        np.testing.assert_array_equal(out_a.data[ra], out_b.data[rb])


def test_embed_batch_matches_single():
    rng = np.random.default_rng(5)
    batches = []
    for seed in (1, 2, 3):
        b = patchify(rng.normal(size=(8, 16)), AUDIO, (4, 4))
        batches.append(mask_tokens(b, 0.5, np.random.default_rng(seed)))
    params = _embed_params(16, 6, [batches[0].grid])
    stacked = embed_batch(batches, params, drop_masked=True)
    for i, b in enumerate(batches):
        np.testing.assert_allclose(stacked.data[i], embed(b, params, drop_masked=True).data)


def test_embed_unknown_geometry_rejected():
    batch = patchify(np.zeros((8, 16)), AUDIO, (4, 4))
    params = _embed_params(16, 6, [(99, 99)])
    with pytest.raises(ContractError):
        embed(batch, params, drop_masked=False)


def test_embed_gradients_flow_to_params():
    import xkd.autograd as ag

    rng = np.random.default_rng(6)
    batch = mask_tokens(patchify(rng.normal(size=(8, 16)), AUDIO, (4, 4)), 0.5, rng)
    params = _embed_params(16, 4, [batch.grid])
    out = embed(batch, params, drop_masked=True)
    ag.mean(ag.square(out)).backward()
    for t in (params.proj_w, params.proj_b, params.pos_table, params.cls):
        assert t.grad is not None and np.isfinite(t.grad).all()
    # only kept rows (plus CLS row 0) of the positional table receive gradient
    touched = np.flatnonzero(np.abs(params.pos_table.grad).sum(axis=1))
    expected = np.concatenate([[0], 1 + batch.kept_indices])
    np.testing.assert_array_equal(touched, expected)
