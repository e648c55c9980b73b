"""View construction, patch tokenization, random masking, and token embedding.

A clip pair (video frames + spectrogram) is turned into one mildly augmented
global view per modality and ``n`` aggressively augmented local views. Views
are tokenized into flattened cuboids/patches, masked by dropping a uniform
random subset of positions, and embedded (linear projection + learned
positional rows + CLS prefix).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor

VIDEO = "video"
AUDIO = "audio"


@dataclass
class ClipPair:
    """One synthetic sample: video in [0,1], log-mel-like audio, class, seed."""

    video: np.ndarray  # (T, H, W, C) float64 in [0, 1]
    audio: np.ndarray  # (F, T_a) float64
    label: int
    seed: int


@dataclass
class ViewSet:
    global_video: np.ndarray
    global_audio: np.ndarray
    local_videos: list
    local_audios: list

    @property
    def n(self):
        return len(self.local_videos)


@dataclass
class ViewConfig:
    """Augmentation parameters and local-view geometry.

    Globals keep the full source duration/extent (crop-resize back to source
    size); locals are strict temporal (and spatial, for video) crops. Setting
    the probabilities to 0 and the global crop scale to (1, 1) makes the
    global views exact copies of the source.
    """

    video_local_shape: tuple  # (T_l, H_l, W_l)
    audio_local_frames: int  # local time extent; frequency axis stays full
    n_locals: int = 1
    global_crop_scale: tuple = (0.2, 1.0)
    local_crop_scale: tuple = (0.08, 0.4)
    flip_p: float = 0.5
    color_jitter: float = 0.4  # brightness/contrast strength
    gray_p: float = 0.2
    blur_p: float = 0.5
    global_volume_jitter: float = 0.1
    local_volume_jitter: float = 0.2
    audio_crop_range: tuple = (0.6, 1.5)

    def without_augmentation(self):
        return replace(
            self,
            global_crop_scale=(1.0, 1.0),
            local_crop_scale=(1.0, 1.0),
            flip_p=0.0,
            color_jitter=0.0,
            gray_p=0.0,
            blur_p=0.0,
            global_volume_jitter=0.0,
            local_volume_jitter=0.0,
            audio_crop_range=(1.0, 1.0),
        )


@dataclass
class TokenBatch:
    """Modality-tagged token matrix with grid geometry and mask bookkeeping."""

    modality: str
    tokens: np.ndarray  # (N, D_patch)
    grid: tuple  # video (Gt, Gh, Gw); audio (Gf, Gt)
    mask: np.ndarray  # bool (N,), True = masked
    kept_indices: np.ndarray  # ascending positions where mask is False

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


# ---------------------------------------------------------------------------
# array helpers (pure, rng-free)
# ---------------------------------------------------------------------------


def _resize_bilinear(frames, out_h, out_w):
    """Bilinear spatial resize of (..., H, W, C) arrays; identity when sizes match."""
    h, w = frames.shape[-3], frames.shape[-2]
    if (h, w) == (out_h, out_w):
        return frames.copy()

    def grid(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = grid(h, out_h)
    x0, x1, fx = grid(w, out_w)
    rows0 = frames[..., y0, :, :]
    rows1 = frames[..., y1, :, :]
    fy = fy.reshape((-1, 1, 1))
    mid = rows0 * (1.0 - fy) + rows1 * fy
    cols0 = mid[..., :, x0, :]
    cols1 = mid[..., :, x1, :]
    fx = fx.reshape((-1, 1))
    return cols0 * (1.0 - fx) + cols1 * fx


def _stretch_time(spec, out_t):
    """Linear resample of an (F, T) spectrogram along time; identity when equal."""
    f, t_in = spec.shape
    if t_in == out_t:
        return spec.copy()
    src = (np.arange(out_t) + 0.5) * (t_in / out_t) - 0.5
    src = np.clip(src, 0.0, t_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, t_in - 1)
    frac = src - lo
    return spec[:, lo] * (1.0 - frac) + spec[:, hi] * frac


_BLUR_1D = np.array([0.25, 0.5, 0.25])


def _blur3x3(frames):
    """Separable 3x3 binomial filter over the spatial axes, edge padding."""
    padded = np.pad(frames, [(0, 0), (1, 1), (0, 0), (0, 0)], mode="edge")
    out = sum(_BLUR_1D[k] * padded[:, k : k + frames.shape[1], :, :] for k in range(3))
    padded = np.pad(out, [(0, 0), (0, 0), (1, 1), (0, 0)], mode="edge")
    return sum(_BLUR_1D[k] * padded[:, :, k : k + frames.shape[2], :] for k in range(3))


def _crop_extent(extent, area_scale):
    return max(1, min(extent, int(round(extent * np.sqrt(area_scale)))))


def _spatial_crop_resize(frames, scale_range, out_h, out_w, rng):
    t, h, w, c = frames.shape
    s = rng.uniform(scale_range[0], scale_range[1])
    ch = _crop_extent(h, s)
    cw = _crop_extent(w, s)
    top = rng.integers(0, h - ch + 1)
    left = rng.integers(0, w - cw + 1)
    window = frames[:, top : top + ch, left : left + cw, :]
    return _resize_bilinear(window, out_h, out_w)


def _photometric(frames, jitter, rng):
    brightness = rng.uniform(1.0 - jitter, 1.0 + jitter)
    contrast = rng.uniform(1.0 - jitter, 1.0 + jitter)
    out = frames * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# view construction
# ---------------------------------------------------------------------------


def make_views(clip: ClipPair, cfg: ViewConfig, rng: np.random.Generator) -> ViewSet:
    """Build the global and local views of one clip.

    All randomness comes from ``rng``; the draw order is fixed, so a seeded
    generator reproduces the ViewSet exactly.
    """
    t, h, w, _ = clip.video.shape
    f, t_a = clip.audio.shape
    lt, lh, lw = cfg.video_local_shape
    if lt > t or lh > h or lw > w:
        raise ContractError(f"local video shape {cfg.video_local_shape} exceeds source {clip.video.shape}")
    if cfg.audio_local_frames > t_a:
        raise ContractError(f"local audio frames {cfg.audio_local_frames} exceed source {t_a}")

    # global video: full duration, mild spatial crop + flip + jitter
    gv = _spatial_crop_resize(clip.video, cfg.global_crop_scale, h, w, rng)
    if rng.uniform() < cfg.flip_p:
        gv = gv[:, :, ::-1, :]
    gv = _photometric(gv, cfg.color_jitter, rng)

    # global audio: volume jitter only
    ga = clip.audio * (1.0 + rng.uniform(-cfg.global_volume_jitter, cfg.global_volume_jitter))

    local_videos = []
    local_audios = []
    for _ in range(cfg.n_locals):
        start = rng.integers(0, t - lt + 1)
        seg = clip.video[start : start + lt]
        lv = _spatial_crop_resize(seg, cfg.local_crop_scale, lh, lw, rng)
        if rng.uniform() < cfg.flip_p:
            lv = lv[:, :, ::-1, :]
        lv = _photometric(lv, cfg.color_jitter, rng)
        if rng.uniform() < cfg.gray_p:
            lv = np.broadcast_to(lv.mean(axis=-1, keepdims=True), lv.shape).copy()
        if rng.uniform() < cfg.blur_p:
            lv = _blur3x3(lv)
        local_videos.append(np.ascontiguousarray(lv))

        factor = rng.uniform(cfg.audio_crop_range[0], cfg.audio_crop_range[1])
        win = max(1, min(t_a, int(round(factor * cfg.audio_local_frames))))
        astart = rng.integers(0, t_a - win + 1)
        la = _stretch_time(clip.audio[:, astart : astart + win], cfg.audio_local_frames)
        la = la * (1.0 + rng.uniform(-cfg.local_volume_jitter, cfg.local_volume_jitter))
        local_audios.append(np.ascontiguousarray(la))

    return ViewSet(
        global_video=np.ascontiguousarray(gv),
        global_audio=np.ascontiguousarray(ga),
        local_videos=local_videos,
        local_audios=local_audios,
    )


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


def patchify(view: np.ndarray, modality: str, patch: tuple) -> TokenBatch:
    """Cut a view into non-overlapping flattened patches (mask empty).

    Token order is lexicographic in grid coordinates: time-major for video
    (t, then height, then width), frequency-major for audio (f, then time).
    Each token is the row-major flattening of its patch across all channels.
    """
    if modality == VIDEO:
        if view.ndim != 4:
            raise ContractError(f"video view must be (T,H,W,C), got shape {view.shape}")
        t, h, w, c = view.shape
        pt, ph, pw = patch
        if t % pt or h % ph or w % pw:
            raise ContractError(f"video extents {view.shape[:3]} not divisible by cuboid {patch}")
        grid = (t // pt, h // ph, w // pw)
        tokens = (
            view.reshape(grid[0], pt, grid[1], ph, grid[2], pw, c)
            .transpose(0, 2, 4, 1, 3, 5, 6)
            .reshape(int(np.prod(grid)), pt * ph * pw * c)
        )
    elif modality == AUDIO:
        if view.ndim != 2:
            raise ContractError(f"audio view must be (F,T), got shape {view.shape}")
        f, t = view.shape
        pf, pt = patch
        if f % pf or t % pt:
            raise ContractError(f"audio extents {view.shape} not divisible by patch {patch}")
        grid = (f // pf, t // pt)
        tokens = (
            view.reshape(grid[0], pf, grid[1], pt)
            .transpose(0, 2, 1, 3)
            .reshape(int(np.prod(grid)), pf * pt)
        )
    else:
        raise ContractError(f"unknown modality {modality!r}")
    n = tokens.shape[0]
    return TokenBatch(
        modality=modality,
        tokens=np.ascontiguousarray(tokens, dtype=np.float64),
        grid=grid,
        mask=np.zeros(n, dtype=bool),
        kept_indices=np.arange(n),
    )


def unpatchify(tokens: np.ndarray, modality: str, grid: tuple, patch: tuple, channels: int = 1):
    """Inverse of ``patchify``: reassemble a (N, D_patch) matrix into a view."""
    if modality == VIDEO:
        gt, gh, gw = grid
        pt, ph, pw = patch
        return (
            tokens.reshape(gt, gh, gw, pt, ph, pw, channels)
            .transpose(0, 3, 1, 4, 2, 5, 6)
            .reshape(gt * pt, gh * ph, gw * pw, channels)
        )
    if modality == AUDIO:
        gf, gt = grid
        pf, pt = patch
        return (
            tokens.reshape(gf, gt, pf, pt).transpose(0, 2, 1, 3).reshape(gf * pf, gt * pt)
        )
    raise ContractError(f"unknown modality {modality!r}")


def mask_tokens(batch: TokenBatch, ratio: float, rng: np.random.Generator) -> TokenBatch:
    """Mask floor(ratio * N) positions sampled uniformly without replacement.

    Token contents are untouched; dropping happens at embed time by
    gathering ``kept_indices``.
    """
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"mask ratio must lie in [0, 1), got {ratio}")
    n = batch.n_tokens
    n_masked = int(np.floor(ratio * n))
    mask = np.zeros(n, dtype=bool)
    if n_masked:
        mask[rng.choice(n, size=n_masked, replace=False)] = True
    return TokenBatch(
        modality=batch.modality,
        tokens=batch.tokens,
        grid=batch.grid,
        mask=mask,
        kept_indices=np.flatnonzero(~mask),
    )


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


@dataclass
class EmbedParams:
    """Per-modality input projection, positional table, CLS and mask tokens.

    The positional table reserves row 0 for the CLS position and gives each
    distinct view geometry its own contiguous block of rows, indexed by the
    token's flattened grid coordinate.
    """

    proj_w: Tensor  # (D_patch, D_model)
    proj_b: Tensor  # (D_model,)
    pos_table: Tensor  # (N_max, D_model)
    cls: Tensor  # (D_model,)
    mask_token: Tensor  # (D_model,), consumed by the decoder
    regions: dict = field(default_factory=dict)  # grid -> first positional row

    @classmethod
    def create(cls, d_patch, d_model, grids, init_fn):
        """Allocate parameters; ``init_fn(shape)`` returns an initial array."""
        regions = {}
        offset = 1  # row 0 belongs to CLS
        for grid in grids:
            grid = tuple(int(g) for g in grid)
            if grid not in regions:
                regions[grid] = offset
                offset += int(np.prod(grid))
        return cls(
            proj_w=Tensor(init_fn((d_patch, d_model)), requires_grad=True),
            proj_b=Tensor(np.zeros(d_model), requires_grad=True),
            pos_table=Tensor(init_fn((offset, d_model)), requires_grad=True),
            cls=Tensor(init_fn((d_model,)), requires_grad=True),
            mask_token=Tensor(init_fn((d_model,)), requires_grad=True),
            regions=dict(regions),
        )

    def named(self, prefix):
        return {
            f"{prefix}.proj_w": self.proj_w,
            f"{prefix}.proj_b": self.proj_b,
            f"{prefix}.pos_table": self.pos_table,
            f"{prefix}.cls": self.cls,
            f"{prefix}.mask_token": self.mask_token,
        }

    def region_offset(self, grid):
        grid = tuple(int(g) for g in grid)
        if grid not in self.regions:
            raise ContractError(f"positional table has no region for grid {grid}; known: {sorted(self.regions)}")
        return self.regions[grid]


def embed(batch: TokenBatch, params: EmbedParams, drop_masked: bool) -> Tensor:
    """Embed one TokenBatch into an (M+1, D_model) sequence with CLS at row 0.

    With ``drop_masked`` only kept rows are projected; each row adds the
    positional entry of its original grid index, so masked-out token
    contents are never read.
    """
    seqs = embed_batch([batch], params, drop_masked)
    return ag.reshape(seqs, seqs.shape[1:])


def embed_batch(batches, params: EmbedParams, drop_masked: bool) -> Tensor:
    """Embed same-geometry TokenBatches into a (B, M+1, D_model) sequence."""
    first = batches[0]
    d_patch = first.tokens.shape[1]
    if params.proj_w.shape[0] != d_patch:
        raise ContractError(
            f"token length {d_patch} does not match projection input width {params.proj_w.shape[0]}"
        )
    offset = params.region_offset(first.grid)
    if drop_masked:
        indices = np.stack([b.kept_indices for b in batches])  # (B, M), equal M per batch
    else:
        indices = np.tile(np.arange(first.n_tokens), (len(batches), 1))
    rows = np.stack([b.tokens[idx] for b, idx in zip(batches, indices)])  # (B, M, D_patch)

    x = ag.matmul(Tensor(rows), params.proj_w)
    x = ag.add(x, params.proj_b)
    pos = ag.slice_(params.pos_table, (offset + indices,))  # (B, M, D_model)
    x = ag.add(x, pos)

    cls_row = ag.add(params.cls, ag.slice_(params.pos_table, (0,)))
    cls_tile = ag.slice_(
        ag.reshape(cls_row, (1, 1, -1)), (np.zeros(len(batches), dtype=int),)
    )  # (B, 1, D_model)
    return ag.concat([cls_tile, x], axis=1)
