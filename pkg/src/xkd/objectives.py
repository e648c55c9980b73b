"""Loss mathematics: masked reconstruction, cross-modal attention and feature
refinement, Gaussian-kernel MMD domain alignment, temperature sharpening,
centering, cross-modal distillation, and the weighted total.

Everything differentiable is expressed in autograd ops so the whole loss
surface passes finite-difference checks. Teacher-side quantities enter as
plain arrays (or detached tensors), which is what realizes the stop-gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .optim import Schedule

LOG_CLAMP = 1e-12


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# configuration records
# ---------------------------------------------------------------------------


@dataclass
class KernelConfig:
    """Gaussian-kernel settings: explicit bandwidth or the median heuristic."""

    sigma: float | None = None  # None -> median heuristic per call
    estimator: str = "biased-squared"

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise ContractError("kernel bandwidth must be positive")
        if self.estimator != "biased-squared":
            raise ContractError(f"unsupported estimator {self.estimator!r}")


@dataclass
class CrossModalWeights:
    video: Tensor  # (H, N_v) re-weighted map for video tokens
    audio: Tensor  # (H, N_a)
    scale_video: np.ndarray  # per-head mean of the video attention rows
    scale_audio: np.ndarray


@dataclass
class CenterState:
    """Running mean of teacher outputs for one modality direction."""

    center: np.ndarray  # (J,)
    momentum: float = 0.9

    @classmethod
    def create(cls, dim, momentum=0.9):
        if not 0.0 <= momentum <= 1.0:
            raise ContractError("center momentum must lie in [0, 1]")
        return cls(center=np.zeros(dim), momentum=float(momentum))


@dataclass
class SharpenConfig:
    tau_student: float = 0.1
    tau_teacher_video: Schedule = field(
        default_factory=lambda: Schedule(base=0.04, final=0.06, total_steps=1, kind="cosine")
    )
    tau_teacher_audio: Schedule = field(
        default_factory=lambda: Schedule(base=0.04, final=0.06, total_steps=1, kind="cosine")
    )

    def __post_init__(self):
        if not 0.0 < self.tau_student < 1.0:
            raise ContractError("student temperature must lie in (0, 1)")


@dataclass
class LossWeights:
    recon: float = 5.0
    align: float = 1.0
    distill: float = 1.0

    def __post_init__(self):
        if min(self.recon, self.align, self.distill) < 0:
            raise ContractError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# masked reconstruction (per-modality and joint)
# ---------------------------------------------------------------------------


def normalize_patch_targets(tokens: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardize each patch vector (mean 0, variance 1) for use as a target."""
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + eps)


def recon_loss(pred, target):
    """Mean squared error over masked tokens and patch entries.

    An empty masked set is degenerate but legal: the loss is 0 and a warning
    is emitted.
    """
    pred = _as_tensor(pred)
    target_arr = _as_array(target)
    if pred.shape != target_arr.shape:
        raise ContractError(f"recon_loss: prediction {pred.shape} vs target {target_arr.shape}")
    if pred.size == 0:
        warnings.warn("recon_loss: no masked tokens; returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    return ag.mean(ag.square(ag.sub(pred, Tensor(target_arr))))


def joint_recon_loss(video_pred, video_target, audio_pred, audio_target):
    """Sum of the video and audio reconstruction losses."""
    return ag.add(recon_loss(video_pred, video_target), recon_loss(audio_pred, audio_target))


# ---------------------------------------------------------------------------
# cross-modal attention and feature refinement
# ---------------------------------------------------------------------------


def cross_modal_attention(attn_video, attn_audio, variant="scale") -> CrossModalWeights:
    """Combine the two modalities' CLS attention maps.

    For each head the outer product of the rows is mean-pooled over the
    opposite modality's positions; the result is either re-scaled by the
    head's own mean attention ("scale") or passed through a softmax over
    positions ("softmax").
    """
    av = _as_tensor(attn_video)
    aa = _as_tensor(attn_audio)
    if av.ndim != 2 or aa.ndim != 2:
        raise ContractError("attention maps must be (H, N)")
    if av.shape[0] != aa.shape[0]:
        raise ContractError(f"head counts differ: {av.shape[0]} vs {aa.shape[0]}")
    if variant not in ("scale", "softmax"):
        raise ContractError(f"unknown cross-modal attention variant {variant!r}")

    # MeanPool(A_v . A_a^T) over the last axis == A_v * rowmean(A_a), per head
    pooled_v = ag.mul(av, ag.mean(aa, axis=1, keepdims=True))
    pooled_a = ag.mul(aa, ag.mean(av, axis=1, keepdims=True))
    scale_v = av.data.mean(axis=1)
    scale_a = aa.data.mean(axis=1)
    if variant == "scale":
        out_v = ag.div(pooled_v, ag.mean(av, axis=1, keepdims=True))
        out_a = ag.div(pooled_a, ag.mean(aa, axis=1, keepdims=True))
    else:
        out_v = ag.softmax(pooled_v)
        out_a = ag.softmax(pooled_a)
    return CrossModalWeights(video=out_v, audio=out_a, scale_video=scale_v, scale_audio=scale_a)


def refine(token_features, cross_attn):
    """Re-weight token features by head-averaged cross-modal attention.

    ``w`` is the mean over heads of the cross-modal map; rows are scaled by
    ``w`` and the result is multiplied by the energy ratio
    ``||features||^2 / ||features * w||^2``. Accepts (N, D) with (H, N)
    weights, or batched (B, N, D) with (B, H, N); the energy ratio is
    computed per sample.
    """
    x = _as_tensor(token_features)
    a = _as_tensor(cross_attn)
    batched = x.ndim == 3
    if not batched:
        if x.ndim != 2 or a.ndim != 2 or a.shape[1] != x.shape[0]:
            raise ContractError(f"refine: features {x.shape} vs weights {a.shape}")
        x = ag.reshape(x, (1,) + x.shape)
        a = ag.reshape(a, (1,) + a.shape)
    if a.shape[0] != x.shape[0] or a.shape[2] != x.shape[1]:
        raise ContractError(f"refine: features {x.shape} vs weights {a.shape}")

    w = ag.mean(a, axis=1)  # (B, N)
    scaled = ag.mul(x, ag.reshape(w, w.shape + (1,)))
    prior = ag.tsum(ag.square(x), axis=(1, 2), keepdims=True)  # (B, 1, 1)
    posterior = ag.tsum(ag.square(scaled), axis=(1, 2), keepdims=True)
    dead = posterior.data == 0.0  # (B, 1, 1); energy ratio undefined there
    if dead.any():
        warnings.warn(
            "refine: zero posterior energy; refinement skipped for those samples",
            RuntimeWarning,
            stacklevel=2,
        )
        gate = dead.astype(np.float64)
        safe_posterior = ag.add(posterior, Tensor(gate))  # value 1 where dead
        refined = ag.mul(scaled, ag.div(prior, safe_posterior))
        out = ag.add(ag.mul(x, Tensor(gate)), ag.mul(refined, Tensor(1.0 - gate)))
    else:
        out = ag.mul(scaled, ag.div(prior, posterior))
    return out if batched else ag.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# MMD domain alignment
# ---------------------------------------------------------------------------


def gaussian_kernel(x, y, sigma):
    """exp(-||x - y||^2 / (2 sigma^2)) for two vectors."""
    if sigma <= 0:
        raise ContractError("gaussian_kernel: sigma must be positive")
    x = _as_tensor(x)
    y = _as_tensor(y)
    diff = ag.sub(x, y)
    sq = ag.tsum(ag.square(diff))
    return ag.exp(ag.scalar_mul(sq, -1.0 / (2.0 * sigma * sigma)))


def median_heuristic_sigma(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the pooled sample (gradient-free).

    Falls back to 1.0 when all points coincide.
    """
    pooled = np.concatenate([x, y], axis=0)
    sq = np.sum(pooled**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return med if med > 0 else 1.0


def _pairwise_sq_dists(x, y):
    xx = ag.tsum(ag.square(x), axis=1, keepdims=True)  # (n,1)
    yy = ag.reshape(ag.tsum(ag.square(y), axis=1, keepdims=True), (1, -1))  # (1,m)
    xy = ag.matmul(x, ag.transpose(y))
    return ag.add(ag.add(xx, yy), ag.scalar_mul(xy, -2.0))


def mmd(x, y, cfg: KernelConfig | None = None):
    """Biased V-statistic estimate of squared maximum mean discrepancy.

    mean_ii' k(x_i, x_i') + mean_jj' k(y_j, y_j') - 2 mean_ij k(x_i, y_j),
    with a Gaussian kernel. The median-heuristic bandwidth is computed from
    the pooled pairwise distances and treated as a constant for gradients.
    """
    cfg = cfg or KernelConfig()
    x = _as_tensor(x)
    y = _as_tensor(y)
    if x.ndim != 2 or y.ndim != 2:
        raise ContractError("mmd: samples must be (n, D) matrices")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ContractError("mmd: empty sample set")
    if x.shape[1] != y.shape[1]:
        raise ContractError(f"mmd: feature widths differ, {x.shape} vs {y.shape}")
    sigma = cfg.sigma if cfg.sigma is not None else median_heuristic_sigma(x.data, y.data)
    coef = -1.0 / (2.0 * sigma * sigma)
    k_xx = ag.exp(ag.scalar_mul(_pairwise_sq_dists(x, x), coef))
    k_yy = ag.exp(ag.scalar_mul(_pairwise_sq_dists(y, y), coef))
    k_xy = ag.exp(ag.scalar_mul(_pairwise_sq_dists(x, y), coef))
    return ag.add(
        ag.add(ag.mean(k_xx), ag.mean(k_yy)),
        ag.scalar_mul(ag.mean(k_xy), -2.0),
    )


def domain_alignment_loss(f_s_video, f_s_audio, f_t_video, f_t_audio, variant="da", cfg=None):
    """Domain-alignment loss over projected feature sets.

    "da"  : mmd(students) + mmd(teachers)
    "da1" : mmd(audio teacher, video students) + mmd(video teacher, audio students)
    "da2" : da + da1
    """
    if variant not in ("da", "da1", "da2"):
        raise ContractError(f"unknown alignment variant {variant!r}")

    def base():
        return ag.add(mmd(f_s_video, f_s_audio, cfg), mmd(f_t_video, f_t_audio, cfg))

    def crossed():
        return ag.add(mmd(f_t_audio, f_s_video, cfg), mmd(f_t_video, f_s_audio, cfg))

    if variant == "da":
        return base()
    if variant == "da1":
        return crossed()
    return ag.add(base(), crossed())


# ---------------------------------------------------------------------------
# sharpening, centering, distillation
# ---------------------------------------------------------------------------


def sharpen(f, tau):
    """Temperature-sharpened softmax over the last axis."""
    if tau <= 0:
        raise ContractError("sharpen: temperature must be positive")
    return ag.softmax(ag.scalar_mul(_as_tensor(f), 1.0 / tau))


def center_apply_update(f_t: np.ndarray, state: CenterState) -> np.ndarray:
    """Subtract the running center, then fold the batch mean into the state.

    Teacher-side only: operates on plain arrays, returns the batch centered
    with the value of the center *before* the update.
    """
    f_t = np.asarray(f_t, dtype=np.float64)
    if f_t.ndim != 2 or f_t.shape[0] < 1:
        raise ContractError(f"center_apply_update: need (B, J) batch, got {f_t.shape}")
    centered = f_t - state.center
    state.center = state.momentum * state.center + (1.0 - state.momentum) * f_t.mean(axis=0)
    return centered


def _validate_prob_rows(p, who):
    rows = p.sum(axis=-1)
    if np.abs(rows - 1.0).max() > 1e-6:
        raise ContractError(f"kd_loss: {who} rows are not normalized (max |sum-1| = {np.abs(rows - 1.0).max():.2e})")


def kd_loss(p_t_video, p_t_audio, p_s_audio_views, p_s_video_views):
    """Cross-modal distillation loss.

    Each teacher's (already centered and sharpened) distribution supervises
    the opposite modality's student views; the cross-entropy is averaged over
    student views and the batch, and the two directions are summed. Teacher
    inputs are plain arrays (stop-gradient); students are Tensors.
    """
    p_tv = np.atleast_2d(_as_array(p_t_video))
    p_ta = np.atleast_2d(_as_array(p_t_audio))
    _validate_prob_rows(p_tv, "teacher-video")
    _validate_prob_rows(p_ta, "teacher-audio")

    def direction(p_teacher, student_views):
        views = [v if isinstance(v, Tensor) else Tensor(np.asarray(v, float)) for v in student_views]
        total = None
        for v in views:
            v2 = ag.reshape(v, (1, -1)) if v.ndim == 1 else v
            _validate_prob_rows(v2.data, "student")
            if v2.shape != p_teacher.shape:
                raise ContractError(
                    f"kd_loss: teacher {p_teacher.shape} vs student view {v2.shape}"
                )
            logp = ag.log(_clamped(v2))
            ce = ag.scalar_mul(ag.mean(ag.tsum(ag.mul(Tensor(p_teacher), logp), axis=1)), -1.0)
            total = ce if total is None else ag.add(total, ce)
        return ag.scalar_mul(total, 1.0 / len(views))

    if not p_s_audio_views or not p_s_video_views:
        raise ContractError("kd_loss: need at least one student view per direction")
    return ag.add(direction(p_tv, p_s_audio_views), direction(p_ta, p_s_video_views))


def _clamped(v):
    """max(v, LOG_CLAMP) built from existing ops; gradient passes where v dominates."""
    lo = Tensor(np.full(v.shape, LOG_CLAMP))
    gate = (v.data > LOG_CLAMP).astype(np.float64)
    return ag.add(ag.mul(v, Tensor(gate)), ag.mul(lo, Tensor(1.0 - gate)))


def monitored_kl(p_teacher: np.ndarray, p_student: np.ndarray) -> float:
    """KL(teacher || student), averaged over rows; tracked, never optimized."""
    p_t = np.clip(np.atleast_2d(p_teacher), LOG_CLAMP, None)
    p_s = np.clip(np.atleast_2d(p_student), LOG_CLAMP, None)
    return float((p_t * (np.log(p_t) - np.log(p_s))).sum(axis=-1).mean())


def total_loss(l_ae, l_da, l_kd, w: LossWeights):
    """Weighted combination of the three objectives."""
    return ag.add(
        ag.add(ag.scalar_mul(_as_tensor(l_ae), w.recon), ag.scalar_mul(_as_tensor(l_da), w.align)),
        ag.scalar_mul(_as_tensor(l_kd), w.distill),
    )
