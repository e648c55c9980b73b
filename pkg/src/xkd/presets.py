"""Configuration presets: published-scale defaults and the desk-scale setup.

The published-scale values document the full-size system (ViT-B backbone,
392 video tokens, 8192-way projector). The desk-scale values are sized so
CPU property tests and short training runs stay fast; both are plain
configs, so any intermediate size is expressible.
"""

from __future__ import annotations

from .backbone import DecoderConfig, EncoderConfig, ProjectorConfig
from .views_tokens import ViewConfig

# input geometry at published scale
PAPER_VIDEO_GLOBAL = (32, 112, 112, 3)  # T, H, W, C
PAPER_VIDEO_LOCAL = (8, 96, 96)
PAPER_VIDEO_PATCH = (4, 16, 16)
PAPER_AUDIO_GLOBAL = (80, 448)  # F, T
PAPER_AUDIO_LOCAL_FRAMES = 112
PAPER_AUDIO_PATCH = (4, 16)

# published training defaults
PAPER_MASK_RATIO_VIDEO = 0.85
PAPER_MASK_RATIO_AUDIO = 0.80
PAPER_LOSS_WEIGHTS = (5.0, 1.0, 1.0)  # reconstruction, alignment, distillation
PAPER_EMA = (0.997, 1.0)
PAPER_CENTER_MOMENTUM = 0.9
PAPER_STUDENT_TEMP = 0.1
PAPER_TEACHER_TEMP_SCHEDULE = (0.04, 0.06)
PAPER_TEACHER_TEMP_FIXED = {"video": 0.1, "audio": 0.07}
PAPER_BETAS = (0.9, 0.95)
PAPER_WEIGHT_DECAY = 0.3
PAPER_LR_BASE = 1e-4


def paper_view_config(n_locals=1):
    return ViewConfig(
        video_local_shape=PAPER_VIDEO_LOCAL,
        audio_local_frames=PAPER_AUDIO_LOCAL_FRAMES,
        n_locals=n_locals,
    )


def paper_encoder_config():
    return EncoderConfig(d_model=768, depth=12, n_heads=12, mlp_ratio=4)


def paper_decoder_config():
    return DecoderConfig(d_model=384, depth=4, n_heads=12, mlp_ratio=4)


def paper_projector_config():
    return ProjectorConfig(hidden=2048, bottleneck=256, out_dim=8192)


def tiny_encoder_config():
    return EncoderConfig(d_model=64, depth=2, n_heads=4, mlp_ratio=4)


def tiny_decoder_config():
    return DecoderConfig(d_model=32, depth=2, n_heads=4, mlp_ratio=4)


def tiny_projector_config():
    return ProjectorConfig(hidden=128, bottleneck=32, out_dim=128)


def tiny_view_config(n_locals=1):
    return ViewConfig(
        video_local_shape=(4, 8, 8),
        audio_local_frames=8,
        n_locals=n_locals,
    )
