"""Shared fixtures: the tiny training setup used across trainer/probe tests."""

import numpy as np
import pytest

from xkd.objectives import KernelConfig, LossWeights, SharpenConfig
from xkd.optim import Schedule
from xkd.presets import (
    tiny_decoder_config,
    tiny_encoder_config,
    tiny_projector_config,
    tiny_view_config,
)
from xkd.synthdata import GeneratorSpec, make_dataset
from xkd.trainer import TrainConfig, TrainSetup

TINY_VIDEO_SHAPE = (8, 16, 16, 1)
TINY_AUDIO_SHAPE = (16, 32)
TINY_VIDEO_PATCH = (2, 4, 4)
TINY_AUDIO_PATCH = (4, 4)


def tiny_generator_spec(rho=0.9, noise=0.1, n_classes=4):
    return GeneratorSpec(
        n_classes=n_classes,
        video_shape=TINY_VIDEO_SHAPE,
        audio_shape=TINY_AUDIO_SHAPE,
        cross_modal_strength=rho,
        noise_std=noise,
    )


def tiny_train_config(steps=5, seed=7, **overrides):
    base = dict(
        steps=steps,
        batch_size=4,
        seed=seed,
        variant="MS",
        weights=LossWeights(),
        sharpen=SharpenConfig(
            tau_student=0.1,
            tau_teacher_video=Schedule(base=0.04, final=0.06, total_steps=max(steps, 1), kind="cosine"),
            tau_teacher_audio=Schedule(base=0.04, final=0.06, total_steps=max(steps, 1), kind="cosine"),
        ),
        ema=Schedule(base=0.997, final=1.0, total_steps=max(steps, 1), kind="cosine"),
        lr=Schedule(base=2e-3, final=2e-4, warmup_steps=min(10, max(steps // 10, 1)), total_steps=max(steps, 1), kind="warmup-cosine"),
        weight_decay=0.05,
        kernel=KernelConfig(),
        collapse_epsilon=1e-3,
        collapse_window=50,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_setup(steps=5, seed=7, n_locals=1, **overrides):
    return TrainSetup(
        encoder_cfg=tiny_encoder_config(),
        decoder_cfg=tiny_decoder_config(),
        projector_cfg=tiny_projector_config(),
        view_cfg=tiny_view_config(n_locals=n_locals),
        video_patch=TINY_VIDEO_PATCH,
        audio_patch=TINY_AUDIO_PATCH,
        video_shape=TINY_VIDEO_SHAPE,
        audio_shape=TINY_AUDIO_SHAPE,
        train=tiny_train_config(steps=steps, seed=seed, **overrides),
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_dataset(tiny_generator_spec(), clips_per_class=8, seed=1)
