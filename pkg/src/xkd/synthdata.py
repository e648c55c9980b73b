"""Deterministic paired audio-video clip generator and on-disk dataset format.

Each clip shares a latent class across modalities: the video is a moving 2-D
Gaussian blob whose direction and speed encode the class, and the audio is a
spectrogram with a class-indexed dominant frequency band. The band's temporal
envelope mixes an affine map of the blob-speed sequence (weight ``rho``) with
an independent smooth signal, so the cross-modal coupling strength is a dial.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autograd import ContractError
from .views_tokens import ClipPair

DATASET_MAGIC = b"XKDD"
DATASET_VERSION = 1


class DatasetFormatError(Exception):
    """Raised when a dataset file is corrupt or has the wrong format."""


@dataclass
class GeneratorSpec:
    n_classes: int
    video_shape: tuple  # (T, H, W, C)
    audio_shape: tuple  # (F, T_a)
    cross_modal_strength: float = 1.0  # rho, clamped to [0, 1]
    noise_std: float = 0.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractError("need at least 2 classes")
        self.video_shape = tuple(int(v) for v in self.video_shape)
        self.audio_shape = tuple(int(v) for v in self.audio_shape)
        if len(self.video_shape) != 4 or len(self.audio_shape) != 2:
            raise ContractError("video_shape must be (T,H,W,C), audio_shape (F,T)")
        self.cross_modal_strength = float(np.clip(self.cross_modal_strength, 0.0, 1.0))


def _clip_internals(spec: GeneratorSpec, class_id: int, seed: int):
    """Latent trajectory shared by both modalities (before rendering)."""
    t_v, h, w, _ = spec.video_shape
    _, t_a = spec.audio_shape
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(class_id),)))

    angle = 2.0 * np.pi * class_id / spec.n_classes + rng.uniform(-0.2, 0.2)
    base_speed = min(h, w) * (1.0 + class_id) / (spec.n_classes * t_v) * 2.0
    mod_phase = rng.uniform(0.0, 2.0 * np.pi)
    modulation = 1.0 + 0.5 * np.sin(2.0 * np.pi * np.arange(t_v) / t_v + mod_phase)
    speed = base_speed * modulation  # pixels per frame, length T

    start = np.array([rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)])
    steps = np.concatenate([[0.0], speed[:-1]])
    path = start[None, :] + np.cumsum(
        steps[:, None] * np.array([np.sin(angle), np.cos(angle)])[None, :], axis=0
    )
    path[:, 0] %= h
    path[:, 1] %= w

    # affine map of the speed onto [0.2, 1.0]; modulation lies in [0.5, 1.5]
    env_from_speed = 0.2 + 0.8 * (speed / base_speed - 0.5)
    src = np.linspace(0.0, t_v - 1.0, t_a)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, t_v - 1)
    frac = src - lo
    env_speed = env_from_speed[lo] * (1 - frac) + env_from_speed[hi] * frac

    ind_freq = rng.uniform(1.0, 3.0)
    ind_phase = rng.uniform(0.0, 2.0 * np.pi)
    env_indep = 0.2 + 0.8 * (0.5 + 0.5 * np.sin(2.0 * np.pi * ind_freq * np.arange(t_a) / t_a + ind_phase))

    rho = spec.cross_modal_strength
    envelope = rho * env_speed + (1.0 - rho) * env_indep
    return rng, path, speed, env_speed, envelope


def generate_clip(spec: GeneratorSpec, class_id: int, seed: int) -> ClipPair:
    """Render one clip; fully determined by (spec, class_id, seed)."""
    if not 0 <= class_id < spec.n_classes:
        raise ContractError(f"class_id {class_id} outside [0, {spec.n_classes})")
    t_v, h, w, c = spec.video_shape
    f, t_a = spec.audio_shape
    rng, path, _, _, envelope = _clip_internals(spec, class_id, seed)

    # video: wrapped Gaussian blob along the trajectory
    sigma_b = min(h, w) / 6.0
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    frames = np.empty((t_v, h, w, c))
    for t in range(t_v):
        dy = (yy - path[t, 0] + h / 2.0) % h - h / 2.0
        dx = (xx - path[t, 1] + w / 2.0) % w - w / 2.0
        blob = np.exp(-(dy * dy + dx * dx) / (2.0 * sigma_b * sigma_b))
        for ch in range(c):
            frames[t, :, :, ch] = blob * (1.0 - 0.15 * ch)
    if spec.noise_std > 0:
        frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)

    # audio: class-indexed frequency band modulated by the envelope
    band_center = (class_id + 0.5) * f / spec.n_classes
    band_width = max(f / (4.0 * spec.n_classes), 0.5)
    profile = np.exp(-((np.arange(f) - band_center) ** 2) / (2.0 * band_width**2))
    spectrogram = profile[:, None] * envelope[None, :]
    if spec.noise_std > 0:
        spectrogram = spectrogram + rng.normal(0.0, spec.noise_std, size=spectrogram.shape)

    return ClipPair(video=frames, audio=spectrogram, label=int(class_id), seed=int(seed))


def clip_latents(spec: GeneratorSpec, class_id: int, seed: int):
    """Expose (blob speed sequence, audio envelope) for diagnostics/tests."""
    if not 0 <= class_id < spec.n_classes:
        raise ContractError(f"class_id {class_id} outside [0, {spec.n_classes})")
    _, _, speed, env_speed, envelope = _clip_internals(spec, class_id, seed)
    return speed, env_speed, envelope


def make_dataset(spec: GeneratorSpec, clips_per_class: int, seed: int = 0):
    """Balanced in-memory dataset: ``n_classes * clips_per_class`` clips."""
    clips = []
    for class_id in range(spec.n_classes):
        for k in range(clips_per_class):
            clips.append(generate_clip(spec, class_id, seed * 1_000_003 + k * spec.n_classes + class_id))
    return clips


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def write_dataset(path, spec: GeneratorSpec, clips) -> None:
    """Serialize clips; the header stores the GeneratorSpec for regeneration."""
    clips = list(clips)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        t, h, w, c = spec.video_shape
        f, t_a = spec.audio_shape
        fh.write(struct.pack("<7I", spec.n_classes, t, h, w, c, f, t_a))
        fh.write(struct.pack("<2d", spec.cross_modal_strength, spec.noise_std))
        fh.write(struct.pack("<I", len(clips)))
        for clip in clips:
            if clip.video.shape != spec.video_shape or clip.audio.shape != spec.audio_shape:
                raise ContractError(
                    f"clip geometry {clip.video.shape}/{clip.audio.shape} does not match spec"
                )
            fh.write(struct.pack("<I", clip.label))
            fh.write(struct.pack("<Q", clip.seed & (2**64 - 1)))
            fh.write(np.ascontiguousarray(clip.video, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(clip.audio, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return buf


def read_dataset(path):
    """Read a dataset file; returns (GeneratorSpec, list of ClipPair)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        n_classes, t, h, w, c, f, t_a = struct.unpack("<7I", _read_exact(fh, 28, "geometry"))
        rho, noise = struct.unpack("<2d", _read_exact(fh, 16, "generator scalars"))
        try:
            spec = GeneratorSpec(
                n_classes=n_classes,
                video_shape=(t, h, w, c),
                audio_shape=(f, t_a),
                cross_modal_strength=rho,
                noise_std=noise,
            )
        except ContractError as exc:
            raise DatasetFormatError(f"corrupt header: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "clip count"))
        video_bytes = t * h * w * c * 8
        audio_bytes = f * t_a * 8
        clips = []
        for i in range(count):
            (label,) = struct.unpack("<I", _read_exact(fh, 4, f"clip {i} label"))
            (seed,) = struct.unpack("<Q", _read_exact(fh, 8, f"clip {i} seed"))
            video = np.frombuffer(_read_exact(fh, video_bytes, f"clip {i} video"), dtype="<f8")
            audio = np.frombuffer(_read_exact(fh, audio_bytes, f"clip {i} audio"), dtype="<f8")
            clips.append(
                ClipPair(
                    video=video.reshape(t, h, w, c).copy(),
                    audio=audio.reshape(f, t_a).copy(),
                    label=int(label),
                    seed=int(seed),
                )
            )
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after final clip")
    return spec, clips
