"""Synthetic clip generator and dataset format tests."""

import numpy as np
import pytest

from xkd.autograd import ContractError
from xkd.probe import FeatureMatrix, ProbeConfig, linear_probe
from xkd.synthdata import (
    DatasetFormatError,
    GeneratorSpec,
    clip_latents,
    generate_clip,
    make_dataset,
    read_dataset,
    write_dataset,
)

TINY = dict(video_shape=(8, 16, 16, 1), audio_shape=(16, 32))


def spec_with(rho=1.0, noise=0.0, n_classes=4):
    return GeneratorSpec(n_classes=n_classes, cross_modal_strength=rho, noise_std=noise, **TINY)


def test_generate_deterministic():
    spec = spec_with(rho=0.7, noise=0.2)
    a = generate_clip(spec, 2, 99)
    b = generate_clip(spec, 2, 99)
    np.testing.assert_array_equal(a.video, b.video)
    np.testing.assert_array_equal(a.audio, b.audio)
    assert a.label == 2 and a.seed == 99


def test_class_out_of_range():
    with pytest.raises(ContractError):
        generate_clip(spec_with(), 4, 0)


def test_video_in_unit_range_and_shapes():
    clip = generate_clip(spec_with(noise=0.3), 1, 5)
    assert clip.video.shape == (8, 16, 16, 1)
    assert clip.audio.shape == (16, 32)
    assert clip.video.min() >= 0.0 and clip.video.max() <= 1.0


def test_envelope_is_affine_speed_map_when_fully_coupled():
    spec = spec_with(rho=1.0, noise=0.0)
    _, env_speed, envelope = clip_latents(spec, 1, 7)
    np.testing.assert_allclose(envelope, env_speed, atol=1e-15)


def _mean_latent_correlation(rho, clips=1000):
    spec = spec_with(rho=rho)
    corrs = []
    for k in range(clips):
        _, env_speed, envelope = clip_latents(spec, k % spec.n_classes, 10_000 + k)
        c = np.corrcoef(env_speed, envelope)[0, 1]
        corrs.append(c)
    return float(np.mean(corrs))


def test_full_coupling_correlation_is_one():
    assert abs(_mean_latent_correlation(1.0, clips=200) - 1.0) < 1e-6


def test_zero_coupling_correlation_near_zero():
    assert abs(_mean_latent_correlation(0.0, clips=1000)) < 0.05


def test_dominant_band_differs_across_classes():
    spec = spec_with(noise=0.0)
    rows = []
    for class_id in (0, 1):
        clip = generate_clip(spec, class_id, 3)
        rows.append(int(np.argmax(clip.audio.mean(axis=1))))
    assert rows[0] != rows[1]


def test_column_energy_features_linearly_decodable():
    spec = spec_with(noise=0.0)
    train = make_dataset(spec, clips_per_class=12, seed=0)
    test = make_dataset(spec, clips_per_class=6, seed=1)

    def feats(clips, name):
        return FeatureMatrix(
            features=np.stack([c.audio.mean(axis=1) for c in clips]),
            labels=np.array([c.label for c in clips]),
            source=name,
        )

    acc = linear_probe(feats(train, "train"), feats(test, "test"), ProbeConfig())
    assert acc >= 0.95


def test_dataset_round_trip(tmp_path):
    spec = spec_with(rho=0.5, noise=0.1)
    clips = make_dataset(spec, clips_per_class=2, seed=3)
    path = tmp_path / "toy.xkdd"
    write_dataset(path, spec, clips)
    spec2, clips2 = read_dataset(path)
    assert spec2 == spec
    assert len(clips2) == len(clips)
    for a, b in zip(clips, clips2):
        np.testing.assert_array_equal(a.video, b.video)
        np.testing.assert_array_equal(a.audio, b.audio)
        assert (a.label, a.seed) == (b.label, b.seed)


def test_dataset_empty_list(tmp_path):
    path = tmp_path / "empty.xkdd"
    write_dataset(path, spec_with(), [])
    spec, clips = read_dataset(path)
    assert clips == []


def test_dataset_label_balance():
    clips = make_dataset(spec_with(), clips_per_class=16, seed=0)
    labels = np.array([c.label for c in clips])
    assert len(clips) == 64
    assert all((labels == k).sum() == 16 for k in range(4))


def test_dataset_corrupt_header(tmp_path):
    path = tmp_path / "bad.xkdd"
    write_dataset(path, spec_with(), [])
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_dataset_truncation(tmp_path):
    spec = spec_with()
    clips = make_dataset(spec, clips_per_class=1, seed=0)
    path = tmp_path / "trunc.xkdd"
    write_dataset(path, spec, clips)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(DatasetFormatError):
        read_dataset(path)
