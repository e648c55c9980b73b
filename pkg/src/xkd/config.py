"""Plain-text run configuration: dotted key = value pairs, strict key set.

The defaults are the published training values wherever the source material
names one (optimizer betas, weight decay, loss weights, mask ratios,
temperatures, EMA and centering constants) and the desk-scale architecture
sizes everywhere else, so a default run is small enough to execute on a CPU
in seconds. Unknown keys are rejected by name.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import DecoderConfig, EncoderConfig, ProjectorConfig
from .objectives import KernelConfig, LossWeights, SharpenConfig
from .optim import Schedule
from .synthdata import GeneratorSpec
from .trainer import TrainConfig, TrainSetup
from .views_tokens import ViewConfig
from .probe import ProbeConfig


class ConfigError(Exception):
    """Bad key, bad value, or unreadable config file."""


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (type, default, description); order defines the dump order
KEYS = {
    # synthetic data generator
    "data.n_classes": (int, 4, "latent classes shared across modalities"),
    "data.video_t": (int, 8, "source video frames"),
    "data.video_h": (int, 16, "source video height"),
    "data.video_w": (int, 16, "source video width"),
    "data.video_c": (int, 1, "video channels"),
    "data.audio_f": (int, 16, "spectrogram frequency bins"),
    "data.audio_t": (int, 32, "spectrogram time frames"),
    "data.rho": (float, 0.9, "cross-modal coupling strength in [0,1]"),
    "data.noise_std": (float, 0.1, "additive noise level"),
    "data.train_clips_per_class": (int, 8, "training clips per class"),
    "data.eval_clips_per_class": (int, 4, "held-out clips per class"),
    # architecture (desk scale by default; published scale fits the same keys)
    "model.variant": (str, "ms", "parameter sharing: ms | mas | mats"),
    "model.d_model": (int, 64, "encoder width"),
    "model.depth": (int, 2, "encoder depth"),
    "model.heads": (int, 4, "attention heads"),
    "model.mlp_ratio": (int, 4, "MLP expansion"),
    "model.decoder_width": (int, 32, "decoder width"),
    "model.decoder_depth": (int, 2, "decoder depth"),
    "model.decoder_heads": (int, 4, "decoder heads"),
    "model.projector_hidden": (int, 128, "projector hidden width"),
    "model.projector_bottleneck": (int, 32, "projector bottleneck"),
    "model.projector_out": (int, 128, "projector output dimension"),
    "model.video_patch_t": (int, 2, "cuboid temporal extent"),
    "model.video_patch_h": (int, 4, "cuboid height"),
    "model.video_patch_w": (int, 4, "cuboid width"),
    "model.audio_patch_f": (int, 4, "audio patch frequency extent"),
    "model.audio_patch_t": (int, 4, "audio patch time extent"),
    # views
    "views.n_locals": (int, 1, "local views per modality"),
    "views.video_local_t": (int, 4, "local video frames"),
    "views.video_local_h": (int, 8, "local video height"),
    "views.video_local_w": (int, 8, "local video width"),
    "views.audio_local_t": (int, 8, "local audio frames"),
    # training
    "train.steps": (int, 200, "optimization steps"),
    "train.batch_size": (int, 8, "clips per step"),
    "train.seed": (int, 0, "root seed for all rng streams"),
    "train.lr_base": (float, 1e-4, "base learning rate"),
    "train.lr_final": (float, 0.0, "final learning rate"),
    "train.warmup_steps": (int, 30, "linear LR warm-up steps"),
    "train.weight_decay": (float, 0.3, "decoupled weight decay"),
    "train.beta1": (float, 0.9, "first-moment decay"),
    "train.beta2": (float, 0.95, "second-moment decay"),
    "train.lambda_ae": (float, 5.0, "reconstruction weight"),
    "train.lambda_da": (float, 1.0, "alignment weight"),
    "train.lambda_kd": (float, 1.0, "distillation weight"),
    "train.mask_ratio_video": (float, 0.85, "video mask ratio"),
    "train.mask_ratio_audio": (float, 0.80, "audio mask ratio"),
    "train.tau_student": (float, 0.1, "student temperature"),
    "train.tau_teacher_base": (float, 0.04, "teacher temperature schedule start"),
    "train.tau_teacher_final": (float, 0.06, "teacher temperature schedule end"),
    "train.tau_teacher_video_fixed": (float, 0.0, "fixed video teacher temperature (0 = use schedule)"),
    "train.tau_teacher_audio_fixed": (float, 0.0, "fixed audio teacher temperature (0 = use schedule)"),
    "train.ema_base": (float, 0.997, "EMA coefficient schedule start"),
    "train.ema_final": (float, 1.0, "EMA coefficient schedule end"),
    "train.center_momentum": (float, 0.9, "teacher centering momentum"),
    "train.centering": (_bool, True, "subtract the running teacher mean"),
    "train.align_variant": (str, "da", "alignment loss: da | da1 | da2"),
    "train.cma_variant": (str, "scale", "cross-modal attention: scale | softmax"),
    "train.mmd_sigma": (float, 0.0, "Gaussian bandwidth (0 = median heuristic)"),
    "train.collapse_epsilon": (float, 1e-3, "collapse threshold"),
    "train.collapse_window": (int, 50, "collapse window (steps)"),
    "train.fail_on_collapse": (_bool, False, "exit 3 when the run collapses"),
    "train.early_stop_on_collapse": (_bool, False, "halt on first unhealthy verdict"),
    "train.checkpoint_every": (int, 50, "checkpoint interval (0 = final only)"),
    # probe
    "probe.steps": (int, 600, "probe gradient-descent steps"),
    "probe.lr": (float, 0.5, "probe learning rate"),
    "probe.weight_decay": (float, 1e-4, "probe weight decay"),
}

_VARIANTS = {"ms": "MS", "mas": "MAS", "mats": "MATS"}


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls):
        return cls(values={k: spec[1] for k, spec in KEYS.items()})

    @classmethod
    def from_file(cls, path):
        cfg = cls.defaults()
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    def set(self, key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser = KEYS[key][0]
        try:
            if parser is _bool and not isinstance(value, str):
                self.values[key] = bool(value)
            else:
                self.values[key] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc

    def __getitem__(self, key):
        return self.values[key]

    def dump(self):
        """Effective configuration as re-parseable text, in registry order."""
        lines = []
        section = None
        for key in KEYS:
            head = key.split(".", 1)[0]
            if head != section:
                if section is not None:
                    lines.append("")
                lines.append(f"# [{head}]")
                section = head
            value = self.values[key]
            rendered = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    # -- object builders ----------------------------------------------------

    def generator_spec(self):
        v = self.values
        return GeneratorSpec(
            n_classes=v["data.n_classes"],
            video_shape=(v["data.video_t"], v["data.video_h"], v["data.video_w"], v["data.video_c"]),
            audio_shape=(v["data.audio_f"], v["data.audio_t"]),
            cross_modal_strength=v["data.rho"],
            noise_std=v["data.noise_std"],
        )

    def encoder_cfg(self):
        v = self.values
        return EncoderConfig(
            d_model=v["model.d_model"], depth=v["model.depth"], n_heads=v["model.heads"], mlp_ratio=v["model.mlp_ratio"]
        )

    def decoder_cfg(self):
        v = self.values
        return DecoderConfig(
            d_model=v["model.decoder_width"],
            depth=v["model.decoder_depth"],
            n_heads=v["model.decoder_heads"],
            mlp_ratio=v["model.mlp_ratio"],
        )

    def projector_cfg(self):
        v = self.values
        return ProjectorConfig(
            hidden=v["model.projector_hidden"],
            bottleneck=v["model.projector_bottleneck"],
            out_dim=v["model.projector_out"],
        )

    def view_cfg(self):
        v = self.values
        return ViewConfig(
            video_local_shape=(v["views.video_local_t"], v["views.video_local_h"], v["views.video_local_w"]),
            audio_local_frames=v["views.audio_local_t"],
            n_locals=v["views.n_locals"],
        )

    def probe_cfg(self):
        v = self.values
        return ProbeConfig(steps=v["probe.steps"], lr=v["probe.lr"], weight_decay=v["probe.weight_decay"])

    def train_config(self):
        v = self.values
        steps = max(v["train.steps"], 1)
        variant = _VARIANTS.get(v["model.variant"].lower())
        if variant is None:
            raise ConfigError(f"model.variant must be ms, mas, or mats, got {v['model.variant']!r}")

        def teacher_tau(mod):
            fixed = v[f"train.tau_teacher_{mod}_fixed"]
            if fixed > 0:
                return Schedule(base=fixed, kind="constant", total_steps=steps)
            return Schedule(
                base=v["train.tau_teacher_base"], final=v["train.tau_teacher_final"], total_steps=steps, kind="cosine"
            )

        return TrainConfig(
            steps=v["train.steps"],
            batch_size=v["train.batch_size"],
            seed=v["train.seed"],
            variant=variant,
            weights=LossWeights(v["train.lambda_ae"], v["train.lambda_da"], v["train.lambda_kd"]),
            sharpen=SharpenConfig(
                tau_student=v["train.tau_student"],
                tau_teacher_video=teacher_tau("video"),
                tau_teacher_audio=teacher_tau("audio"),
            ),
            mask_ratio_video=v["train.mask_ratio_video"],
            mask_ratio_audio=v["train.mask_ratio_audio"],
            ema=Schedule(base=v["train.ema_base"], final=v["train.ema_final"], total_steps=steps, kind="cosine"),
            lr=Schedule(
                base=v["train.lr_base"],
                final=v["train.lr_final"],
                warmup_steps=v["train.warmup_steps"],
                total_steps=max(steps, v["train.warmup_steps"] + 1),
                kind="warmup-cosine",
            ),
            betas=(v["train.beta1"], v["train.beta2"]),
            weight_decay=v["train.weight_decay"],
            centering=v["train.centering"],
            center_momentum=v["train.center_momentum"],
            align_variant=v["train.align_variant"],
            cma_variant=v["train.cma_variant"],
            kernel=KernelConfig(sigma=v["train.mmd_sigma"] if v["train.mmd_sigma"] > 0 else None),
            collapse_epsilon=v["train.collapse_epsilon"],
            collapse_window=v["train.collapse_window"],
            early_stop_on_collapse=v["train.early_stop_on_collapse"],
            checkpoint_every=v["train.checkpoint_every"],
        )

    def train_setup(self):
        v = self.values
        return TrainSetup(
            encoder_cfg=self.encoder_cfg(),
            decoder_cfg=self.decoder_cfg(),
            projector_cfg=self.projector_cfg(),
            view_cfg=self.view_cfg(),
            video_patch=(v["model.video_patch_t"], v["model.video_patch_h"], v["model.video_patch_w"]),
            audio_patch=(v["model.audio_patch_f"], v["model.audio_patch_t"]),
            video_shape=(v["data.video_t"], v["data.video_h"], v["data.video_w"], v["data.video_c"]),
            audio_shape=(v["data.audio_f"], v["data.audio_t"]),
            train=self.train_config(),
        )
