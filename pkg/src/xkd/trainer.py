"""Training loop: masked reconstruction, teacher refinement, alignment and
distillation losses, optimizer step, EMA teacher update, collapse monitoring,
and checkpoint persistence.

Determinism contract: one root seed fans out to named streams ("init",
"data", "views", "masks"), each re-derived per step, so runs are replayable
and a resumed run consumes exactly the randomness the uninterrupted run
would have.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import objectives as obj
from .autograd import ContractError, Tensor
from .backbone import ModelSet, build_model_set, decode, encode, project
from .optim import OptimizerState, Schedule, optimizer_step, schedule_value
from .views_tokens import ViewConfig, embed_batch, make_views, mask_tokens, patchify

CHECKPOINT_MAGIC = b"XKD1"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,L_ae,L_da,L_kd,L_xkd,kl_v2a,kl_a2v,ema,tau_tv,tau_ta"


class NonFiniteLossError(RuntimeError):
    """A loss term became non-finite; the message names the first bad term."""


class CheckpointError(Exception):
    """Raised for unreadable, truncated, or mismatched checkpoint files."""


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    seed: int = 0
    variant: str = "MS"
    weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    sharpen: obj.SharpenConfig = field(default_factory=obj.SharpenConfig)
    mask_ratio_video: float = 0.85
    mask_ratio_audio: float = 0.80
    ema: Schedule = field(default_factory=lambda: Schedule(base=0.997, final=1.0, total_steps=200, kind="cosine"))
    lr: Schedule = field(default_factory=lambda: Schedule(base=1e-3, final=0.0, warmup_steps=10, total_steps=200, kind="warmup-cosine"))
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    centering: bool = True
    center_momentum: float = 0.9
    align_variant: str = "da"
    cma_variant: str = "scale"
    kernel: obj.KernelConfig = field(default_factory=obj.KernelConfig)
    collapse_epsilon: float = 1e-3
    collapse_window: int = 50
    early_stop_on_collapse: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (0 <= self.mask_ratio_video < 1 and 0 <= self.mask_ratio_audio < 1):
            raise ContractError("mask ratios must lie in [0, 1)")
        if not (0.0 <= self.ema.base <= 1.0 and 0.0 <= self.ema.final <= 1.0):
            raise ContractError("EMA coefficients must lie in [0, 1]")


@dataclass
class TrainSetup:
    """Everything needed to build and run one training configuration."""

    encoder_cfg: object
    decoder_cfg: object
    projector_cfg: object
    view_cfg: ViewConfig
    video_patch: tuple
    audio_patch: tuple
    video_shape: tuple  # source/global (T, H, W, C)
    audio_shape: tuple  # source/global (F, T_a)
    train: TrainConfig

    def patch_dims(self):
        pt, ph, pw = self.video_patch
        pf, pa = self.audio_patch
        return {"video": pt * ph * pw * self.video_shape[3], "audio": pf * pa}

    def grids(self):
        t, h, w, _ = self.video_shape
        pt, ph, pw = self.video_patch
        lt, lh, lw = self.view_cfg.video_local_shape
        f, t_a = self.audio_shape
        pf, pa = self.audio_patch
        lta = self.view_cfg.audio_local_frames
        for name, num, den in (
            ("video global", (t, h, w), (pt, ph, pw)),
            ("video local", (lt, lh, lw), (pt, ph, pw)),
            ("audio global", (f, t_a), (pf, pa)),
            ("audio local", (f, lta), (pf, pa)),
        ):
            if any(n % d for n, d in zip(num, den)):
                raise ContractError(f"{name} extents {num} not divisible by patch {den}")
        return {
            "video": [(t // pt, h // ph, w // pw), (lt // pt, lh // ph, lw // pw)],
            "audio": [(f // pf, t_a // pa), (f // pf, lta // pa)],
        }


@dataclass
class TrainState:
    models: ModelSet
    optimizer: OptimizerState
    centers: dict  # {"video": CenterState, "audio": CenterState}
    step: int = 0  # completed steps


@dataclass
class LossRecord:
    step: int
    l_ae: float
    l_da: float
    l_kd: float
    l_xkd: float
    kl_v2a: float
    kl_a2v: float
    center_norm_video: float
    center_norm_audio: float
    ema: float
    tau_teacher_video: float
    tau_teacher_audio: float

    def csv_row(self):
        cells = [str(self.step)] + [
            repr(float(v))
            for v in (
                self.l_ae,
                self.l_da,
                self.l_kd,
                self.l_xkd,
                self.kl_v2a,
                self.kl_a2v,
                self.ema,
                self.tau_teacher_video,
                self.tau_teacher_audio,
            )
        ]
        return ",".join(cells)

    def finite(self):
        return all(
            np.isfinite(v)
            for v in (self.l_ae, self.l_da, self.l_kd, self.l_xkd, self.kl_v2a, self.kl_a2v)
        )


@dataclass
class CollapseVerdict:
    status: str  # healthy | kd-collapse | kld-collapse
    kd_mean: float
    kl_mean: float
    window: int


def stream_rng(seed: int, name: str, step: int = 0) -> np.random.Generator:
    """Independent generator for a named stream at a given step."""
    code = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(code, int(step))))


def build_state(setup: TrainSetup) -> TrainState:
    """Initialize models, optimizer, and centers from the setup's seed."""
    cfg = setup.train
    models = build_model_set(
        setup.encoder_cfg,
        setup.decoder_cfg,
        setup.projector_cfg,
        patch_dims=setup.patch_dims(),
        grids=setup.grids(),
        variant=cfg.variant,
        rng=stream_rng(cfg.seed, "init"),
    )
    trainables = list(models.trainable_parameters().values())
    optimizer = OptimizerState.create(
        trainables, betas=cfg.betas, weight_decay=cfg.weight_decay, lr_schedule=cfg.lr
    )
    centers = {
        "video": obj.CenterState.create(setup.projector_cfg.out_dim, cfg.center_momentum),
        "audio": obj.CenterState.create(setup.projector_cfg.out_dim, cfg.center_momentum),
    }
    return TrainState(models=models, optimizer=optimizer, centers=centers, step=0)


# ---------------------------------------------------------------------------
# single training step
# ---------------------------------------------------------------------------


def _sched(s: Schedule, step: int) -> float:
    return schedule_value(s, min(step, s.total_steps))


def _pool_tokens(tokens: Tensor) -> Tensor:
    """Mean over patch-token features (CLS excluded upstream)."""
    return ag.mean(tokens, axis=1)


def train_step(state: TrainState, batch, setup: TrainSetup) -> LossRecord:
    """Run Algorithm-style step: reconstruction, alignment, distillation,
    optimizer update on decoders and students, EMA update of teachers.

    ``batch`` is a non-empty list of ClipPair with the setup's geometry.
    """
    if not batch:
        raise ContractError("train_step: empty batch")
    cfg = setup.train
    models = state.models
    step = state.step
    rng_views = stream_rng(cfg.seed, "views", step)
    rng_masks = stream_rng(cfg.seed, "masks", step)

    views = [make_views(clip, setup.view_cfg, rng_views) for clip in batch]
    mask_ratio = {"video": cfg.mask_ratio_video, "audio": cfg.mask_ratio_audio}
    patch = {"video": setup.video_patch, "audio": setup.audio_patch}

    recon_losses = {}
    student_global_tokens = {}
    global_token_batches = {}
    masks_by_mod = {}
    for mod in ("video", "audio"):
        globals_ = [v.global_video if mod == "video" else v.global_audio for v in views]
        tokens = [patchify(g, mod, patch[mod]) for g in globals_]
        masked = [mask_tokens(tb, mask_ratio[mod], rng_masks) for tb in tokens]
        global_token_batches[mod] = masked
        masks = np.stack([tb.mask for tb in masked])
        masks_by_mod[mod] = masks
        targets = np.stack(
            [obj.normalize_patch_targets(tb.tokens)[tb.mask] for tb in masked]
        )  # (B, N_m, D_patch)

        seq = embed_batch(masked, models.student_embed[mod], drop_masked=True)
        enc_out = encode(models.student_encoder[mod], seq)
        student_global_tokens[mod] = enc_out.tokens
        pred = decode(
            models.decoder[mod], models.student_embed[mod], enc_out.tokens, masks, masked[0].grid
        )
        recon_losses[mod] = obj.recon_loss(pred, targets)

    l_ae = ag.add(recon_losses["video"], recon_losses["audio"])

    # teacher forwards on unmasked globals; no gradients flow (frozen params)
    teacher_tokens = {}
    teacher_attn = {}
    for mod in ("video", "audio"):
        seq = embed_batch(global_token_batches[mod], models.teacher_embed[mod], drop_masked=False)
        out = encode(models.teacher_encoder[mod], seq)
        teacher_tokens[mod] = out.tokens
        teacher_attn[mod] = out.attn_last.data  # (B, H, N)

    b = len(batch)
    cma = {"video": [], "audio": []}
    for i in range(b):
        weights = obj.cross_modal_attention(
            teacher_attn["video"][i], teacher_attn["audio"][i], variant=cfg.cma_variant
        )
        cma["video"].append(weights.video.data)
        cma["audio"].append(weights.audio.data)

    f_t = {}
    for mod in ("video", "audio"):
        refined = obj.refine(teacher_tokens[mod].data, np.stack(cma[mod]))
        pooled = _pool_tokens(refined)
        f_t[mod] = project(models.teacher_head[mod], pooled)
        assert not f_t[mod].requires_grad  # stop-gradient by construction

    # student views: projected masked-global plus each local view
    student_views = {"video": [], "audio": []}
    for mod in ("video", "audio"):
        pooled_global = _pool_tokens(student_global_tokens[mod])
        student_views[mod].append(project(models.student_head[mod], pooled_global))
    for i in range(setup.view_cfg.n_locals):
        for mod in ("video", "audio"):
            locs = [v.local_videos[i] if mod == "video" else v.local_audios[i] for v in views]
            tokens = [patchify(loc, mod, patch[mod]) for loc in locs]
            seq = embed_batch(tokens, models.student_embed[mod], drop_masked=False)
            out = encode(models.student_encoder[mod], seq)
            student_views[mod].append(project(models.student_head[mod], _pool_tokens(out.tokens)))

    f_s = {mod: ag.concat(student_views[mod], axis=0) for mod in ("video", "audio")}

    l_da = obj.domain_alignment_loss(
        f_s["video"], f_s["audio"], f_t["video"].data, f_t["audio"].data,
        variant=cfg.align_variant, cfg=cfg.kernel,
    )

    # centering (teacher side only), then temperature sharpening
    tau_tv = _sched(cfg.sharpen.tau_teacher_video, step)
    tau_ta = _sched(cfg.sharpen.tau_teacher_audio, step)
    teacher_logits = {"video": f_t["video"].data, "audio": f_t["audio"].data}
    if cfg.centering:
        teacher_logits = {
            mod: obj.center_apply_update(teacher_logits[mod], state.centers[mod])
            for mod in ("video", "audio")
        }
    p_t_video = obj.sharpen(teacher_logits["video"], tau_tv).data
    p_t_audio = obj.sharpen(teacher_logits["audio"], tau_ta).data
    p_s = {
        mod: [obj.sharpen(v, cfg.sharpen.tau_student) for v in student_views[mod]]
        for mod in ("video", "audio")
    }

    l_kd = obj.kd_loss(p_t_video, p_t_audio, p_s["audio"], p_s["video"])

    values = {"L_ae": l_ae.item(), "L_da": l_da.item(), "L_kd": l_kd.item()}
    total = None
    for term, weight in ((l_ae, cfg.weights.recon), (l_da, cfg.weights.align), (l_kd, cfg.weights.distill)):
        if weight == 0.0:
            continue  # keep zero-weight branches out of the graph entirely
        piece = ag.scalar_mul(term, weight)
        total = piece if total is None else ag.add(total, piece)
    if total is None:
        total = Tensor(0.0)
    values["L_xkd"] = total.item()
    for name in ("L_ae", "L_da", "L_kd", "L_xkd"):
        if not np.isfinite(values[name]):
            raise NonFiniteLossError(f"{name} is non-finite at step {step}")

    trainables = list(models.trainable_parameters().values())
    for p in trainables:
        p.grad = None
    if total.requires_grad:
        total.backward()
    for p in trainables:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer_step(trainables, state.optimizer)

    lam = _sched(cfg.ema, step)
    pairs = models.ema_pairs()
    ema_update([t for t, _ in pairs], [s for _, s in pairs], lam)

    kl_v2a = float(np.mean([obj.monitored_kl(p_t_video, v.data) for v in p_s["audio"]]))
    kl_a2v = float(np.mean([obj.monitored_kl(p_t_audio, v.data) for v in p_s["video"]]))

    state.step = step + 1
    return LossRecord(
        step=state.step,
        l_ae=values["L_ae"],
        l_da=values["L_da"],
        l_kd=values["L_kd"],
        l_xkd=values["L_xkd"],
        kl_v2a=kl_v2a,
        kl_a2v=kl_a2v,
        center_norm_video=float(np.linalg.norm(state.centers["video"].center)),
        center_norm_audio=float(np.linalg.norm(state.centers["audio"].center)),
        ema=lam,
        tau_teacher_video=tau_tv,
        tau_teacher_audio=tau_ta,
    )


def ema_update(teacher_params, student_params, lam: float) -> None:
    """theta_t <- lam * theta_t + (1 - lam) * theta_s, elementwise in place."""
    if len(teacher_params) != len(student_params):
        raise ContractError("ema_update: parameter lists differ in length")
    for t, s in zip(teacher_params, student_params):
        if t.data.shape != s.data.shape:
            raise ContractError(f"ema_update: shape mismatch {t.data.shape} vs {s.data.shape}")
        t.data *= lam
        t.data += (1.0 - lam) * s.data


def collapse_monitor(records, epsilon: float = 1e-3, window: int = 50) -> CollapseVerdict:
    """Windowed collapse detection over a LossRecord stream.

    kd-collapse: mean distillation loss over the window fell below epsilon.
    kld-collapse: mean monitored teacher-student KL fell below epsilon
    (constant-output mode: the distributions match trivially).
    """
    if window < 1:
        raise ContractError("collapse window must be >= 1")
    if len(records) < window:
        return CollapseVerdict("healthy", float("nan"), float("nan"), window)
    tail = records[-window:]
    kd_mean = float(np.mean([r.l_kd for r in tail]))
    kl_mean = float(np.mean([(r.kl_v2a + r.kl_a2v) / 2.0 for r in tail]))
    if kd_mean < epsilon:
        return CollapseVerdict("kd-collapse", kd_mean, kl_mean, window)
    if kl_mean < epsilon:
        return CollapseVerdict("kld-collapse", kd_mean, kl_mean, window)
    return CollapseVerdict("healthy", kd_mean, kl_mean, window)


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------


def _write_blob(fh, name: str, arr: np.ndarray):
    encoded = name.encode()
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(arr.tobytes())


def _collect_blobs(models: ModelSet, optimizer: OptimizerState, centers, step: int):
    blobs = {}
    for name, tensor in models.named_parameters().items():
        blobs[f"param.{name}"] = tensor.data
    trainable_names = list(models.trainable_parameters().keys())
    for name, m, v in zip(trainable_names, optimizer.first_moment, optimizer.second_moment):
        blobs[f"opt.m.{name}"] = m
        blobs[f"opt.v.{name}"] = v
    blobs["opt.step_count"] = np.array([float(optimizer.step_count)])
    blobs["center.video"] = centers["video"].center
    blobs["center.audio"] = centers["audio"].center
    blobs["train.step"] = np.array([float(step)])
    return blobs


def save_checkpoint(path, models: ModelSet, optimizer: OptimizerState, centers, step: int) -> None:
    """Write all parameter/optimizer/center buffers as named f64 blobs."""
    blobs = _collect_blobs(models, optimizer, centers, step)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            _write_blob(fh, name, arr)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint into an ordered {name: array} map."""
    blobs = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "blob count"))
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"blob {i} name length"))
            name = _read_exact(fh, name_len, f"blob {i} name").decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, f"{name} extent"))[0] for _ in range(rank)
            )
            n_bytes = int(np.prod(shape)) * 8 if shape else 8
            data = np.frombuffer(_read_exact(fh, n_bytes, f"{name} payload"), dtype="<f8")
            blobs[name] = data.reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after final blob")
    return blobs


def restore_models(blobs, models: ModelSet) -> None:
    for name, tensor in models.named_parameters().items():
        key = f"param.{name}"
        if key not in blobs:
            raise CheckpointError(f"checkpoint missing parameter {key}")
        if blobs[key].shape != tensor.data.shape:
            raise CheckpointError(
                f"{key}: shape {blobs[key].shape} does not match model {tensor.data.shape}"
            )
        tensor.data[...] = blobs[key]


def restore_state(blobs, state: TrainState) -> None:
    """Restore a full training state (models, optimizer, centers, step)."""
    restore_models(blobs, state.models)
    trainable_names = list(state.models.trainable_parameters().keys())
    for idx, name in enumerate(trainable_names):
        for prefix, buffers in (("opt.m.", state.optimizer.first_moment), ("opt.v.", state.optimizer.second_moment)):
            key = prefix + name
            if key not in blobs:
                raise CheckpointError(f"checkpoint missing optimizer buffer {key}")
            buffers[idx][...] = blobs[key]
    state.optimizer.step_count = int(blobs["opt.step_count"][0])
    state.centers["video"].center[...] = blobs["center.video"]
    state.centers["audio"].center[...] = blobs["center.audio"]
    state.step = int(blobs["train.step"][0])


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    state: TrainState
    records: list
    verdict: CollapseVerdict
    metrics_lines: list


def select_batch(dataset, batch_size: int, seed: int, step: int):
    """Deterministic with-replacement batch selection for a given step."""
    rng = stream_rng(seed, "data", step)
    idx = rng.integers(0, len(dataset), size=batch_size)
    return [dataset[int(i)] for i in idx]


def run_pretraining(
    setup: TrainSetup,
    dataset,
    metrics_path=None,
    checkpoint_dir=None,
    resume_from=None,
    callbacks=(),
) -> PretrainResult:
    """Iterate train_step for the configured number of steps.

    Emits one metrics line per step (header included even for zero steps),
    optionally checkpoints every ``checkpoint_every`` steps plus a final
    checkpoint, and evaluates the collapse monitor each step. With
    ``early_stop_on_collapse`` the loop halts on the first unhealthy verdict;
    the default is record-and-continue.
    """
    if not dataset:
        raise ContractError("run_pretraining: empty dataset")
    cfg = setup.train
    state = build_state(setup)
    if resume_from is not None:
        restore_state(load_checkpoint(resume_from), state)

    records = []
    lines = [METRICS_HEADER]
    verdict = CollapseVerdict("healthy", float("nan"), float("nan"), cfg.collapse_window)
    while state.step < cfg.steps:
        batch = select_batch(dataset, cfg.batch_size, cfg.seed, state.step)
        record = train_step(state, batch, setup)
        records.append(record)
        lines.append(record.csv_row())
        for cb in callbacks:
            cb(record)
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(
                f"{checkpoint_dir}/step_{state.step:06d}.ckpt",
                state.models,
                state.optimizer,
                state.centers,
                state.step,
            )
        verdict = collapse_monitor(records, cfg.collapse_epsilon, cfg.collapse_window)
        if verdict.status != "healthy" and cfg.early_stop_on_collapse:
            break

    if checkpoint_dir is not None:
        save_checkpoint(
            f"{checkpoint_dir}/final.ckpt", state.models, state.optimizer, state.centers, state.step
        )
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return PretrainResult(state=state, records=records, verdict=verdict, metrics_lines=lines)
