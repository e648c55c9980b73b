"""Transformer backbone, reconstruction decoder, projector head, model sets.

The encoder is a pre-norm ViT: each block applies self-attention and an MLP
with residual connections, GELU activations, and no dropout. The CLS-query
attention row of the final block (softmax over ALL keys, CLS included) is
exposed for cross-modal attention; its patch-key slice sums to less than one
per head, which is what keeps the cross-modal coupling non-trivial.

Model sets bundle the six networks (two decoders, two students, two teachers)
plus the parameter-sharing topology of the modality-agnostic variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .views_tokens import EmbedParams

VARIANTS = ("MS", "MAS", "MATS")
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    d_model: int
    depth: int
    n_heads: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ContractError("encoder depth must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


@dataclass
class DecoderConfig(EncoderConfig):
    """Shallow decoder: same block structure at its own (smaller) width."""


@dataclass
class ProjectorConfig:
    hidden: int
    bottleneck: int
    out_dim: int


@dataclass
class EncoderOutput:
    """cls/token features after the final layer norm, plus the CLS attention.

    attn_last: (H, N) per-head CLS-query attention over patch keys from the
    final block ((B, H, N) when batched). The full row including the CLS key
    sums to 1; this slice therefore sums to < 1.
    """

    cls: Tensor
    tokens: Tensor
    attn_last: Tensor


def trunc_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) resampled until all entries lie within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _param(init, requires_grad=True):
    return Tensor(init, requires_grad=requires_grad)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, d_model, mlp_ratio, init_fn):
        hidden = d_model * mlp_ratio
        return cls(
            ln1_g=_param(np.ones(d_model)),
            ln1_b=_param(np.zeros(d_model)),
            wq=_param(init_fn((d_model, d_model))),
            bq=_param(np.zeros(d_model)),
            wk=_param(init_fn((d_model, d_model))),
            bk=_param(np.zeros(d_model)),
            wv=_param(init_fn((d_model, d_model))),
            bv=_param(np.zeros(d_model)),
            wo=_param(init_fn((d_model, d_model))),
            bo=_param(np.zeros(d_model)),
            ln2_g=_param(np.ones(d_model)),
            ln2_b=_param(np.zeros(d_model)),
            w1=_param(init_fn((d_model, hidden))),
            b1=_param(np.zeros(hidden)),
            w2=_param(init_fn((hidden, d_model))),
            b2=_param(np.zeros(d_model)),
        )

    def named(self, prefix):
        return {f"{prefix}.{name}": getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    blocks: list
    ln_f_g: Tensor
    ln_f_b: Tensor

    @classmethod
    def create(cls, cfg, init_fn):
        return cls(
            cfg=cfg,
            blocks=[BlockParams.create(cfg.d_model, cfg.mlp_ratio, init_fn) for _ in range(cfg.depth)],
            ln_f_g=_param(np.ones(cfg.d_model)),
            ln_f_b=_param(np.zeros(cfg.d_model)),
        )

    def named(self, prefix):
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.block{i}"))
        out[f"{prefix}.ln_f_g"] = self.ln_f_g
        out[f"{prefix}.ln_f_b"] = self.ln_f_b
        return out


@dataclass
class DecoderParams:
    cfg: DecoderConfig
    embed_w: Tensor  # encoder width -> decoder width
    embed_b: Tensor
    core: EncoderParams
    out_w: Tensor  # decoder width -> patch dimension
    out_b: Tensor

    @classmethod
    def create(cls, cfg, d_encoder, d_patch, init_fn):
        return cls(
            cfg=cfg,
            embed_w=_param(init_fn((d_encoder, cfg.d_model))),
            embed_b=_param(np.zeros(cfg.d_model)),
            core=EncoderParams.create(cfg, init_fn),
            out_w=_param(init_fn((cfg.d_model, d_patch))),
            out_b=_param(np.zeros(d_patch)),
        )

    def named(self, prefix):
        out = {
            f"{prefix}.embed_w": self.embed_w,
            f"{prefix}.embed_b": self.embed_b,
            f"{prefix}.out_w": self.out_w,
            f"{prefix}.out_b": self.out_b,
        }
        out.update(self.core.named(f"{prefix}.core"))
        return out


@dataclass
class ProjectorHead:
    """3-layer MLP with non-affine layer norm + GELU after each hidden layer,
    an L2-normalized bottleneck, and a bias-free final linear."""

    cfg: ProjectorConfig
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    w_out: Tensor

    @classmethod
    def create(cls, d_model, cfg, init_fn):
        return cls(
            cfg=cfg,
            w1=_param(init_fn((d_model, cfg.hidden))),
            b1=_param(np.zeros(cfg.hidden)),
            w2=_param(init_fn((cfg.hidden, cfg.hidden))),
            b2=_param(np.zeros(cfg.hidden)),
            w3=_param(init_fn((cfg.hidden, cfg.bottleneck))),
            b3=_param(np.zeros(cfg.bottleneck)),
            w_out=_param(init_fn((cfg.bottleneck, cfg.out_dim))),
        )

    def named(self, prefix):
        return {
            f"{prefix}.{n}": getattr(self, n)
            for n in ("w1", "b1", "w2", "b2", "w3", "b3", "w_out")
        }


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _affine_ln(x, gamma, beta):
    return ag.add(ag.mul(ag.layer_norm(x), gamma), beta)


def _linear(x, w, b=None):
    out = ag.matmul(x, w)
    return out if b is None else ag.add(out, b)


def _attention(x, blk, cfg):
    """Multi-head self-attention on (B, S, D); returns (out, attn (B,H,S,S))."""
    b, s, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim

    def split_heads(t):
        return ag.transpose(ag.reshape(t, (b, s, h, hd)), (0, 2, 1, 3))

    q = split_heads(_linear(x, blk.wq, blk.bq))
    k = split_heads(_linear(x, blk.wk, blk.bk))
    v = split_heads(_linear(x, blk.wv, blk.bv))
    logits = ag.scalar_mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = ag.softmax(logits)
    ctx = ag.matmul(attn, v)  # (B, H, S, hd)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    return _linear(ctx, blk.wo, blk.bo), attn


def _block(x, blk, cfg):
    attn_out, attn = _attention(_affine_ln(x, blk.ln1_g, blk.ln1_b), blk, cfg)
    x = ag.add(x, attn_out)
    hidden = ag.gelu(_linear(_affine_ln(x, blk.ln2_g, blk.ln2_b), blk.w1, blk.b1))
    x = ag.add(x, _linear(hidden, blk.w2, blk.b2))
    return x, attn


def encode(params: EncoderParams, seq: Tensor) -> EncoderOutput:
    """Run the pre-norm transformer on a CLS-prefixed sequence.

    Accepts (S, D) or (B, S, D); the CLS-query attention of the final block
    is sliced to patch keys and returned alongside the final-layer-norm
    cls/token features.
    """
    cfg = params.cfg
    squeeze = seq.ndim == 2
    if squeeze:
        seq = ag.reshape(seq, (1,) + seq.shape)
    if seq.ndim != 3 or seq.shape[-1] != cfg.d_model:
        raise ContractError(f"encode: expected (B, S, {cfg.d_model}) sequence, got {seq.shape}")
    x = seq
    attn = None
    for blk in params.blocks:
        x, attn = _block(x, blk, cfg)
    x = _affine_ln(x, params.ln_f_g, params.ln_f_b)
    cls = ag.slice_(x, (slice(None), 0))
    tokens = ag.slice_(x, (slice(None), slice(1, None)))
    cls_attn = ag.slice_(attn, (slice(None), slice(None), 0, slice(1, None)))  # (B, H, N)
    if squeeze:
        cls = ag.reshape(cls, cls.shape[1:])
        tokens = ag.reshape(tokens, tokens.shape[1:])
        cls_attn = ag.reshape(cls_attn, cls_attn.shape[1:])
    return EncoderOutput(cls=cls, tokens=tokens, attn_last=cls_attn)


def decode(
    decoder: DecoderParams,
    embed_params: EmbedParams,
    kept_features: Tensor,
    masks: np.ndarray,
    grid: tuple,
) -> Tensor:
    """Reconstruct patch vectors at masked positions.

    Args:
        decoder: decoder parameters.
        embed_params: the modality's embedding parameters; supplies the shared
            mask token and the positional rows for masked positions.
        kept_features: (B, M, d_enc) encoder token features of kept positions
            (CLS removed), from an encode over a drop-masked embedding.
        masks: (B, N) boolean array, True at masked positions; every row must
            have the same count (the floor-rule mask guarantees this).
        grid: view grid geometry, used to locate positional rows.

    Returns:
        (B, N_m, D_patch) predictions ordered by ascending masked index.
    """
    if kept_features.ndim != 3:
        raise ContractError(f"decode: kept_features must be (B, M, D), got {kept_features.shape}")
    b, m, _ = kept_features.shape
    n = masks.shape[1]
    n_masked = n - m
    if n_masked == 0:
        return Tensor(np.zeros((b, 0, decoder.out_w.shape[1])))
    offset = embed_params.region_offset(grid)
    masked_idx = np.stack([np.flatnonzero(row) for row in masks])  # (B, N_m)
    kept_idx = np.stack([np.flatnonzero(~row) for row in masks])  # (B, M)

    pos_rows = ag.slice_(embed_params.pos_table, (offset + masked_idx,))  # (B, N_m, D)
    mask_rows = ag.add(ag.reshape(embed_params.mask_token, (1, 1, -1)), pos_rows)
    stacked = ag.concat([kept_features, mask_rows], axis=1)  # (B, N, D), wrong order

    # permutation back to grid order: kept rows come first in `stacked`
    perm = np.empty((b, n), dtype=int)
    rows = np.arange(b)[:, None]
    np.put_along_axis(perm, kept_idx, np.broadcast_to(np.arange(m), (b, m)).copy(), axis=1)
    np.put_along_axis(perm, masked_idx, m + np.broadcast_to(np.arange(n_masked), (b, n_masked)).copy(), axis=1)
    full = ag.slice_(stacked, (rows, perm))  # (B, N, D)

    x = _linear(full, decoder.embed_w, decoder.embed_b)
    for blk in decoder.core.blocks:
        x, _ = _block(x, blk, decoder.cfg)
    x = _affine_ln(x, decoder.core.ln_f_g, decoder.core.ln_f_b)
    x = _linear(x, decoder.out_w, decoder.out_b)
    return ag.slice_(x, (rows, masked_idx))


def project(head: ProjectorHead, pooled: Tensor) -> Tensor:
    """Projector forward: (B, d_model) or (d_model,) -> J-dim output."""
    squeeze = pooled.ndim == 1
    x = ag.reshape(pooled, (1, -1)) if squeeze else pooled
    x = ag.gelu(ag.layer_norm(_linear(x, head.w1, head.b1)))
    x = ag.gelu(ag.layer_norm(_linear(x, head.w2, head.b2)))
    x = ag.l2_normalize(_linear(x, head.w3, head.b3))
    x = ag.matmul(x, head.w_out)
    return ag.reshape(x, (x.shape[1],)) if squeeze else x


# ---------------------------------------------------------------------------
# model set
# ---------------------------------------------------------------------------

MODALITIES = ("video", "audio")


@dataclass
class ModelSet:
    """The six networks plus sharing topology.

    Students and decoders are trainable; teachers are frozen copies updated
    only by EMA. In MAS the two student encoders are the same object; MATS
    additionally shares the teacher encoders. Input projections (EmbedParams)
    and decoders are never shared across modalities.
    """

    variant: str
    encoder_cfg: EncoderConfig
    decoder_cfg: DecoderConfig
    projector_cfg: ProjectorConfig
    student_embed: dict
    student_encoder: dict
    student_head: dict
    teacher_embed: dict
    teacher_encoder: dict
    teacher_head: dict
    decoder: dict
    patch_dims: dict = field(default_factory=dict)

    def named_parameters(self):
        """Ordered name -> Tensor map; shared objects appear exactly once."""
        out = {}
        seen = {}

        def put(mapping):
            for name, tensor in mapping.items():
                if id(tensor) in seen:
                    continue
                seen[id(tensor)] = name
                out[name] = tensor

        for mod in MODALITIES:
            put(self.decoder[mod].named(f"decoder.{mod}"))
        for mod in MODALITIES:
            put(self.student_embed[mod].named(f"student.{mod}.embed"))
        if self.variant in ("MAS", "MATS"):
            put(self.student_encoder["video"].named("student.shared.enc"))
        else:
            for mod in MODALITIES:
                put(self.student_encoder[mod].named(f"student.{mod}.enc"))
        for mod in MODALITIES:
            put(self.student_head[mod].named(f"student.{mod}.head"))
        for mod in MODALITIES:
            put(self.teacher_embed[mod].named(f"teacher.{mod}.embed"))
        if self.variant == "MATS":
            put(self.teacher_encoder["video"].named("teacher.shared.enc"))
        else:
            for mod in MODALITIES:
                put(self.teacher_encoder[mod].named(f"teacher.{mod}.enc"))
        for mod in MODALITIES:
            put(self.teacher_head[mod].named(f"teacher.{mod}.head"))
        return out

    def trainable_parameters(self):
        """Unique trainable tensors (decoders + students + heads), ordered."""
        return {
            name: t for name, t in self.named_parameters().items() if t.requires_grad
        }

    def ema_pairs(self):
        """(teacher tensor, student tensor) pairs; shared teachers listed once."""
        pairs = []
        seen = set()

        def pair_containers(t_container, s_container, names):
            for name in names:
                t, s = getattr(t_container, name), getattr(s_container, name)
                if id(t) in seen:
                    continue
                seen.add(id(t))
                pairs.append((t, s))

        embed_fields = ("proj_w", "proj_b", "pos_table", "cls", "mask_token")
        head_fields = ("w1", "b1", "w2", "b2", "w3", "b3", "w_out")
        for mod in MODALITIES:
            pair_containers(self.teacher_embed[mod], self.student_embed[mod], embed_fields)
        for mod in MODALITIES:
            t_enc, s_enc = self.teacher_encoder[mod], self.student_encoder[mod]
            for t_blk, s_blk in zip(t_enc.blocks, s_enc.blocks):
                pair_containers(t_blk, s_blk, tuple(BlockParams.__dataclass_fields__))
            pair_containers(t_enc, s_enc, ("ln_f_g", "ln_f_b"))
        for mod in MODALITIES:
            pair_containers(self.teacher_head[mod], self.student_head[mod], head_fields)
        return pairs


def _copy_embed(src):
    return EmbedParams(
        proj_w=Tensor(src.proj_w.data.copy()),
        proj_b=Tensor(src.proj_b.data.copy()),
        pos_table=Tensor(src.pos_table.data.copy()),
        cls=Tensor(src.cls.data.copy()),
        mask_token=Tensor(src.mask_token.data.copy()),
        regions=dict(src.regions),
    )


def _copy_encoder(src):
    blocks = []
    for blk in src.blocks:
        blocks.append(
            BlockParams(**{n: Tensor(getattr(blk, n).data.copy()) for n in BlockParams.__dataclass_fields__})
        )
    return EncoderParams(
        cfg=src.cfg,
        blocks=blocks,
        ln_f_g=Tensor(src.ln_f_g.data.copy()),
        ln_f_b=Tensor(src.ln_f_b.data.copy()),
    )


def _copy_head(src):
    return ProjectorHead(
        cfg=src.cfg,
        **{n: Tensor(getattr(src, n).data.copy()) for n in ("w1", "b1", "w2", "b2", "w3", "b3", "w_out")},
    )


def build_model_set(
    encoder_cfg: EncoderConfig,
    decoder_cfg: DecoderConfig,
    projector_cfg: ProjectorConfig,
    patch_dims: dict,
    grids: dict,
    variant: str,
    rng: np.random.Generator,
) -> ModelSet:
    """Initialize all networks with the requested sharing topology.

    Args:
        patch_dims: {"video": D_patch_v, "audio": D_patch_a}.
        grids: {"video": [global grid, local grid, ...], "audio": [...]} —
            every view geometry the positional tables must cover.
        variant: "MS", "MAS", or "MATS".
        rng: source of all initial values (truncated normal, std 0.02;
            biases zero; layer-norm scales start at identity).
    """
    if variant not in VARIANTS:
        raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
    init = lambda shape: trunc_normal(rng, shape)

    student_embed = {
        mod: EmbedParams.create(patch_dims[mod], encoder_cfg.d_model, grids[mod], init)
        for mod in MODALITIES
    }
    if variant in ("MAS", "MATS"):
        shared = EncoderParams.create(encoder_cfg, init)
        student_encoder = {mod: shared for mod in MODALITIES}
    else:
        student_encoder = {mod: EncoderParams.create(encoder_cfg, init) for mod in MODALITIES}
    student_head = {
        mod: ProjectorHead.create(encoder_cfg.d_model, projector_cfg, init) for mod in MODALITIES
    }
    decoder = {
        mod: DecoderParams.create(decoder_cfg, encoder_cfg.d_model, patch_dims[mod], init)
        for mod in MODALITIES
    }

    teacher_embed = {mod: _copy_embed(student_embed[mod]) for mod in MODALITIES}
    if variant == "MATS":
        shared_t = _copy_encoder(student_encoder["video"])
        teacher_encoder = {mod: shared_t for mod in MODALITIES}
    else:
        teacher_encoder = {mod: _copy_encoder(student_encoder[mod]) for mod in MODALITIES}
    teacher_head = {mod: _copy_head(student_head[mod]) for mod in MODALITIES}

    return ModelSet(
        variant=variant,
        encoder_cfg=encoder_cfg,
        decoder_cfg=decoder_cfg,
        projector_cfg=projector_cfg,
        student_embed=student_embed,
        student_encoder=student_encoder,
        student_head=student_head,
        teacher_embed=teacher_embed,
        teacher_encoder=teacher_encoder,
        teacher_head=teacher_head,
        decoder=decoder,
        patch_dims=dict(patch_dims),
    )
