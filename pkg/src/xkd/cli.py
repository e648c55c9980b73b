"""Command-line front end.

Commands: pretrain, gradcheck, probe, reconstruct, gen-data. Global flags
--config / --seed / --out apply to every command; ``--set key=value`` applies
arbitrary configuration overrides. Diagnostics go to stderr, data and tables
to stdout. Exit codes: 0 ok, 1 check failure, 2 usage or config error,
3 collapse (with --fail-on-collapse). XKD_THREADS caps worker pools.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .checks import THRESHOLD, run_gradient_suite
from .config import ConfigError, RunConfig
from .objectives import cross_modal_attention, normalize_patch_targets
from .probe import features_from_models, features_to_csv, late_fusion, linear_probe
from .synthdata import DatasetFormatError, generate_clip, make_dataset, read_dataset, write_dataset
from .trainer import (
    CheckpointError,
    NonFiniteLossError,
    build_state,
    load_checkpoint,
    restore_models,
    run_pretraining,
    stream_rng,
)
from .backbone import encode
from .views_tokens import embed_batch, mask_tokens, patchify, unpatchify
from .backbone import decode as decode_tokens

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_USAGE = 2
EXIT_COLLAPSE = 3


def _workers():
    raw = os.environ.get("XKD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        print(f"warning: ignoring invalid XKD_THREADS={raw!r}", file=sys.stderr)
        return 1


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg.set(key, value)
    if args.seed is not None:
        cfg.set("train.seed", str(args.seed))
    return cfg


def _eval_dataset(cfg: RunConfig):
    """Deterministic held-out split, disjoint seeds from the training split."""
    spec = cfg.generator_spec()
    per_class = cfg["data.eval_clips_per_class"]
    clips = []
    for class_id in range(spec.n_classes):
        for k in range(per_class):
            clips.append(generate_clip(spec, class_id, 777_000_001 + k * spec.n_classes + class_id))
    return clips


def _train_dataset(cfg: RunConfig, data_path=None):
    if data_path:
        _, clips = read_dataset(data_path)
        return clips
    return make_dataset(cfg.generator_spec(), cfg["data.train_clips_per_class"], seed=cfg["train.seed"])


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = cfg.train_setup()
    dataset = _train_dataset(cfg, args.data)
    (out / "config.effective.txt").write_text(cfg.dump())
    result = run_pretraining(
        setup,
        dataset,
        metrics_path=out / "metrics.csv",
        checkpoint_dir=str(out),
        resume_from=args.resume,
    )
    print(f"completed {result.state.step} steps; metrics at {out / 'metrics.csv'}")
    if result.records:
        last = result.records[-1]
        print(f"final: L_ae={last.l_ae:.6f} L_da={last.l_da:.6f} L_kd={last.l_kd:.6f}")
    if result.verdict.status != "healthy":
        print(
            f"collapse verdict: {result.verdict.status} "
            f"(kd mean {result.verdict.kd_mean:.3e}, kl mean {result.verdict.kl_mean:.3e})",
            file=sys.stderr,
        )
        if cfg["train.fail_on_collapse"]:
            return EXIT_COLLAPSE
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(seeds=args.seeds, only=args.only)
    if not results:
        print(f"no checks match --only {args.only!r}", file=sys.stderr)
        return EXIT_USAGE
    failed = []
    for name, err in results:
        status = "PASS" if err < THRESHOLD else "FAIL"
        print(f"{name:<36} {err:12.3e}  {status}")
        if err >= THRESHOLD:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def _restore_from_checkpoint(cfg: RunConfig, checkpoint_path):
    state = build_state(cfg.train_setup())
    blobs = load_checkpoint(checkpoint_path)
    restore_models(blobs, state.models)
    return state.models


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    models = _restore_from_checkpoint(cfg, args.checkpoint)
    if args.data:
        _, clips = read_dataset(args.data)
        split = max(len(clips) * 2 // 3, 1)
        train_clips, test_clips = clips[:split], clips[split:]
    else:
        train_clips = _train_dataset(cfg)
        test_clips = _eval_dataset(cfg)
    if not test_clips:
        print("probe: empty held-out split", file=sys.stderr)
        return EXIT_USAGE

    sources = args.source or ["teacher-video", "student-video", "teacher-audio", "student-audio"]
    patch = {
        "video": cfg.train_setup().video_patch,
        "audio": cfg.train_setup().audio_patch,
    }
    workers = _workers()
    probe_cfg = cfg.probe_cfg()
    out_dir = Path(args.features_csv) if args.features_csv else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    table = []
    fused_parts = {}
    for source in sources:
        role, modality = source.split("-", 1)
        train_fm = features_from_models(models, train_clips, modality, role, patch[modality], workers=workers)
        test_fm = features_from_models(models, test_clips, modality, role, patch[modality], workers=workers)
        acc = linear_probe(train_fm, test_fm, probe_cfg)
        table.append((source, acc))
        if role == "teacher":
            fused_parts[modality] = (train_fm, test_fm)
        if out_dir:
            features_to_csv(test_fm, out_dir / f"features_{source}.csv")
    if args.fused:
        for modality in ("video", "audio"):
            if modality not in fused_parts:
                role = "teacher"
                train_fm = features_from_models(models, train_clips, modality, role, patch[modality], workers=workers)
                test_fm = features_from_models(models, test_clips, modality, role, patch[modality], workers=workers)
                fused_parts[modality] = (train_fm, test_fm)
        fused_train = late_fusion(fused_parts["video"][0], fused_parts["audio"][0])
        fused_test = late_fusion(fused_parts["video"][1], fused_parts["audio"][1])
        acc = linear_probe(fused_train, fused_test, probe_cfg)
        table.append(("fused", acc))
        if out_dir:
            features_to_csv(fused_test, out_dir / "features_fused.csv")

    print(f"{'source':<16} accuracy")
    for source, acc in table:
        print(f"{source:<16} {acc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


def _to_u8(img):
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return ((img - lo) * scale).astype(np.uint8)


def _write_pgm(path, gray):
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def _write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def _write_frames(out_dir, tag, video):
    video_u8 = _to_u8(video)
    for t in range(video.shape[0]):
        frame = video_u8[t]
        if frame.shape[-1] == 3:
            _write_ppm(out_dir / f"video_{tag}_f{t:02d}.ppm", frame)
        else:
            _write_pgm(out_dir / f"video_{tag}_f{t:02d}.pgm", frame[..., 0])


def _patch_csv(path, kinds_tokens):
    with open(path, "w") as fh:
        width = next(iter(kinds_tokens.values())).shape[1]
        fh.write("kind,token_index," + ",".join(f"v{i}" for i in range(width)) + "\n")
        for kind, tokens in kinds_tokens.items():
            for idx, row in enumerate(tokens):
                fh.write(f"{kind},{idx}," + ",".join(repr(float(v)) for v in row) + "\n")


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    if args.video_ratio >= 1.0 or args.audio_ratio >= 1.0 or args.video_ratio < 0 or args.audio_ratio < 0:
        print("mask ratios must lie in [0, 1)", file=sys.stderr)
        return EXIT_USAGE
    models = _restore_from_checkpoint(cfg, args.checkpoint)
    setup = cfg.train_setup()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.data:
        _, clips = read_dataset(args.data)
        if not 0 <= args.clip < len(clips):
            print(f"--clip {args.clip} outside dataset of {len(clips)} clips", file=sys.stderr)
            return EXIT_USAGE
        clip = clips[args.clip]
    else:
        spec = cfg.generator_spec()
        clip = generate_clip(spec, args.clip_class % spec.n_classes, args.clip_seed)

    rng = stream_rng(cfg["train.seed"], "reconstruct")
    ratios = {"video": args.video_ratio, "audio": args.audio_ratio}
    patch = {"video": setup.video_patch, "audio": setup.audio_patch}
    channels = setup.video_shape[3]

    for modality in ("video", "audio"):
        view = clip.video if modality == "video" else clip.audio
        batch = patchify(view, modality, patch[modality])
        masked = mask_tokens(batch, ratios[modality], rng)
        original_tokens = batch.tokens
        if not masked.mask.any():
            print(f"{modality}: mask ratio {ratios[modality]} leaves no masked tokens; emitting originals only", file=sys.stderr)
            if modality == "video":
                _write_frames(out, "original", view)
            else:
                _write_pgm(out / "audio_original.pgm", _to_u8(view))
            _patch_csv(out / f"recon_{modality}.csv", {"original": original_tokens})
            continue

        seq = embed_batch([masked], models.student_embed[modality], drop_masked=True)
        enc_out = encode(models.student_encoder[modality], seq)
        pred = decode_tokens(
            models.decoder[modality],
            models.student_embed[modality],
            enc_out.tokens,
            masked.mask[None, :],
            masked.grid,
        ).data[0]

        # predictions live in per-patch standardized space; invert with the
        # original patch statistics for export
        masked_rows = original_tokens[masked.mask]
        mu = masked_rows.mean(axis=1, keepdims=True)
        sd = np.sqrt(masked_rows.var(axis=1, keepdims=True) + 1e-6)
        recon_tokens = original_tokens.copy()
        recon_tokens[masked.mask] = pred * sd + mu
        masked_tokens = original_tokens.copy()
        masked_tokens[masked.mask] = 0.0

        grids = {"grid": masked.grid}
        views = {
            "original": view,
            "masked": unpatchify(masked_tokens, modality, masked.grid, patch[modality], channels if modality == "video" else 1),
            "reconstructed": unpatchify(recon_tokens, modality, masked.grid, patch[modality], channels if modality == "video" else 1),
        }
        for tag, arr in views.items():
            if modality == "video":
                _write_frames(out, tag, arr)
            else:
                _write_pgm(out / f"audio_{tag}.pgm", _to_u8(arr))
        _patch_csv(
            out / f"recon_{modality}.csv",
            {"original": original_tokens, "masked": masked_tokens, "reconstructed": recon_tokens},
        )

    # refine-weight export: teacher attention on the unmasked clip pair
    weights_by_mod = _refine_weights(models, clip, setup)
    for modality, w in weights_by_mod.items():
        with open(out / f"refine_weights_{modality}.csv", "w") as fh:
            fh.write("token_index,weight\n")
            for idx, value in enumerate(w):
                fh.write(f"{idx},{value!r}\n")
    print(f"wrote reconstruction artifacts to {out}")
    return EXIT_OK


def _refine_weights(models, clip, setup):
    attn = {}
    for modality in ("video", "audio"):
        view = clip.video if modality == "video" else clip.audio
        patch = setup.video_patch if modality == "video" else setup.audio_patch
        batch = patchify(view, modality, patch)
        seq = embed_batch([batch], models.teacher_embed[modality], drop_masked=False)
        attn[modality] = encode(models.teacher_encoder[modality], seq).attn_last.data[0]
    weights = cross_modal_attention(attn["video"], attn["audio"])
    return {
        "video": weights.video.data.mean(axis=0),
        "audio": weights.audio.data.mean(axis=0),
    }


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec = cfg.generator_spec()
    clips = make_dataset(spec, args.clips_per_class or cfg["data.train_clips_per_class"], seed=cfg["train.seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (args.name or "dataset.xkdd")
    write_dataset(path, spec, clips)
    print(f"wrote {len(clips)} clips to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="configuration file (key = value lines)")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default="xkd-out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="xkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    _add_common(p)
    p.add_argument("--data", help="dataset file (default: synthesize from config)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    _add_common(p)
    p.add_argument("--only", help="substring filter on check names")
    p.add_argument("--seeds", type=int, default=20, help="random repetitions per check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("probe", help="linear evaluation of frozen features")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to evaluate")
    p.add_argument("--data", help="dataset file (default: synthesize splits from config)")
    p.add_argument(
        "--source",
        action="append",
        choices=["teacher-video", "student-video", "teacher-audio", "student-audio"],
        help="feature source (repeatable; default: all four)",
    )
    p.add_argument("--fused", action="store_true", help="also report late-fusion accuracy")
    p.add_argument("--features-csv", help="directory for feature CSV export")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("reconstruct", help="export masked-reconstruction artifacts")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file to pick --clip from")
    p.add_argument("--clip", type=int, default=0, help="clip index within --data")
    p.add_argument("--clip-class", type=int, default=0, help="class for a synthesized clip")
    p.add_argument("--clip-seed", type=int, default=0, help="seed for a synthesized clip")
    p.add_argument("--video-ratio", type=float, default=0.8, help="video mask ratio")
    p.add_argument("--audio-ratio", type=float, default=0.7, help="audio mask ratio")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    _add_common(p)
    p.add_argument("--clips-per-class", type=int, default=None)
    p.add_argument("--name", help="output file name (default dataset.xkdd)")
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE


if __name__ == "__main__":
    sys.exit(main())
