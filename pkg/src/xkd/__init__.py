"""Masked audio-video reconstruction with domain-aligned cross-modal distillation.

Subpackage map:
    autograd     float64 tensor engine, reverse-mode autodiff, grad checker
    optim        AdamW-style optimizer and warm-up cosine schedules
    views_tokens global/local views, patch tokenization, masking, embedding
    backbone     transformer encoder/decoder, projector head, model sets
    objectives   reconstruction, refinement, MMD alignment, distillation losses
    synthdata    deterministic paired audio-video clip generator + file format
    trainer      the training loop, EMA teachers, collapse monitor, checkpoints
    probe        frozen-feature extraction, linear probe, late fusion
    cli          command-line front end (pretrain / gradcheck / probe / ...)
"""

from .autograd import Tensor, grad_check, op_forward

__all__ = ["Tensor", "grad_check", "op_forward"]
__version__ = "0.1.0"
