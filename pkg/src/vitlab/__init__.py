"""Desk-scale Vision Transformer lab: token augmentation, inline noise filtering,
artifact diagnostics and FLOP accounting on a numpy autodiff core."""

from .anf import ANFConfig, ANFLayer, anf_filter, gate, init_anf_layer, placement_plan
from .model import TokenSequence, Trace, VisionTransformer, ViTConfig, patchify, unpatchify
from .sta import PatchGrid, STAConfig, patch_variance, sta_augment, sta_mask
from .tensor import RngStream, Tape, Tensor, backward, gaussian, gradcheck

__version__ = "0.1.0"
