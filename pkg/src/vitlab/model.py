"""Minimal pre-norm Vision Transformer with optional STA, ANF and register tokens.

Forward order: patchify -> sta_augment (training, if configured) -> embed ->
[block -> anf_filter at planned indices] x L -> layernorm -> class-token head.

Parameters live in a flat ``dict[str, Tensor]`` so tests and the optimizer
can address any of them by name.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .anf import ANFConfig, ANFLayer, anf_filter, init_anf_layer, placement_plan
from .errors import IndivisibleImage, ShapeMismatch
from .sta import PatchGrid, STAConfig, sta_augment
from .tensor import RngStream, Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ViTConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    num_registers: int = 0
    sta: STAConfig | None = None
    anf: ANFConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise IndivisibleImage(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_registers < 0:
            raise ValueError("num_registers must be >= 0")
        if min(self.channels, self.num_blocks, self.num_classes) < 1:
            raise ValueError("channels, num_blocks and num_classes must be >= 1")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def num_special(self) -> int:
        return 1 + self.num_registers

    def baseline(self) -> "ViTConfig":
        """Same shape with every mechanism switched off."""
        return replace(self, sta=None, anf=None, num_registers=0)


@dataclass
class TokenSequence:
    """Tokens laid out as [class, registers..., patches...] along axis -2."""

    tokens: Tensor
    num_registers: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        expected = 1 + self.num_registers + self.grid_h * self.grid_w
        if self.tokens.shape[-2] != expected:
            raise ShapeMismatch(f"expected {expected} tokens, got {self.tokens.shape[-2]}")

    @property
    def patch_start(self) -> int:
        return 1 + self.num_registers

    def patch_tokens(self) -> np.ndarray:
        return self.tokens.data[..., self.patch_start :, :]


@dataclass
class Trace:
    """Token states after embedding and after every block / filter."""

    labels: list[str] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    num_registers: int = 0
    grid_h: int = 0
    grid_w: int = 0

    def add(self, label: str, tokens: Tensor) -> None:
        self.labels.append(label)
        self.states.append(tokens.data)

    def image(self, b: int) -> "Trace":
        """Trace of a single image out of a batched run."""
        return Trace(
            list(self.labels),
            [s[b] for s in self.states],
            [a[b] for a in self.attention],
            self.num_registers,
            self.grid_h,
            self.grid_w,
        )


# patches

def _check_image(image: np.ndarray, patch: int) -> None:
    h, w = image.shape[-3:-1]
    if h % patch or w % patch:
        raise IndivisibleImage(f"image {h}x{w} not divisible by patch {patch}")


def patchify_array(images: np.ndarray, patch: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., N, p*p*C]`` with patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    _check_image(images, patch)
    *lead, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify_array(patches: np.ndarray, grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    *lead, n, pdim = patches.shape
    c = pdim // (patch * patch)
    x = patches.reshape(*lead, grid_h, grid_w, patch, patch, c)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, grid_h * patch, grid_w * patch, c)


def patchify(image, patch_size: int) -> PatchGrid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    _check_image(image, patch_size)
    h, w = image.shape[:2]
    return PatchGrid(
        Tensor._wrap(patchify_array(image, patch_size)), h // patch_size, w // patch_size
    )


def unpatchify(grid: PatchGrid, patch_size: int) -> np.ndarray:
    return unpatchify_array(grid.patches.data, grid.grid_h, grid.grid_w, patch_size)


# parameters

def trunc_normal(rng: RngStream, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws with anything beyond two standard deviations redrawn."""
    n = int(np.prod(shape))
    out = rng.normal(n)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).reshape(shape)


def init_params(cfg: ViTConfig) -> dict[str, Tensor]:
    """Seeded initialization; each tensor draws from a stream keyed by its name,
    so toggling a mechanism leaves every shared parameter unchanged."""
    root = RngStream(cfg.seed)
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    raw: dict[str, np.ndarray] = {}

    def normal(name, shape):
        raw[name] = trunc_normal(root.derive(zlib.crc32(name.encode())), shape)

    def const(name, shape, value):
        raw[name] = np.full(shape, float(value))

    normal("embed.weight", (cfg.patch_dim, d))
    const("embed.bias", (d,), 0)
    normal("pos", (cfg.num_patches, d))
    normal("cls", (1, d))
    if cfg.num_registers:
        normal("registers", (cfg.num_registers, d))
    for i in range(1, cfg.num_blocks + 1):
        p = f"blocks.{i}."
        const(p + "ln1.gamma", (d,), 1)
        const(p + "ln1.beta", (d,), 0)
        normal(p + "attn.qkv.weight", (d, 3 * d))
        const(p + "attn.qkv.bias", (3 * d,), 0)
        normal(p + "attn.proj.weight", (d, d))
        const(p + "attn.proj.bias", (d,), 0)
        const(p + "ln2.gamma", (d,), 1)
        const(p + "ln2.beta", (d,), 0)
        normal(p + "mlp.fc1.weight", (d, hid))
        const(p + "mlp.fc1.bias", (hid,), 0)
        normal(p + "mlp.fc2.weight", (hid, d))
        const(p + "mlp.fc2.bias", (d,), 0)
    for i in sorted(placement_plan(cfg.anf, cfg.num_blocks)):
        for name, t in init_anf_layer(d, cfg.anf).parameters().items():
            raw[f"anf.{i}.{name}"] = t.data
    const("norm.gamma", (d,), 1)
    const("norm.beta", (d,), 0)
    normal("head.weight", (d, cfg.num_classes))
    const("head.bias", (cfg.num_classes,), 0)
    return {name: Tensor(arr, requires_grad=True) for name, arr in raw.items()}


def anf_layer(params: dict[str, Tensor], index: int, mode: str) -> ANFLayer:
    p = f"anf.{index}."
    return ANFLayer(
        kernels=params[p + "kernels"],
        conv_bias=params[p + "conv_bias"],
        gate_weight=params[p + "gate_weight"],
        gate_bias=params[p + "gate_bias"],
        ln_gamma=params[p + "ln_gamma"],
        ln_beta=params[p + "ln_beta"],
        gate_mode=mode,
    )


# building blocks

def embed(grid_patches: Tensor, params: dict[str, Tensor], cfg: ViTConfig) -> TokenSequence:
    """Project ``[..., N, P]`` patches and prepend class and register tokens."""
    x = grid_patches
    patches = tn.matmul(x, params["embed.weight"]) + params["embed.bias"] + params["pos"]
    lead = patches.shape[:-2]
    d = cfg.embed_dim
    parts = [tn.broadcast_to(params["cls"], (*lead, 1, d))]
    if cfg.num_registers:
        parts.append(tn.broadcast_to(params["registers"], (*lead, cfg.num_registers, d)))
    parts.append(patches)
    return TokenSequence(tn.concat(parts, axis=-2), cfg.num_registers, cfg.grid_h, cfg.grid_w)


def linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return tn.matmul(x, params[prefix + ".weight"]) + params[prefix + ".bias"]


def mhsa(x: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention over ``x[..., T, D]``; returns output and probabilities."""
    *lead, t, d = x.shape
    dh = d // num_heads
    qkv = linear(x, params, prefix + ".qkv")
    k_lead = len(lead)
    perm = (*range(k_lead), k_lead + 1, k_lead, k_lead + 2)

    def heads(part: int) -> Tensor:
        sl = qkv[..., part * d : (part + 1) * d]
        return tn.transpose(sl.reshape(*lead, t, num_heads, dh), perm)

    q, k, v = heads(0), heads(1), heads(2)
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    probs = tn.softmax_rows(scores)
    mixed = tn.transpose(tn.matmul(probs, v), perm).reshape(*lead, t, d)
    return linear(mixed, params, prefix + ".proj"), probs.data


def block_forward(x: Tensor, params: dict[str, Tensor], index: int, cfg: ViTConfig) -> tuple[Tensor, np.ndarray]:
    p = f"blocks.{index}."
    h = tn.layernorm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], LN_EPS)
    attn, probs = mhsa(h, params, p + "attn", cfg.num_heads)
    x = x + attn
    h = tn.layernorm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], LN_EPS)
    h = linear(tn.gelu(linear(h, params, p + "mlp.fc1")), params, p + "mlp.fc2")
    return x + h, probs


def apply_anf(x: Tensor, layer: ANFLayer, cfg: ViTConfig) -> Tensor:
    if cfg.anf.apply_to_special_tokens:
        return anf_filter(layer, x, LN_EPS)
    s = cfg.num_special
    return tn.concat([x[..., :s, :], anf_filter(layer, x[..., s:, :], LN_EPS)], axis=-2)


def augment_batch(patches: np.ndarray, cfg: ViTConfig, rng: RngStream, keys, training: bool) -> np.ndarray:
    """STA on every image of ``patches[B, N, P]``; image ``b`` uses ``rng.derive(keys[b])``."""
    if cfg.sta is None:
        return patches
    out = patches.copy()
    for b, key in enumerate(keys):
        grid = PatchGrid(Tensor._wrap(patches[b]), cfg.grid_h, cfg.grid_w)
        out[b] = sta_augment(grid, cfg.sta, rng.derive(int(key)), training).patches.data
    return out


class VisionTransformer:
    def __init__(self, cfg: ViTConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        self.anf_indices = sorted(placement_plan(cfg.anf, cfg.num_blocks))

    def forward_tokens(self, seq: TokenSequence, trace: Trace | None = None) -> Tensor:
        cfg, params = self.cfg, self.params
        x = seq.tokens
        for i in range(1, cfg.num_blocks + 1):
            x, probs = block_forward(x, params, i, cfg)
            if trace is not None:
                trace.add(f"block{i}", x)
                trace.attention.append(probs)
            if i in self.anf_indices:
                x = apply_anf(x, anf_layer(params, i, cfg.anf.gate), cfg)
                if trace is not None:
                    trace.add(f"anf{i}", x)
        x = tn.layernorm(x, params["norm.gamma"], params["norm.beta"], LN_EPS)
        # registers are dropped here: only the class token reaches the head
        logits = linear(x[..., :1, :], params, "head")
        return logits.reshape(*x.shape[:-2], self.cfg.num_classes)

    def forward(
        self,
        images,
        training: bool = False,
        rng: RngStream | None = None,
        keys=None,
    ) -> tuple[Tensor, Trace]:
        """Logits for ``images[B, H, W, C]`` (or one ``[H, W, C]`` image) plus the token trace.

        With STA configured and ``training`` set, image ``b`` is augmented with
        the stream ``rng.derive(keys[b])``; ``keys`` defaults to batch positions.
        """
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        if images.shape[1:] != (cfg.image_h, cfg.image_w, cfg.channels):
            raise ShapeMismatch(f"images {images.shape[1:]} do not match config")
        patches = patchify_array(images, cfg.patch_size)
        if cfg.sta is not None and (training or not cfg.sta.train_only):
            rng = rng if rng is not None else RngStream(cfg.seed).derive(0x57A)
            keys = range(len(images)) if keys is None else keys
            patches = augment_batch(patches, cfg, rng, keys, training)
        seq = embed(Tensor._wrap(patches), self.params, cfg)
        trace = Trace(num_registers=cfg.num_registers, grid_h=cfg.grid_h, grid_w=cfg.grid_w)
        trace.add("embed", seq.tokens)
        logits = self.forward_tokens(seq, trace)
        if single:
            logits = logits[0]
            trace = trace.image(0)
        return logits, trace

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}
