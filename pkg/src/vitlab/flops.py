"""Closed-form multiply-accumulate counts for one forward pass of one image.

Counting convention (all integers):

* a matmul ``[m, k] @ [k, n]`` costs ``m * k * n``;
* an elementwise op, add or activation costs one per output element;
* layernorm costs ``2 * D`` per token (centre/scale plus affine);
* softmax costs one per score.

Registers are reported as the backbone cost of the longer sequence minus the
backbone cost without them, so every mechanism enters the total additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .anf import ANFConfig, placement_plan
from .model import ViTConfig
from .sta import STAConfig

COMPONENTS = ("embed", "attention", "mlp", "norms", "head", "registers", "anf", "sta")


@dataclass
class FlopCount:
    components: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def overhead_vs(self, baseline: "FlopCount") -> float:
        return self.total / baseline.total - 1.0


def _attention(t: int, d: int, heads: int) -> int:
    qkv = t * d * 3 * d
    scores = t * t * d  # summed over heads: heads * t * t * (d / heads)
    softmax = heads * t * t
    mix = t * t * d
    proj = t * d * d
    residual = t * d
    return qkv + scores + softmax + mix + proj + residual


def _mlp(t: int, d: int, hidden: int) -> int:
    return t * d * hidden + t * hidden + t * hidden * d + t * d


def _backbone(cfg: ViTConfig, tokens: int) -> dict[str, int]:
    d, L = cfg.embed_dim, cfg.num_blocks
    return {
        "attention": L * _attention(tokens, d, cfg.num_heads),
        "mlp": L * _mlp(tokens, d, cfg.mlp_hidden),
        "norms": (2 * L + 1) * 2 * tokens * d,
    }


def anf_layer_cost(tokens: int, d: int, anf: ANFConfig) -> int:
    conv = tokens * d * anf.kernel_size
    gate_map = tokens * d * d if anf.gate == "full" else tokens * d
    sig = tokens if anf.gate == "token" else tokens * d
    gating = tokens * d
    residual = tokens * d
    norm = 2 * tokens * d
    return conv + gate_map + sig + gating + residual + norm


def sta_cost(num_patches: int, patch_dim: int) -> int:
    # mean, centred square-accumulate, masked noise update
    return 3 * num_patches * patch_dim


def flop_count(cfg: ViTConfig) -> FlopCount:
    n, d = cfg.num_patches, cfg.embed_dim
    base_tokens = 1 + n
    comps = {
        "embed": n * cfg.patch_dim * d + 2 * n * d,
        **_backbone(cfg, base_tokens),
        "head": d * cfg.num_classes,
        "registers": 0,
        "anf": 0,
        "sta": 0,
    }
    if cfg.num_registers:
        longer = _backbone(cfg, base_tokens + cfg.num_registers)
        comps["registers"] = sum(longer.values()) - sum(_backbone(cfg, base_tokens).values())
    if cfg.anf is not None:
        layers = len(placement_plan(cfg.anf, cfg.num_blocks))
        filtered = base_tokens + cfg.num_registers if cfg.anf.apply_to_special_tokens else n
        comps["anf"] = layers * anf_layer_cost(filtered, d, cfg.anf)
    if cfg.sta is not None:
        comps["sta"] = sta_cost(n, cfg.patch_dim)
    return FlopCount(comps)


def vitb16(**overrides) -> ViTConfig:
    """ViT-B/16 at 224px: 196 patches, D=768, 12 heads, 12 blocks."""
    base = dict(
        image_h=224, image_w=224, channels=3, patch_size=16, embed_dim=768,
        num_heads=12, num_blocks=12, mlp_ratio=4.0, num_classes=1000,
    )
    base.update(overrides)
    return ViTConfig(**base)


def overhead_table(cfg: ViTConfig | None = None) -> list[tuple[str, int, float]]:
    """``(variant, total MACs, overhead vs. plain model)`` rows for the bench command."""
    cfg = (cfg or vitb16()).baseline()
    base = flop_count(cfg)
    variants = [
        ("baseline", cfg),
        ("sta", replace(cfg, sta=STAConfig())),
        ("anf_shallow_k3", replace(cfg, anf=ANFConfig(placement="shallow"))),
        ("anf_all_k3", replace(cfg, anf=ANFConfig(placement="all"))),
        ("anf_all_k3_full_gate", replace(cfg, anf=ANFConfig(placement="all", gate="full"))),
        ("sta_anf_all_k3", replace(cfg, sta=STAConfig(), anf=ANFConfig())),
        ("registers_4", replace(cfg, num_registers=4)),
        ("registers_16", replace(cfg, num_registers=16)),
    ]
    rows = []
    for name, c in variants:
        fc = flop_count(c)
        rows.append((name, fc.total, fc.overhead_vs(base)))
    return rows
