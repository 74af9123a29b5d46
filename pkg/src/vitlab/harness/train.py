"""Training, evaluation, diagnosis, gradient checking and ablation runs."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as tn
from ..anf import ANFConfig
from ..checkpoint import load_checkpoint, save_checkpoint
from ..diagnostics import build_report, export_report
from ..errors import BudgetExceeded, CheckpointError, NonFiniteResult
from ..flops import flop_count, overhead_table, vitb16
from ..model import VisionTransformer, ViTConfig
from ..tensor import RngStream, Tape, Tensor
from .config import ExperimentConfig, ablation_grid, config_to_dict, dump_config, with_seed
from .data import ArrayDataset, load_splits

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "split", "loss", "accuracy", "token_norm_mean", "token_norm_max", "wall_time")

_BATCH_TAG = 0xBA7C
_STA_TAG = 0x57A


@dataclass
class MetricsLog:
    """Append-only metric records; one JSON object per line, fixed field order."""

    path: Path | None = None
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        last = [r["step"] for r in self.records if r["split"] == record["split"]]
        if last and record["step"] <= last[-1]:
            raise ValueError(f"step {record['step']} not after {last[-1]} for split {record['split']}")
        row = {k: record[k] for k in METRIC_FIELDS}
        self.records.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def strip_wall_time(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def _batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.argsort(RngStream(seed).derive(_BATCH_TAG, epoch).uniform(n), kind="stable")


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Dataset indices of mini-batch ``step``: a fresh permutation per epoch."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    return _batch_order(seed, epoch, n)[pos * batch_size : (pos + 1) * batch_size]


def learning_rate(cfg: ExperimentConfig, step: int) -> float:
    """Linear warm-up then cosine decay to zero."""
    opt = cfg.optimizer
    if opt.warmup_steps and step < opt.warmup_steps:
        return opt.lr * (step + 1) / opt.warmup_steps
    span = max(opt.steps - opt.warmup_steps, 1)
    progress = min((step - opt.warmup_steps) / span, 1.0)
    return opt.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class SGD:
    """Mini-batch gradient descent with heavy-ball momentum, global-norm gradient
    clipping, and L2 weight decay on matrices."""

    def __init__(self, params: dict[str, Tensor], momentum: float, weight_decay: float, clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip = clip
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        names = sorted(self.params)
        norm = float(np.sqrt(sum(float((self.params[n].grad ** 2).sum()) for n in names)))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        for name in names:
            p = self.params[name]
            g = p.grad * scale
            if self.weight_decay and p.data.ndim >= 2:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v
            p.grad = None
            if not np.isfinite(p.data).all():
                raise NonFiniteResult(f"parameter {name} became non-finite")
        return norm


def _patch_norm_summary(trace, num_special: int) -> tuple[float, float]:
    final = trace.states[-1][..., num_special:, :]
    norms = np.sqrt((final ** 2).sum(axis=-1))
    return float(norms.mean()), float(norms.max())


def evaluate_arrays(model: VisionTransformer, data: ArrayDataset, chunk: int = 256) -> dict:
    """Loss, accuracy and final-layer patch-norm summary in inference mode."""
    total_loss, correct, means, maxes = 0.0, 0, [], []
    for start in range(0, len(data), chunk):
        x = data.images[start : start + chunk]
        y = data.labels[start : start + chunk]
        logits, trace = model.forward(x, training=False)
        total_loss += tn.cross_entropy(logits, y).item() * len(y)
        correct += int((logits.data.argmax(axis=-1) == y).sum())
        m, mx = _patch_norm_summary(trace, model.cfg.num_special)
        means.append(m * len(y))
        maxes.append(mx)
    n = len(data)
    return {
        "loss": total_loss / n,
        "accuracy": correct / n,
        "token_norm_mean": sum(means) / n,
        "token_norm_max": max(maxes),
    }


def checkpoint_meta(cfg: ExperimentConfig, step: int) -> dict:
    return {"config": config_to_dict(cfg), "step": step}


@dataclass
class TrainResult:
    model: VisionTransformer
    metrics: MetricsLog
    checkpoint: Path
    final_test: dict | None


def train(cfg: ExperimentConfig, out_dir=None) -> TrainResult:
    """Train ``cfg`` from its seed; writes ``model.ckpt``, ``metrics.jsonl`` and
    ``config.yaml`` into the output directory."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    metrics = MetricsLog(metrics_path)

    train_set, test_set = load_splits(cfg.data, cfg.seed)
    model = VisionTransformer(cfg.model)
    opt = SGD(model.params, cfg.optimizer.momentum, cfg.optimizer.weight_decay, cfg.optimizer.grad_clip)
    steps, bs = cfg.optimizer.steps, cfg.optimizer.batch_size
    start = time.perf_counter()
    window_loss, window_correct, window_count = 0.0, 0, 0
    final_test = None

    for step in range(steps):
        idx = batch_indices(cfg.seed, step, bs, len(train_set))
        x, y = train_set.images[idx], train_set.labels[idx]
        sta_rng = RngStream(cfg.seed).derive(_STA_TAG, step)
        with Tape() as tape:
            logits, trace = model.forward(x, training=True, rng=sta_rng, keys=idx)
            loss = tn.cross_entropy(logits, y)
        if not np.isfinite(loss.item()):
            raise NonFiniteResult(f"loss diverged at step {step}")
        tape.backward(loss)
        opt.step(learning_rate(cfg, step))

        window_loss += loss.item() * len(y)
        window_correct += int((logits.data.argmax(axis=-1) == y).sum())
        window_count += len(y)
        done = step + 1
        elapsed = time.perf_counter() - start
        if done % cfg.eval_every == 0 or done == steps:
            m, mx = _patch_norm_summary(trace, cfg.model.num_special)
            metrics.append(
                step=done, split="train", loss=window_loss / window_count,
                accuracy=window_correct / window_count, token_norm_mean=m,
                token_norm_max=mx, wall_time=elapsed,
            )
            window_loss, window_correct, window_count = 0.0, 0, 0
            final_test = evaluate_arrays(model, test_set)
            metrics.append(step=done, split="test", wall_time=time.perf_counter() - start, **final_test)
            log.info("%s step %d test acc %.4f", cfg.name, done, final_test["accuracy"])
        if elapsed > cfg.wall_time_budget:
            raise BudgetExceeded(f"{cfg.name}: {elapsed:.1f}s exceeds budget {cfg.wall_time_budget}s")

    ckpt = save_checkpoint(out / "model.ckpt", model.params, checkpoint_meta(cfg, steps))
    return TrainResult(model, metrics, ckpt, final_test)


def load_model(cfg: ExperimentConfig, ckpt_path) -> VisionTransformer:
    params, _ = load_checkpoint(ckpt_path)
    expected = VisionTransformer(cfg.model).params
    if set(params) != set(expected):
        missing = sorted(set(expected) ^ set(params))
        raise CheckpointError(f"checkpoint does not match config; differing tensors {missing[:5]}")
    for name, arr in params.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape}, config expects {expected[name].shape}")
    return VisionTransformer(cfg.model, {k: Tensor(v, requires_grad=True) for k, v in params.items()})


def evaluate(cfg: ExperimentConfig, ckpt_path) -> dict:
    model = load_model(cfg, ckpt_path)
    _, test_set = load_splits(cfg.data, cfg.seed)
    return evaluate_arrays(model, test_set)


def diagnose(cfg: ExperimentConfig, ckpt_path, out_dir, count: int = 4, **report_kw) -> list[Path]:
    """Artifact reports for the first ``count`` test images, one directory each."""
    model = load_model(cfg, ckpt_path)
    _, test_set = load_splits(cfg.data, cfg.seed)
    dirs = []
    for i in range(min(count, len(test_set))):
        _, trace = model.forward(test_set.images[i], training=False)
        report = build_report(trace, config=config_to_dict(cfg), seed=cfg.seed, **report_kw)
        d = Path(out_dir) / f"image_{i:04d}"
        export_report(report, d)
        dirs.append(d)
    return dirs


# gradient checking

TINY = ViTConfig(
    image_h=8, image_w=8, channels=1, patch_size=4, embed_dim=8, num_heads=2,
    num_blocks=2, mlp_ratio=2.0, num_classes=3, anf=ANFConfig(placement="all"), seed=7,
)


def perturbed_params(model: VisionTransformer, seed: int = 1, scale: float = 0.3) -> VisionTransformer:
    """Copy of ``model`` with every parameter jittered, so the check does not
    sit at the special initial point (zero gates, centre-tap kernels)."""
    rng = RngStream(seed)
    params = {}
    for name in sorted(model.params):
        p = model.params[name].data
        params[name] = Tensor(p + scale * rng.normal(p.size).reshape(p.shape), requires_grad=True)
    return VisionTransformer(model.cfg, params)


def param_gradcheck(model: VisionTransformer, images, labels, name: str, h: float = 1e-5) -> float:
    def loss_of(w: Tensor) -> Tensor:
        saved = model.params[name]
        model.params[name] = w
        try:
            logits, _ = model.forward(images, training=False)
            return tn.cross_entropy(logits, labels)
        finally:
            model.params[name] = saved

    return tn.gradcheck(loss_of, model.params[name], h=h)


def gradcheck_model(cfg: ViTConfig = TINY, batch: int = 2, h: float = 1e-5) -> dict[str, float]:
    model = perturbed_params(VisionTransformer(cfg))
    rng = RngStream(cfg.seed).derive(0x6C)
    images = rng.uniform(batch * cfg.image_h * cfg.image_w * cfg.channels).reshape(
        batch, cfg.image_h, cfg.image_w, cfg.channels
    )
    labels = np.arange(batch) % cfg.num_classes
    return {name: param_gradcheck(model, images, labels, name, h) for name in sorted(model.params)}


PRESETS = {"tiny": TINY}


def bench_rows(preset: str = "vitb16") -> list[tuple[str, int, float]]:
    if preset == "vitb16":
        return overhead_table(vitb16())
    if preset == "vitb14":
        return overhead_table(vitb16(patch_size=14))
    raise KeyError(preset)


# ablation

def ablate(cfg: ExperimentConfig, seeds=None) -> dict:
    """Run {baseline, sta, anf, sta_anf} for each seed with one shared recipe."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    results: dict[str, list[float]] = {}
    for seed in seeds:
        seeded = with_seed(cfg, seed)
        for name, variant in ablation_grid(seeded).items():
            out = Path(variant.output_dir) / f"seed_{seed}"
            res = train(variant, out)
            results.setdefault(name, []).append(res.final_test["accuracy"] if res.final_test else float("nan"))
    summary = {
        "seeds": seeds,
        "accuracy": results,
        "mean_accuracy": {k: float(np.mean(v)) for k, v in results.items()},
    }
    means = summary["mean_accuracy"]
    summary["combined_ge_baseline_minus_half_point"] = means["sta_anf"] >= means["baseline"] - 0.005
    summary["combined_ge_best_single"] = means["sta_anf"] >= max(means["sta"], means["anf"])
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "ablation.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def flops_for(cfg: ExperimentConfig) -> dict[str, int]:
    return flop_count(cfg.model).components
