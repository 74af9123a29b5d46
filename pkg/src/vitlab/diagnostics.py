"""Artifact diagnostics over forward traces: token norms, high-norm detection,
neighbour cosine redundancy, and deterministic CSV / PGM / summary exports."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadThreshold, DegenerateTokenWarning, IoFailure, ShapeMismatch
from .model import TokenSequence, Trace

DEFAULT_ABSOLUTE_THRESHOLD = 150.0
DEFAULT_PERCENTILE = 98.0


def token_norms(trace: Trace | list[np.ndarray]) -> np.ndarray:
    """Euclidean norm of every token at every traced layer, ``[L, Ntok]``."""
    states = trace.states if isinstance(trace, Trace) else trace
    return np.stack([np.sqrt((np.asarray(s) ** 2).sum(axis=-1)) for s in states])


def percentile_value(values: np.ndarray, p: float) -> float:
    """Linear-interpolated p-th percentile (numpy's default method)."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), p))


def high_norm_detect(norms, mode: str = "percentile", value: float | None = None) -> np.ndarray:
    """Indices of tokens whose norm is strictly above the threshold.

    ``mode="absolute"`` compares against ``value`` directly (default 150);
    ``mode="percentile"`` compares against the ``value``-th percentile of
    ``norms`` (default 98).
    """
    norms = np.asarray(norms, dtype=np.float64)
    if mode == "absolute":
        th = DEFAULT_ABSOLUTE_THRESHOLD if value is None else float(value)
        if not th > 0:
            raise BadThreshold(f"absolute threshold must be > 0, got {th}")
    elif mode == "percentile":
        p = DEFAULT_PERCENTILE if value is None else float(value)
        if not 0 < p < 100:
            raise BadThreshold(f"percentile must lie in (0, 100), got {p}")
        th = percentile_value(norms, p)
    else:
        raise BadThreshold(f"unknown detection mode {mode!r}")
    return np.flatnonzero(norms > th)


def grid_neighbors(grid_h: int, grid_w: int, neighborhood: int = 4) -> list[list[int]]:
    if neighborhood == 4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    elif neighborhood == 8:
        offsets = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    else:
        raise ValueError("neighborhood must be 4 or 8")
    out = []
    for r in range(grid_h):
        for c in range(grid_w):
            out.append(
                [
                    (r + dr) * grid_w + (c + dc)
                    for dr, dc in offsets
                    if 0 <= r + dr < grid_h and 0 <= c + dc < grid_w
                ]
            )
    return out


def neighbor_cosine_redundancy(
    seq: TokenSequence | np.ndarray,
    grid_h: int | None = None,
    grid_w: int | None = None,
    neighborhood: int = 4,
) -> np.ndarray:
    """Mean cosine similarity of each patch token with its grid neighbours.

    Accepts a single-image :class:`TokenSequence` or a bare ``[N, D]`` patch
    array with explicit grid extents. Pairs involving a zero vector count as
    similarity 0 and trigger a :class:`DegenerateTokenWarning`.
    """
    if isinstance(seq, TokenSequence):
        patches = seq.patch_tokens()
        grid_h, grid_w = seq.grid_h, seq.grid_w
    else:
        patches = np.asarray(seq, dtype=np.float64)
    if patches.ndim != 2 or grid_h is None or patches.shape[0] != grid_h * grid_w:
        raise ShapeMismatch(f"patch tokens {patches.shape} do not match grid {grid_h}x{grid_w}")
    norms = np.sqrt((patches ** 2).sum(axis=-1))
    degenerate = norms == 0
    if degenerate.any():
        warnings.warn(
            f"zero-norm patch tokens at {np.flatnonzero(degenerate).tolist()}; similarity set to 0",
            DegenerateTokenWarning,
            stacklevel=2,
        )
    unit = np.zeros_like(patches)
    unit[~degenerate] = patches[~degenerate] / norms[~degenerate, None]
    out = np.zeros(patches.shape[0])
    for i, nbrs in enumerate(grid_neighbors(grid_h, grid_w, neighborhood)):
        if nbrs:
            sims = unit[nbrs] @ unit[i]
            out[i] = np.clip(sims, -1.0, 1.0).mean()
    return out


# reports

@dataclass
class ArtifactReport:
    layer_labels: list[str]
    norms: np.ndarray  # [L, Ntok]
    high_norm_indices: list[list[int]]
    redundancy: dict[str, np.ndarray]
    grid_h: int
    grid_w: int
    selected_layers: list[int]
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    detection: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if (self.norms < 0).any():
            raise ValueError("norms must be nonnegative")
        n = self.norms.shape[1]
        if any(i < 0 or i >= n for idx in self.high_norm_indices for i in idx):
            raise ValueError("high-norm index out of range")


def norm_histogram(values: np.ndarray, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return edges, counts.astype(np.int64)


def build_report(
    trace: Trace,
    selected_layers: list[int] | None = None,
    redundancy_layers: list[int] | None = None,
    mode: str = "percentile",
    value: float | None = None,
    bins: int = 20,
    neighborhood: int = 4,
    config: dict | None = None,
    seed: int = 0,
) -> ArtifactReport:
    """Assemble the diagnostics for one image's trace.

    ``selected_layers`` feed the norm histogram (default: last layer) and
    ``redundancy_layers`` get a redundancy map (default: the embedding output).
    """
    norms = token_norms(trace)
    last = norms.shape[0] - 1
    selected = [last] if selected_layers is None else list(selected_layers)
    red_layers = [0] if redundancy_layers is None else list(redundancy_layers)
    high = [high_norm_detect(row, mode, value).tolist() for row in norms]
    start = 1 + trace.num_registers
    redundancy = {
        trace.labels[i]: neighbor_cosine_redundancy(
            trace.states[i][start:], trace.grid_h, trace.grid_w, neighborhood
        )
        for i in red_layers
    }
    edges, counts = norm_histogram(norms[selected] if selected else np.zeros(0), bins)
    return ArtifactReport(
        layer_labels=list(trace.labels),
        norms=norms,
        high_norm_indices=high,
        redundancy=redundancy,
        grid_h=trace.grid_h,
        grid_w=trace.grid_w,
        selected_layers=selected,
        hist_edges=edges,
        hist_counts=counts,
        detection={"mode": mode, "value": value, "neighborhood": neighborhood},
        config=config or {},
        seed=seed,
    )


# exports

def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def redundancy_to_gray(values: np.ndarray, scale: str = "unit") -> np.ndarray:
    """Map similarities to 8-bit gray levels.

    ``"unit"`` maps [0, 1] linearly onto [0, 255] and clamps negatives to 0;
    ``"signed"`` maps the full [-1, 1] range onto [0, 255].
    """
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    if scale == "unit":
        levels = np.clip(v, 0.0, 1.0) * 255.0
    elif scale == "signed":
        levels = (v + 1.0) * 127.5
    else:
        raise ValueError(f"unknown scale {scale!r}")
    return round_half_away(levels).astype(np.uint8)


def pgm_bytes(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def histogram_csv(report: ArtifactReport) -> str:
    lines = ["bin_lo,bin_hi,count"]
    for lo, hi, c in zip(report.hist_edges[:-1], report.hist_edges[1:], report.hist_counts):
        lines.append(f"{float(lo)!r},{float(hi)!r},{int(c)}")
    return "\n".join(lines) + "\n"


def summary_text(report: ArtifactReport) -> str:
    norms = report.norms
    payload = {
        "config": report.config,
        "detection": report.detection,
        "grid": [report.grid_h, report.grid_w],
        "high_norm_indices": dict(zip(report.layer_labels, report.high_norm_indices)),
        "layers": report.layer_labels,
        "norm_max": dict(zip(report.layer_labels, [float(x) for x in norms.max(axis=1)])),
        "norm_mean": dict(zip(report.layer_labels, [float(x) for x in norms.mean(axis=1)])),
        "redundancy_mean": {k: float(v.mean()) for k, v in report.redundancy.items()},
        "seed": report.seed,
        "selected_layers": report.selected_layers,
        "token_count": int(norms[report.selected_layers].size) if report.selected_layers else 0,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def export_report(report: ArtifactReport, out_dir, scale: str = "unit") -> dict[str, Path]:
    """Write ``histogram.csv``, ``redundancy_<layer>.pgm`` and ``summary.json``."""
    out = Path(out_dir)
    files = {"histogram": (out / "histogram.csv", histogram_csv(report).encode())}
    for label, values in report.redundancy.items():
        gray = redundancy_to_gray(values.reshape(report.grid_h, report.grid_w), scale)
        files[f"redundancy_{label}"] = (out / f"redundancy_{label}.pgm", pgm_bytes(gray))
    files["summary"] = (out / "summary.json", summary_text(report).encode())
    try:
        os.makedirs(out, exist_ok=True)
        for path, blob in files.values():
            path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return {k: p for k, (p, _) in files.items()}
