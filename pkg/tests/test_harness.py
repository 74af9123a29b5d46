import gzip
import json
import struct
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from vitlab.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from vitlab.errors import (
    BadMagic,
    CheckpointError,
    ConfigError,
    CountMismatch,
    NonFiniteResult,
    ParseError,
    Truncated,
    UnknownKey,
)
from vitlab.harness import cli
from vitlab.harness.config import (
    ExperimentConfig,
    ablation_grid,
    config_to_dict,
    dump_config,
    load_config,
    parse_config,
    with_seed,
)
from vitlab.harness.data import SyntheticDataset, read_idx, write_idx_images, write_idx_labels
from vitlab.harness.train import (
    METRIC_FIELDS,
    SGD,
    MetricsLog,
    batch_indices,
    evaluate,
    learning_rate,
    train,
)
from vitlab.model import VisionTransformer
from vitlab.tensor import Tensor

SMALL_RUN = {
    "name": "small",
    "eval_every": 5,
    "model": {"patch_size": 4, "embed_dim": 8, "num_heads": 2, "num_blocks": 1, "mlp_ratio": 2.0,
              "sta": {"tau": 0.05}, "anf": {"placement": "all"}},
    "optimizer": {"steps": 10, "batch_size": 8, "warmup_steps": 2},
    "data": {"image_h": 8, "image_w": 8, "train_size": 32, "test_size": 16, "num_classes": 3},
}


def write_cfg(tmp_path, raw, name="cfg.yaml"):
    raw = dict(raw)
    raw.setdefault("output_dir", str(tmp_path / "run"))
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


# config

def test_minimal_config_fills_defaults(tmp_path):
    cfg = load_config(write_cfg(tmp_path, {}))
    assert cfg == replace(ExperimentConfig(), output_dir=str(tmp_path / "run"))


def test_echo_round_trips(tmp_path):
    cfg = load_config(write_cfg(tmp_path, SMALL_RUN))
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg


def test_high_tau_parses(tmp_path):
    cfg = load_config(write_cfg(tmp_path, {"model": {"sta": {"tau": 0.3}}}))
    assert cfg.model.sta.tau == 0.3
    assert cfg.model.sta.alpha == 0.1


@pytest.mark.parametrize(
    "raw,key",
    [
        ({"optimizer": {"lr": -0.1}}, "optimizer.lr"),
        ({"optimizer": {"steps": 1.5}}, "optimizer.steps"),
        ({"model": {"anf": {"kernel_size": 4}}}, "model.anf.kernel_size"),
        ({"model": {"sta": {"alpha": -1}}}, "model.sta.alpha"),
        ({"model": {"image_h": 16}, "data": {"image_h": 32}}, "model.image_h"),
        ({"model": {"embed_dim": 10, "num_heads": 4}}, "model"),
        ({"data": {"source": "idx"}}, "data.train_images"),
    ],
)
def test_parse_errors_name_key(raw, key):
    with pytest.raises(ParseError) as info:
        parse_config(raw)
    assert info.value.key == key


@pytest.mark.parametrize("raw,key", [({"learning_rate": 1}, "learning_rate"),
                                     ({"model": {"sta": {"beta": 1}}}, "model.sta.beta")])
def test_unknown_keys(raw, key):
    with pytest.raises(UnknownKey) as info:
        parse_config(raw)
    assert key in str(info.value)


def test_ablation_grid_differs_only_in_toggles(tmp_path):
    cfg = load_config(write_cfg(tmp_path, SMALL_RUN))
    grid = ablation_grid(cfg)
    assert list(grid) == ["baseline", "sta", "anf", "sta_anf"]
    assert grid["baseline"].model.sta is None and grid["baseline"].model.anf is None
    assert grid["sta_anf"].model.sta == cfg.model.sta and grid["sta_anf"].model.anf == cfg.model.anf
    echoes = []
    for name, c in grid.items():
        d = config_to_dict(c)
        d["model"].pop("sta", None)
        d["model"].pop("anf", None)
        d.pop("output_dir")
        d.pop("name")
        echoes.append(d)
    assert all(e == echoes[0] for e in echoes)


# data

def test_synthetic_is_deterministic_and_balanced():
    ds = SyntheticDataset(seed=3)
    a, la = ds.sample(17)
    b, lb = ds.sample(17)
    assert a.tobytes() == b.tobytes() and la == lb
    labels = ds.arrays(0, 40).labels
    assert np.bincount(labels).tolist() == [10, 10, 10, 10]
    assert not np.array_equal(ds.sample(18)[0], a)
    assert a.min() >= 0 and a.max() <= 1


def test_synthetic_is_background_heavy():
    from vitlab.model import patchify
    from vitlab.sta import patch_variance

    ds = SyntheticDataset(seed=0)
    frac = np.mean([
        (patch_variance(patchify(ds.sample(i)[0], 8)).data < 0.1).mean() for i in range(20)
    ])
    assert frac > 0.5


def crafted_pair(tmp_path, n_labels=2, truncate=0, magic=0x803):
    pixels = bytes(range(32))
    img = struct.pack(">IIII", magic, 2, 4, 4) + pixels
    lab = struct.pack(">II", 0x801, n_labels) + bytes([3, 7, 1][:n_labels])
    (tmp_path / "img").write_bytes(img[: len(img) - truncate])
    (tmp_path / "lab").write_bytes(lab)
    return tmp_path / "img", tmp_path / "lab"


def test_idx_crafted_file(tmp_path):
    ds = read_idx(*crafted_pair(tmp_path))
    assert ds.images.shape == (2, 4, 4, 1)
    assert ds.images[0, 0, 0, 0] == 0.0
    assert ds.images[1, 3, 3, 0] == 31 / 255
    assert ds.images[0, 1, 2, 0] == 6 / 255
    assert ds.labels.tolist() == [3, 7]


def test_idx_gzip(tmp_path):
    img, lab = crafted_pair(tmp_path)
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert np.array_equal(read_idx(gz, lab).images, read_idx(img, lab).images)


def test_idx_count_mismatch(tmp_path):
    with pytest.raises(CountMismatch):
        read_idx(*crafted_pair(tmp_path, n_labels=3))


def test_idx_truncated(tmp_path):
    with pytest.raises(Truncated):
        read_idx(*crafted_pair(tmp_path, truncate=1))


def test_idx_bad_magic(tmp_path):
    with pytest.raises(BadMagic):
        read_idx(*crafted_pair(tmp_path, magic=0x801))


def test_idx_writer_round_trip(tmp_path):
    pix = np.random.default_rng(0).integers(0, 256, (3, 5, 6))
    write_idx_images(tmp_path / "i", pix)
    write_idx_labels(tmp_path / "l", [0, 1, 2])
    ds = read_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(np.rint(ds.images[..., 0] * 255), pix)


def test_idx_config_resolves_relative_paths(tmp_path):
    pix = np.random.default_rng(0).integers(0, 256, (20, 8, 8))
    write_idx_images(tmp_path / "tr-img", pix)
    write_idx_labels(tmp_path / "tr-lab", np.arange(20) % 3)
    raw = dict(SMALL_RUN)
    raw["data"] = {"source": "idx", "image_h": 8, "image_w": 8, "num_classes": 3,
                   "train_images": "tr-img", "train_labels": "tr-lab",
                   "test_images": "tr-img", "test_labels": "tr-lab"}
    cfg = load_config(write_cfg(tmp_path, raw))
    assert Path(cfg.data.train_images).is_absolute()
    res = train(cfg)
    assert res.final_test is not None


# training pieces

def test_batches_cover_epoch():
    seen = np.concatenate([batch_indices(0, s, 8, 32) for s in range(4)])
    assert sorted(seen.tolist()) == list(range(32))
    assert not np.array_equal(batch_indices(0, 0, 8, 32), batch_indices(0, 4, 8, 32))


def test_schedule():
    cfg = ExperimentConfig()
    lrs = [learning_rate(cfg, s) for s in range(cfg.optimizer.steps)]
    assert lrs[0] == pytest.approx(cfg.optimizer.lr / cfg.optimizer.warmup_steps)
    assert max(lrs) == pytest.approx(cfg.optimizer.lr)
    assert lrs[-1] < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sgd_clips_and_detects_divergence():
    p = Tensor(np.ones(4), requires_grad=True)
    p.grad = np.full(4, 10.0)
    opt = SGD({"w": p}, momentum=0.0, weight_decay=0.0, clip=1.0)
    assert opt.step(1.0) == pytest.approx(20.0)
    assert np.allclose(p.data, 1 - 0.5)
    p.grad = np.full(4, 1e308)
    with pytest.raises(NonFiniteResult):
        SGD({"w": p}, 0.0, 0.0, 0.0).step(1e10)


def test_metrics_log_is_monotone(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    row = dict(loss=1.0, accuracy=0.5, token_norm_mean=1.0, token_norm_max=2.0, wall_time=0.1)
    log.append(step=1, split="train", **row)
    log.append(step=1, split="test", **row)
    with pytest.raises(ValueError):
        log.append(step=1, split="train", **row)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert list(json.loads(lines[0])) == list(METRIC_FIELDS)


def test_zero_steps_checkpoint_is_initialization(tmp_path):
    raw = dict(SMALL_RUN, optimizer={"steps": 0})
    cfg = load_config(write_cfg(tmp_path, raw))
    res = train(cfg)
    assert (Path(cfg.output_dir) / "metrics.jsonl").read_text() == ""
    params, meta = load_checkpoint(res.checkpoint)
    init = VisionTransformer(cfg.model).params
    assert set(params) == set(init)
    for k, v in init.items():
        assert params[k].astype(np.float32).tobytes() == v.data.astype(np.float32).tobytes()
    assert meta["step"] == 0


def test_training_is_repeatable_and_evaluates(tmp_path):
    cfg = load_config(write_cfg(tmp_path, SMALL_RUN))
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
    rec_a = [{k: v for k, v in r.items() if k != "wall_time"} for r in a.metrics.records]
    rec_b = [{k: v for k, v in r.items() if k != "wall_time"} for r in b.metrics.records]
    assert rec_a == rec_b and len(rec_a) == 4
    assert all(np.isfinite(r["loss"]) for r in rec_a)
    ev = evaluate(cfg, a.checkpoint)
    assert set(ev) == {"loss", "accuracy", "token_norm_mean", "token_norm_max"}


def test_seed_changes_run(tmp_path):
    cfg = load_config(write_cfg(tmp_path, SMALL_RUN))
    a = train(cfg, tmp_path / "a")
    b = train(with_seed(cfg, 1), tmp_path / "b")
    assert a.metrics.records[0]["loss"] != b.metrics.records[0]["loss"]


# checkpoint

@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text("abc.", min_size=1, max_size=6),
                       st.lists(st.integers(1, 4), min_size=1, max_size=3), min_size=1, max_size=4),
       st.integers(0, 2**31))
def test_checkpoint_byte_round_trip(shapes, seed):
    rng = np.random.default_rng(seed)
    params = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    blob = encode(params, {"step": 3})
    back, meta = decode(blob)
    assert meta == {"step": 3}
    assert encode(back, meta) == blob
    for k, v in params.items():
        assert back[k].astype(np.float32).tobytes() == v.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(CheckpointError):
        decode(b"hello\n")
    blob = encode({"w": np.ones(4)})
    with pytest.raises(CheckpointError):
        decode(blob[:-2])


def test_checkpoint_layout(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", {"b": np.ones(2), "a": np.zeros((1, 3))}, {"x": 1})
    raw = path.read_bytes()
    first, rest = raw.split(b"\n", 1)
    magic, version, hlen = first.split(b" ")
    header = json.loads(rest[: int(hlen)])
    assert [t["name"] for t in header["tensors"]] == ["a", "b"]
    assert header["tensors"][1]["offset"] == 12
    assert rest[int(hlen):] == np.zeros(3, "<f4").tobytes() + np.ones(2, "<f4").tobytes()


# command line

def run_cli(*args):
    return cli.main(list(args))


def test_cli_config_error_exit_2(tmp_path, capsys):
    bad = write_cfg(tmp_path, {"optimizer": {"lr": -1}})
    assert run_cli("train", "--config", str(bad)) == 2
    assert "optimizer.lr" in capsys.readouterr().err
    assert run_cli("train", "--config", str(tmp_path / "missing.yaml")) == 2


def test_cli_io_error_exit_4(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN)
    assert run_cli("eval", "--config", str(cfg), "--ckpt", str(tmp_path / "nope.ckpt")) == 4
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    assert run_cli("eval", "--config", str(cfg), "--ckpt", str(tmp_path / "bad.ckpt")) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numeric_failure_exit_3(tmp_path):
    raw = dict(SMALL_RUN, optimizer={"steps": 10, "lr": 1e200, "warmup_steps": 0, "grad_clip": 0.0,
                                     "batch_size": 8})
    assert run_cli("train", "--config", str(write_cfg(tmp_path, raw))) == 3


def test_cli_budget_exit_3(tmp_path):
    raw = dict(SMALL_RUN, wall_time_budget=1e-9)
    assert run_cli("train", "--config", str(write_cfg(tmp_path, raw))) == 3


def test_cli_train_eval_diagnose(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL_RUN)
    assert run_cli("train", "--config", str(cfg)) == 0
    ckpt = tmp_path / "run" / "model.ckpt"
    assert ckpt.exists()
    capsys.readouterr()
    assert run_cli("eval", "--config", str(cfg), "--ckpt", str(ckpt)) == 0
    assert "accuracy" in json.loads(capsys.readouterr().out)
    out = tmp_path / "diag"
    assert run_cli("diagnose", "--config", str(cfg), "--ckpt", str(ckpt), "--out", str(out), "--images", "2") == 0
    assert sorted(p.name for p in out.iterdir()) == ["image_0000", "image_0001"]
    assert (out / "image_0000" / "redundancy_embed.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")


def test_cli_eval_mismatched_checkpoint(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN)
    assert run_cli("train", "--config", str(cfg)) == 0
    other = write_cfg(tmp_path, dict(SMALL_RUN, model={**SMALL_RUN["model"], "embed_dim": 4}), "o.yaml")
    assert run_cli("eval", "--config", str(other), "--ckpt", str(tmp_path / "run" / "model.ckpt")) == 4


def test_cli_bench(capsys):
    assert run_cli("bench", "--preset", "vitb16") == 0
    out = capsys.readouterr().out
    assert "anf_all_k3" in out and "registers_16" in out


def test_cli_gradcheck(capsys):
    assert run_cli("gradcheck", "--preset", "tiny") == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_gradcheck_fails_with_bad_step(capsys):
    # a huge finite-difference step makes the comparison fail, which must map to exit 3
    assert run_cli("gradcheck", "--preset", "tiny", "--h", "0.5") == 3


def test_cli_ablate(tmp_path, capsys):
    raw = dict(SMALL_RUN, optimizer={"steps": 2, "batch_size": 8, "warmup_steps": 0})
    assert run_cli("ablate", "--config", str(write_cfg(tmp_path, raw)), "--seeds", "0,1") == 0
    summary = json.loads((tmp_path / "run" / "ablation.json").read_text())
    assert set(summary["accuracy"]) == {"baseline", "sta", "anf", "sta_anf"}
    assert all(len(v) == 2 for v in summary["accuracy"].values())


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vitlab.harness.cli", "bench"], capture_output=True, text=True)
    assert proc.returncode == 0 and "baseline" in proc.stdout


def test_config_error_is_config_error():
    assert issubclass(ParseError, ConfigError) and issubclass(UnknownKey, ConfigError)
