import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from fixtures import GOLDEN, fixed_report, fixed_trace
from vitlab.diagnostics import (
    ArtifactReport,
    build_report,
    export_report,
    grid_neighbors,
    high_norm_detect,
    histogram_csv,
    neighbor_cosine_redundancy,
    norm_histogram,
    pgm_bytes,
    redundancy_to_gray,
    round_half_away,
    token_norms,
)
from vitlab.errors import BadThreshold, DegenerateTokenWarning, IoFailure, ShapeMismatch
from vitlab.model import TokenSequence, VisionTransformer, ViTConfig
from vitlab.tensor import Tensor

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_norm_examples():
    tok = np.zeros((2, 5))
    tok[1, 3] = 7.0
    assert token_norms([tok]).tolist() == [[0.0, 7.0]]


def test_norms_match_sum_of_squares():
    rng = np.random.default_rng(0)
    states = [rng.standard_normal((6, 9)) for _ in range(3)]
    got = token_norms(states)
    for layer, s in enumerate(states):
        for i, row in enumerate(s):
            assert abs(got[layer, i] - sum(x * x for x in row) ** 0.5) < 1e-12


def test_absolute_example():
    assert high_norm_detect([100.0, 160.0], "absolute", 150).tolist() == [1]
    assert high_norm_detect([100.0, 160.0], "absolute").tolist() == [1]
    assert high_norm_detect([10.0, 20.0], "absolute", 150).tolist() == []


def test_threshold_is_strict():
    assert high_norm_detect([150.0], "absolute", 150).tolist() == []


@pytest.mark.parametrize("mode,value", [("absolute", 0), ("absolute", -1), ("percentile", 0),
                                        ("percentile", 100), ("percentile", 150), ("median", 5)])
def test_bad_thresholds(mode, value):
    with pytest.raises(BadThreshold):
        high_norm_detect([1.0, 2.0], mode, value)


@given(hnp.arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 500)), st.floats(1, 99))
def test_percentile_matches_sort_oracle(norms, p):
    got = high_norm_detect(norms, "percentile", p).tolist()
    assert got == oracles.above_percentile(norms.tolist(), p)


@given(hnp.arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 500)),
       st.floats(0.01, 400), st.floats(0.01, 400))
def test_absolute_monotone_and_partition(norms, a, b):
    lo, hi = sorted((a, b))
    at_lo = set(high_norm_detect(norms, "absolute", lo).tolist())
    at_hi = set(high_norm_detect(norms, "absolute", hi).tolist())
    assert at_hi <= at_lo
    below = {i for i, v in enumerate(norms) if v <= lo}
    assert at_lo.isdisjoint(below) and at_lo | below == set(range(len(norms)))


@given(hnp.arrays(np.float64, st.integers(2, 60), elements=st.floats(0, 500)),
       st.floats(1, 99), st.floats(1, 99))
def test_percentile_monotone(norms, a, b):
    lo, hi = sorted((a, b))
    assert set(high_norm_detect(norms, "percentile", hi).tolist()) <= set(
        high_norm_detect(norms, "percentile", lo).tolist()
    )


def test_neighbors():
    assert grid_neighbors(2, 2) == [[2, 1], [3, 0], [0, 3], [1, 2]]
    assert [len(n) for n in grid_neighbors(3, 3, 8)] == [3, 5, 3, 5, 8, 5, 3, 5, 3]
    with pytest.raises(ValueError):
        grid_neighbors(2, 2, 6)


def test_identical_tokens_fully_redundant():
    out = neighbor_cosine_redundancy(np.tile([1.0, -2.0, 0.5], (6, 1)), 2, 3)
    assert np.allclose(out, 1.0, rtol=0, atol=1e-15)


def test_orthogonal_neighbours_zero():
    out = neighbor_cosine_redundancy(np.eye(4), 2, 2)
    assert np.all(out == 0.0)


def test_zero_token_warns():
    tok = np.ones((4, 3))
    tok[0] = 0
    with pytest.warns(DegenerateTokenWarning):
        out = neighbor_cosine_redundancy(tok, 2, 2)
    assert out[0] == 0.0
    assert out[3] == 1.0


def test_redundancy_shape_error():
    with pytest.raises(ShapeMismatch):
        neighbor_cosine_redundancy(np.ones((5, 3)), 2, 2)


def test_redundancy_accepts_token_sequence():
    cfg = ViTConfig(image_h=16, image_w=16, patch_size=4, embed_dim=8, num_heads=2, num_blocks=1, num_registers=2)
    model = VisionTransformer(cfg)
    _, trace = model.forward(np.random.default_rng(0).random((16, 16, 1)))
    seq = TokenSequence(Tensor(trace.states[0]), 2, 4, 4)
    direct = neighbor_cosine_redundancy(trace.states[0][3:], 4, 4)
    assert np.array_equal(neighbor_cosine_redundancy(seq), direct)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_redundancy_matches_pairwise_oracle(gh, gw, seed):
    tok = np.random.default_rng(seed).standard_normal((gh * gw, 6))
    got = neighbor_cosine_redundancy(tok, gh, gw)
    expected = oracles.redundancy_pairwise(tok.tolist(), gh, gw)
    assert np.max(np.abs(got - expected)) < 1e-12


@given(hnp.arrays(np.float64, (3, 3, 4), elements=finite))
def test_redundancy_bounded(tok):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateTokenWarning)
        out = neighbor_cosine_redundancy(tok.reshape(9, 4), 3, 3)
    assert np.all((out >= -1) & (out <= 1))


@given(hnp.arrays(np.float64, (3, 4, 5), elements=st.floats(0.1, 10)))
def test_mirror_symmetric_input_gives_mirror_symmetric_map(half):
    grid = np.concatenate([half, half[:, ::-1]], axis=1)  # 3 x 8, mirrored left/right
    out = neighbor_cosine_redundancy(grid.reshape(24, 5), 3, 8).reshape(3, 8)
    assert np.allclose(out, out[:, ::-1], rtol=0, atol=1e-12)


# exports

def test_round_half_away():
    assert round_half_away(np.array([0.5, 1.5, 2.5, -0.5, 254.5])).tolist() == [1, 2, 3, -1, 255]


def test_pgm_example():
    gray = redundancy_to_gray(np.array([[1.0, 0.0], [0.0, 1.0]]))
    blob = pgm_bytes(gray)
    assert blob == b"P5\n2 2\n255\n" + bytes([255, 0, 0, 255])


def test_signed_scale():
    assert redundancy_to_gray(np.array([-1.0, 0.0, 1.0]), "signed").tolist() == [0, 128, 255]


def test_histogram_counts_every_selected_token():
    r = fixed_report()
    assert int(r.hist_counts.sum()) == r.norms[r.selected_layers].size


def test_empty_selection_gives_header_only_csv():
    r = build_report(fixed_trace(), selected_layers=[])
    assert histogram_csv(r) == "bin_lo,bin_hi,count\n"


def test_degenerate_histogram():
    edges, counts = norm_histogram(np.full(5, 2.0), bins=4)
    assert counts.sum() == 5 and edges[0] == 2.0


def test_report_validation():
    with pytest.raises(ValueError):
        ArtifactReport(["a"], np.array([[-1.0]]), [[]], {}, 1, 1, [0], np.zeros(2), np.zeros(1))
    with pytest.raises(ValueError):
        ArtifactReport(["a"], np.array([[1.0]]), [[3]], {}, 1, 1, [0], np.zeros(2), np.zeros(1))


@pytest.mark.parametrize("name", ["histogram.csv", "summary.json", "redundancy_embed.pgm", "redundancy_block2.pgm"])
def test_golden_files(tmp_path, name):
    export_report(fixed_report(), tmp_path)
    assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()


def test_reexport_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    export_report(fixed_report(), a)
    export_report(fixed_report(), b)
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_export_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        export_report(fixed_report(), blocker / "sub")
