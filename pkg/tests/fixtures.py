"""Fixed inputs shared by the diagnostics tests and the acceptance suite."""

from pathlib import Path

import numpy as np

from vitlab import tensor as tn
from vitlab.tensor import Tensor

from vitlab.diagnostics import build_report
from vitlab.model import Trace

GOLDEN = Path(__file__).parent / "golden"


def fixed_trace() -> Trace:
    """Hand-built 3-layer trace: class token + one register + a 3x3 patch grid, D=4."""
    base = np.arange(11 * 4, dtype=np.float64).reshape(11, 4) / 8.0 - 2.0
    states = [base, base * 1.5 + 0.25, base[::-1] * 2.0]
    # one artifact-like token in the last layer
    states[2] = states[2].copy()
    states[2][6] = [40.0, -30.0, 10.0, 5.0]
    return Trace(
        labels=["embed", "block1", "block2"],
        states=states,
        attention=[],
        num_registers=1,
        grid_h=3,
        grid_w=3,
    )


def fixed_report():
    return build_report(
        fixed_trace(),
        selected_layers=[2],
        redundancy_layers=[0, 2],
        bins=5,
        config={"model": {"embed_dim": 4}, "name": "golden"},
        seed=123,
    )


# one differentiable function per primitive, each taking a [4, 5] input
PRIMITIVES = {
    "add": lambda x: x + x * 0.5,
    "sub": lambda x: x - Tensor(np.linspace(0, 1, x.size).reshape(x.shape)),
    "mul": lambda x: x * x,
    "div": lambda x: x / (x * x + 1.0),
    "power": lambda x: (x * x + 1.0) ** 1.5,
    "exp": tn.exp,
    "log": lambda x: tn.log(x * x + 1.0),
    "tanh": tn.tanh,
    "sigmoid": tn.sigmoid,
    "gelu": tn.gelu,
    "sum_axis": lambda x: x.sum(axis=0),
    "mean": lambda x: x.mean(axis=-1, keepdims=True),
    "reshape": lambda x: x.reshape(-1) * x.reshape(-1),
    "transpose": lambda x: tn.transpose(x) * Tensor(np.arange(x.size).reshape(x.shape[::-1])),
    "getitem": lambda x: x[1:, ::2] * x[1:, ::2],
    "concat": lambda x: tn.concat([x, x * x], axis=0),
    "broadcast_to": lambda x: tn.broadcast_to(x[:1], (3,) + x.shape[1:]) * 2.0,
    "matmul_left": lambda x: tn.matmul(x, Tensor(np.arange(20.0).reshape(5, 4) / 10)),
    "matmul_right": lambda x: tn.matmul(Tensor(np.arange(12.0).reshape(3, 4) / 7), x),
    "softmax_rows": tn.softmax_rows,
    "log_softmax_rows": tn.log_softmax_rows,
    "layernorm_input": lambda x: tn.layernorm(
        x, Tensor(np.linspace(0.5, 1.5, 5)), Tensor(np.linspace(-1, 1, 5))
    ),
    "conv1d_input": lambda x: tn.conv1d_seq(
        x, Tensor(np.arange(15.0).reshape(5, 3) / 10 - 0.7), Tensor(np.ones(5) * 0.1)
    ),
    "cross_entropy": lambda x: tn.cross_entropy(x, np.array([0, 4, 2, 1])),
}
