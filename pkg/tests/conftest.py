import numpy as np
import pytest

from g2ra import tensor as T


def op_gradient_error(build, inputs, seed=0, h=1e-5):
    """Max relative error of an op's backward rule against central differences.

    ``build(*nodes, tape)`` returns one output node (or a tuple whose first
    element is used); the scalar objective is <R, out> for a fixed random R.
    """
    rng = np.random.default_rng(seed)
    nodes = [T.ParamTensor(f"x{i}", x) for i, x in enumerate(inputs)]
    tape = T.Tape()
    out = build(*nodes, tape)
    out = out[0] if isinstance(out, tuple) else out
    upstream = rng.normal(size=out.shape)
    tape.backward(out, upstream)

    def f():
        o = build(*nodes, None)
        o = o[0] if isinstance(o, tuple) else o
        return float((upstream * o.data).sum())

    numeric = T.finite_difference_gradient(f, nodes, h)
    return max(float(T.relative_error(n.grad, numeric[n.name]).max()) for n in nodes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_YAML = """
out: {out}
fusion: {{d_clip: 12, d_agg: 10, d: 16, heads: 4}}
train: {{epochs: 1, train_scenes: 4, val_scenes: 2, train_max_steps: 8, hidden: 16}}
eval: {{episodes_per_split: 2, max_steps: 8}}
ablate: {{seeds: [0]}}
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a YAML config small enough for train/eval/sweep in seconds."""
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_YAML.format(out=tmp_path / "run"))
    return p
