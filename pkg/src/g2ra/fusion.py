"""Geometry-guided alignment of 2-D semantic tokens with 3-D geometric tokens.

Two stages share one parameter set:

* prior injection: pool the projected geometric values into a global summary,
  turn it into a FiLM scale/shift and modulate the base queries;
* reparameterization: multi-head cross-attention from the injected queries to
  the geometric keys/values, then a gated residual back onto the base queries.

``fuse_variant`` also provides the ablation baselines (2-D only, 3-D only,
concatenation, no injection, bidirectional attention).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, ParamTensor, Tape, TokenMatrix

VARIANTS = ("full", "two_d_only", "three_d_only", "concat", "no_geo_inject", "bidirectional")

CHECKPOINT_FORMAT = "g2ra-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class G2raConfig:
    d_clip: int = 96
    d_agg: int = 128
    d: int = 64
    heads: int = 4

    def __post_init__(self):
        for name in ("d_clip", "d_agg", "d", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


class G2raParams:
    """All learnable weights of the fusion block.

    ``fixed_eta`` / ``fixed_gate`` pin the injection strength and gate to
    constants (sweep mode); the underlying parameters then receive no
    gradient from the forward pass.
    """

    def __init__(self, config: G2raConfig, tensors: Dict[str, ParamTensor],
                 fixed_eta: Optional[float] = None, fixed_gate: Optional[float] = None):
        self.config = config
        self.tensors = tensors
        self.fixed_eta = fixed_eta
        self.fixed_gate = fixed_gate

    @classmethod
    def init(cls, config: G2raConfig, seed: int = 0, eta: float = 0.5, gate: float = 0.5,
             fixed_eta: Optional[float] = None, fixed_gate: Optional[float] = None) -> "G2raParams":
        rng = np.random.default_rng(seed)
        c = config
        t: Dict[str, ParamTensor] = {}

        def add(name, value):
            t[name] = ParamTensor(name, value)

        add("w_q_base", glorot(rng, c.d_clip, c.d))
        add("w_k", glorot(rng, c.d_agg, c.d))
        add("b_k", np.zeros((1, c.d)))
        add("w_v", glorot(rng, c.d_agg, c.d))
        add("b_v", np.zeros((1, c.d)))
        add("psi_hidden_w", glorot(rng, c.d, c.d))
        add("psi_hidden_b", np.zeros((1, c.d)))
        add("psi_out_w", glorot(rng, c.d, 2 * c.d))
        add("psi_out_b", np.zeros((1, 2 * c.d)))
        for i in range(c.heads):
            add(f"head_q{i}", glorot(rng, c.d, c.d_head))
            add(f"head_k{i}", glorot(rng, c.d, c.d_head))
            add(f"head_v{i}", glorot(rng, c.d, c.d_head))
        add("w_o", glorot(rng, c.d, c.d))
        # concat-fusion baseline projection: [Q_base | g] (2d) -> d
        add("w_concat", glorot(rng, 2 * c.d, c.d))
        add("eta", np.array([[eta]]))
        add("alpha_logit", np.array([[logit(gate)]]))
        return cls(config, t, fixed_eta, fixed_gate)

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def gate_value(self) -> float:
        if self.fixed_gate is not None:
            return float(self.fixed_gate)
        return float(T.sigmoid(self["alpha_logit"]).data[0, 0])

    def eta_value(self) -> float:
        if self.fixed_eta is not None:
            return float(self.fixed_eta)
        return self["eta"].item()

    def copy(self) -> "G2raParams":
        return G2raParams(
            self.config,
            {k: ParamTensor(k, v.data.copy()) for k, v in self.tensors.items()},
            self.fixed_eta,
            self.fixed_gate,
        )

    def used_names(self, variant: str) -> List[str]:
        """Parameters that influence the output of ``variant``."""
        c = self.config
        heads = [f"head_{x}{i}" for i in range(c.heads) for x in "qkv"]
        psi = ["psi_hidden_w", "psi_hidden_b", "psi_out_w", "psi_out_b"]
        gate = [] if self.fixed_gate is not None else ["alpha_logit"]
        eta = [] if self.fixed_eta is not None else ["eta"]
        base = ["w_q_base"]
        if variant == "two_d_only":
            return base
        if variant == "three_d_only":
            return ["w_v", "b_v"]
        if variant == "concat":
            return base + ["w_v", "b_v", "w_concat"]
        gar = base + ["w_k", "b_k", "w_v", "b_v"] + heads + ["w_o"] + gate
        if variant == "no_geo_inject":
            return gar
        if variant in ("full", "bidirectional"):
            return gar + psi + eta
        raise ValueError(f"unknown fusion variant {variant!r}")


@dataclass
class FusionTrace:
    """Intermediates of one forward pass plus the tape needed to differentiate it."""

    tape: Tape
    inputs: Tuple[TokenMatrix, TokenMatrix]
    f_fuse: TokenMatrix
    q_base: TokenMatrix
    k: Optional[TokenMatrix] = None
    v: Optional[TokenMatrix] = None
    g: Optional[TokenMatrix] = None
    gamma_tilde: Optional[TokenMatrix] = None
    beta: Optional[TokenMatrix] = None
    q_inj: Optional[TokenMatrix] = None
    attention: List[TokenMatrix] = field(default_factory=list)
    f_align: Optional[TokenMatrix] = None
    variant: str = "full"


def _scalar_node(p: G2raParams, name: str, fixed: Optional[float], tape, transform=None):
    if fixed is not None:
        return T.constant([[fixed]])
    node = p[name]
    return transform(node, tape=tape) if transform else node


def project_base_queries(f2d: TokenMatrix, p: G2raParams, tape: Optional[Tape] = None) -> TokenMatrix:
    if f2d.cols != p.config.d_clip:
        raise DimensionError(f"2-D tokens have {f2d.cols} cols, expected d_clip={p.config.d_clip}")
    return T.matmul(f2d, p["w_q_base"], tape)


def project_geometry(f3d: TokenMatrix, p: G2raParams, tape: Optional[Tape] = None):
    if f3d.cols != p.config.d_agg:
        raise DimensionError(f"3-D tokens have {f3d.cols} cols, expected D_agg={p.config.d_agg}")
    k = T.add(T.matmul(f3d, p["w_k"], tape), p["b_k"], tape)
    v = project_values(f3d, p, tape)
    return k, v


def project_values(f3d: TokenMatrix, p: G2raParams, tape: Optional[Tape] = None) -> TokenMatrix:
    return T.add(T.matmul(f3d, p["w_v"], tape), p["b_v"], tape)


def geometric_summary(v: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    if v.rows < 1:
        raise ValueError("geometric summary of an empty token set")
    return T.mean_pool_rows(v, tape)


def film_modulation(g: TokenMatrix, p: G2raParams, tape: Optional[Tape] = None):
    d = p.config.d
    if g.shape != (1, d):
        raise DimensionError(f"summary must be 1x{d}, got {g.shape}")
    h = T.relu(T.add(T.matmul(g, p["psi_hidden_w"], tape), p["psi_hidden_b"], tape), tape)
    out = T.add(T.matmul(h, p["psi_out_w"], tape), p["psi_out_b"], tape)
    gamma, beta = T.split_cols(out, d, tape)
    return T.sigmoid(gamma, tape), beta


def inject_priors(q_base: TokenMatrix, gamma_tilde: TokenMatrix, beta: TokenMatrix,
                  eta: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    """Q_base + eta * (gamma_tilde * Q_base + beta), scale/shift broadcast over tokens."""
    mod = T.add(T.multiply(q_base, gamma_tilde, tape), beta, tape)
    return T.add(q_base, T.scale(mod, eta, tape), tape)


def _attend(queries: TokenMatrix, keys: TokenMatrix, values: TokenMatrix, p: G2raParams,
            tape: Optional[Tape], qname="q", kname="k", vname="v"):
    c = p.config
    inv_sqrt = T.constant([[1.0 / math.sqrt(c.d_head)]])
    heads, weights = [], []
    for i in range(c.heads):
        qi = T.matmul(queries, p[f"head_{qname}{i}"], tape)
        ki = T.matmul(keys, p[f"head_{kname}{i}"], tape)
        vi = T.matmul(values, p[f"head_{vname}{i}"], tape)
        a = T.row_softmax(T.scale(T.matmul_nt(qi, ki, tape), inv_sqrt, tape), tape)
        weights.append(a)
        heads.append(T.matmul(a, vi, tape))
    return T.matmul(T.hconcat(heads, tape), p["w_o"], tape), weights


def multihead_cross_attention(q_inj: TokenMatrix, k: TokenMatrix, v: TokenMatrix, p: G2raParams,
                              tape: Optional[Tape] = None):
    d = p.config.d
    if q_inj.cols != d or k.cols != d or v.cols != d:
        raise DimensionError(f"attention inputs must have {d} cols: {q_inj.shape}, {k.shape}, {v.shape}")
    if k.rows != v.rows:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in token count")
    return _attend(q_inj, k, v, p, tape)


def gated_fusion(f_align: TokenMatrix, q_base: TokenMatrix, gate: TokenMatrix,
                 tape: Optional[Tape] = None) -> TokenMatrix:
    return T.lerp(f_align, q_base, gate, tape)


def _as_tokens(x) -> TokenMatrix:
    return x if isinstance(x, TokenMatrix) else TokenMatrix(x)


def g2ra_forward(f2d, f3d, p: G2raParams, tape: Optional[Tape] = None,
                 inject: bool = True) -> Tuple[TokenMatrix, FusionTrace]:
    """Full geometry-guided alignment; returns (F_fuse, trace)."""
    tape = tape if tape is not None else Tape()
    f2d, f3d = _as_tokens(f2d), _as_tokens(f3d)
    q_base = project_base_queries(f2d, p, tape)
    k, v = project_geometry(f3d, p, tape)
    trace = FusionTrace(tape, (f2d, f3d), q_base, q_base, k=k, v=v)
    if inject:
        g = geometric_summary(v, tape)
        gamma_tilde, beta = film_modulation(g, p, tape)
        eta = _scalar_node(p, "eta", p.fixed_eta, tape)
        q_inj = inject_priors(q_base, gamma_tilde, beta, eta, tape)
        trace.g, trace.gamma_tilde, trace.beta = g, gamma_tilde, beta
    else:
        q_inj = q_base
    f_align, weights = multihead_cross_attention(q_inj, k, v, p, tape)
    gate = _scalar_node(p, "alpha_logit", p.fixed_gate, tape, T.sigmoid)
    f_fuse = gated_fusion(f_align, q_base, gate, tape)
    trace.q_inj, trace.attention, trace.f_align, trace.f_fuse = q_inj, weights, f_align, f_fuse
    trace.variant = "full" if inject else "no_geo_inject"
    return f_fuse, trace


def g2ra_backward(trace: FusionTrace, upstream) -> None:
    """Accumulate gradients of <upstream, F_fuse> into parameters and both inputs."""
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != trace.f_fuse.shape:
        raise DimensionError(f"upstream {up.shape} does not match F_fuse {trace.f_fuse.shape}")
    for x in trace.inputs:
        if x.grad is None:
            x.zero_grad()
    trace.tape.backward(trace.f_fuse, up)


def _bidirectional(f2d, f3d, p: G2raParams, tape: Tape):
    q_base = project_base_queries(f2d, p, tape)
    k, v = project_geometry(f3d, p, tape)
    g = geometric_summary(v, tape)
    gamma_tilde, beta = film_modulation(g, p, tape)
    eta = _scalar_node(p, "eta", p.fixed_eta, tape)
    q_inj = inject_priors(q_base, gamma_tilde, beta, eta, tape)
    # reverse pass: geometric tokens query the injected 2-D tokens, same head maps transposed
    back, _ = _attend(k, q_inj, q_inj, p, tape, qname="k", kname="q", vname="q")
    v_ref = T.add(v, back, tape)
    f_align, weights = _attend(q_inj, k, v_ref, p, tape)
    gate = _scalar_node(p, "alpha_logit", p.fixed_gate, tape, T.sigmoid)
    f_fuse = gated_fusion(f_align, q_base, gate, tape)
    return FusionTrace(tape, (f2d, f3d), f_fuse, q_base, k=k, v=v_ref, g=g,
                       gamma_tilde=gamma_tilde, beta=beta, q_inj=q_inj, attention=weights,
                       f_align=f_align, variant="bidirectional")


def fuse_variant(kind: str, f2d, f3d, p: G2raParams,
                 tape: Optional[Tape] = None) -> Tuple[TokenMatrix, FusionTrace]:
    """Forward pass of an ablation variant; every variant returns N_2D x d tokens."""
    if kind not in VARIANTS:
        raise ValueError(f"unknown fusion variant {kind!r}; expected one of {VARIANTS}")
    tape = tape if tape is not None else Tape()
    f2d, f3d = _as_tokens(f2d), _as_tokens(f3d)
    if kind == "full":
        return g2ra_forward(f2d, f3d, p, tape)
    if kind == "no_geo_inject":
        return g2ra_forward(f2d, f3d, p, tape, inject=False)
    if kind == "bidirectional":
        trace = _bidirectional(f2d, f3d, p, tape)
        return trace.f_fuse, trace
    if kind == "two_d_only":
        q_base = project_base_queries(f2d, p, tape)
        return q_base, FusionTrace(tape, (f2d, f3d), q_base, q_base, variant=kind)
    if kind == "three_d_only":
        if f3d.cols != p.config.d_agg:
            raise DimensionError(f"3-D tokens have {f3d.cols} cols, expected D_agg={p.config.d_agg}")
        v = project_values(f3d, p, tape)
        g = geometric_summary(v, tape)
        out = T.broadcast_rows(g, f2d.rows, tape)
        return out, FusionTrace(tape, (f2d, f3d), out, out, v=v, g=g, variant=kind)
    # concat
    q_base = project_base_queries(f2d, p, tape)
    if f3d.cols != p.config.d_agg:
        raise DimensionError(f"3-D tokens have {f3d.cols} cols, expected D_agg={p.config.d_agg}")
    v = project_values(f3d, p, tape)
    g = geometric_summary(v, tape)
    joined = T.hconcat([q_base, T.broadcast_rows(g, f2d.rows, tape)], tape)
    out = T.matmul(joined, p["w_concat"], tape)
    return out, FusionTrace(tape, (f2d, f3d), out, q_base, v=v, g=g, variant=kind)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------


def params_to_records(tensors: Dict[str, ParamTensor], prefix: str = "") -> List[dict]:
    return [
        {"name": prefix + name, "shape": list(t.shape), "values": [float(x) for x in t.data.ravel()]}
        for name, t in tensors.items()
    ]


def records_to_params(records: List[dict], prefix: str = "") -> Dict[str, ParamTensor]:
    out = {}
    for r in records:
        if not r["name"].startswith(prefix):
            continue
        shape = tuple(r["shape"])
        values = np.array(r["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"parameter {r['name']}: {values.size} values for shape {shape}")
        name = r["name"][len(prefix):]
        out[name] = ParamTensor(name, values.reshape(shape))
    return out


def save_checkpoint(path, fusion: G2raParams, policy=None, extra: Optional[dict] = None):
    """Write fusion (and optionally policy) weights as one JSON document.

    Layout: ``{"format", "version", "config", "fixed", "extra", "params": [{name, shape, values}]}``
    with values in row-major order. Floats use shortest round-trip repr so
    loading then saving reproduces the same bytes.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(fusion.config),
        "fixed": {"eta": fusion.fixed_eta, "gate": fusion.fixed_gate},
        "extra": extra or {},
        "params": params_to_records(fusion.tensors, "fusion.")
        + (params_to_records(policy.tensors, "policy.") if policy is not None else []),
    }
    if policy is not None:
        doc["policy_config"] = asdict(policy.config)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path, expect: Optional[G2raConfig] = None):
    """Return (G2raParams, policy tensors dict, policy config dict or None, extra)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    config = G2raConfig(**doc["config"])
    if expect is not None and expect != config:
        raise ValueError(f"{path}: checkpoint dims {config} do not match requested {expect}")
    fusion = G2raParams(config, records_to_params(doc["params"], "fusion."),
                        doc["fixed"]["eta"], doc["fixed"]["gate"])
    policy = records_to_params(doc["params"], "policy.")
    return fusion, policy, doc.get("policy_config"), doc.get("extra", {})
