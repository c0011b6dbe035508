"""The four architectures: MLP, simplified Mixer, decoder-only Transformer,
and the relationally-bottlenecked MLP (shallow and deep).

Each forward is a pure function of (params, input). Inputs are packed
``(L, D)`` matrices (length x token depth) with an optional leading batch
dimension. Classification forwards return raw logits; softmax lives in
the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, ContractError, Tensor

VALID_KINDS = ("mlp", "mixer", "transformer", "rb_mlp", "rb_mlp_deep")

RB_DEEP_WIDTH = 256  # hidden width the deep RB variant uses in experiments
PE_BASE = 10000.0


@dataclass
class ModelSpec:
    """Declarative architecture configuration.

    ``input_length`` and ``token_depth`` describe the packed input matrix;
    ``width`` is the shared hidden width H; ``channel_width`` is the Mixer's
    spatial channel count C; ``embed_width`` prepends a learned per-token
    embedding (used by the same-different MLP over one-hot symbols);
    ``rb_centered`` selects the relation form for RB models (centered full
    matrix for oddballs, query-vs-context vector for match-to-sample).
    """

    kind: str
    depth: int
    width: int
    input_length: int
    token_depth: int
    output_dim: int
    channel_width: Optional[int] = None
    use_positional_encoding: bool = False
    embed_width: Optional[int] = None
    rb_centered: bool = True

    def validate(self) -> None:
        if self.kind not in VALID_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        for name in ("depth", "width", "input_length", "token_depth", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kind == "mixer":
            if not self.channel_width or self.channel_width < 1:
                raise ConfigurationError("mixer requires channel_width >= 1")
        elif self.channel_width is not None:
            raise ConfigurationError(f"channel_width only applies to mixer, not {self.kind}")
        if self.use_positional_encoding and self.kind != "transformer":
            raise ConfigurationError("use_positional_encoding only applies to transformer")
        if self.embed_width is not None and self.kind != "mlp":
            raise ConfigurationError("embed_width only applies to mlp")
        if self.kind.startswith("rb_mlp") and self.input_length < 2:
            raise ContractError("rb models need at least 2 input rows")

    @property
    def flat_input_dim(self) -> int:
        if self.embed_width is not None:
            return self.input_length * self.embed_width
        return self.input_length * self.token_depth

    @property
    def relation_dim(self) -> int:
        if self.rb_centered:
            return self.input_length * self.input_length
        return self.input_length - 1


@dataclass
class ParamSet:
    """Named map from layer role to Tensor, plus the spec that laid it out."""

    spec: ModelSpec
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()


def _layout(spec: ModelSpec) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) pairs for every learned parameter."""
    H, L, D, out = spec.width, spec.input_length, spec.token_depth, spec.output_dim
    shapes: list[tuple[str, tuple]] = []
    if spec.kind == "mlp":
        if spec.embed_width is not None:
            shapes.append(("W_e", (D, spec.embed_width)))
        fan = spec.flat_input_dim
        for i in range(1, spec.depth + 1):
            shapes.append((f"W_{i}", (fan, H)))
            shapes.append((f"b_{i}", (H,)))
            fan = H
        shapes.append(("W_out", (H, out)))
        shapes.append(("b_out", (out,)))
    elif spec.kind == "mixer":
        C = spec.channel_width
        tok_in, sp_in = D, L
        for i in range(1, spec.depth + 1):
            shapes.append((f"W_{i}", (tok_in, H)))
            shapes.append((f"b_{i}", (H,)))
            shapes.append((f"Z_{i}", (C, sp_in)))
            shapes.append((f"c_{i}", (C, 1)))
            tok_in, sp_in = H, C
        shapes.append(("W_out", (H, out)))
        shapes.append(("b_out", (out,)))
    elif spec.kind == "transformer":
        shapes.append(("W_e", (D, H)))
        shapes.append(("b_e", (H,)))
        for i in range(1, spec.depth + 1):
            shapes.extend(
                [
                    (f"Q_{i}", (H, H)),
                    (f"K_{i}", (H, H)),
                    (f"V_{i}", (H, H)),
                    (f"ln1_g_{i}", (H,)),
                    (f"ln1_b_{i}", (H,)),
                    (f"W1_{i}", (H, H)),
                    (f"b1_{i}", (H,)),
                    (f"W2_{i}", (H, H)),
                    (f"c_{i}", (H,)),
                    (f"ln2_g_{i}", (H,)),
                    (f"ln2_b_{i}", (H,)),
                ]
            )
        shapes.append(("W_out", (H, out)))
        shapes.append(("b_out", (out,)))
    elif spec.kind == "rb_mlp":
        shapes.append(("W_out", (spec.relation_dim, out)))
        shapes.append(("b_out", (out,)))
    elif spec.kind == "rb_mlp_deep":
        W = spec.width  # production runs use RB_DEEP_WIDTH
        shapes.append(("W_1", (spec.relation_dim, W)))
        shapes.append(("b_1", (W,)))
        shapes.append(("W_2", (W, W)))
        shapes.append(("b_2", (W,)))
        shapes.append(("W_out", (W, out)))
        shapes.append(("b_out", (out,)))
    return shapes


def count_params(spec: ModelSpec) -> int:
    spec.validate()
    return sum(int(np.prod(shape)) for _, shape in _layout(spec))


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Weights ~ N(0, 1/fan_in), biases and LN offsets zero, LN gains one.

    The embedding matrix W_e over one-hot symbols uses unit variance: its
    effective fan-in is the single active one-hot entry.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 0x1A70]))
    params = ParamSet(spec)
    for name, shape in _layout(spec):
        if name.startswith(("b_", "b1_", "c_", "ln1_b", "ln2_b")):
            data = np.zeros(shape)
        elif name.startswith(("ln1_g", "ln2_g")):
            data = np.ones(shape)
        elif name == "W_e" and spec.kind == "mlp":
            data = rng.normal(size=shape)
        elif name.startswith("Z_"):
            data = rng.normal(scale=1.0 / math.sqrt(shape[1]), size=shape)
        else:
            data = rng.normal(scale=1.0 / math.sqrt(shape[0]), size=shape)
        params.tensors[name] = Tensor(data, requires_grad=True)
    return params


def pack_params(params: ParamSet) -> np.ndarray:
    return np.concatenate([t.data.reshape(-1) for t in params.values()])


def unpack_params(spec: ModelSpec, flat: np.ndarray) -> ParamSet:
    params = ParamSet(spec)
    pos = 0
    for name, shape in _layout(spec):
        n = int(np.prod(shape))
        params.tensors[name] = Tensor(flat[pos : pos + n].reshape(shape), requires_grad=True)
        pos += n
    if pos != flat.size:
        raise ConfigurationError(f"flat vector has {flat.size} entries, layout needs {pos}")
    return params


def params_from_flat_tensor(spec: ModelSpec, w: Tensor) -> ParamSet:
    """Split one flat parameter Tensor into a ParamSet via graph ops, so the
    whole-model loss stays differentiable w.r.t. ``w`` (gradient checking)."""
    params = ParamSet(spec)
    pos = 0
    for name, shape in _layout(spec):
        n = int(np.prod(shape))
        params.tensors[name] = T.reshape(T.slice_(w, (slice(pos, pos + n),)), shape)
        pos += n
    if pos != w.size:
        raise ConfigurationError(f"flat tensor has {w.size} entries, layout needs {pos}")
    return params


def _check_input(spec: ModelSpec, x: Tensor) -> None:
    if x.shape[-2:] != (spec.input_length, spec.token_depth):
        raise ConfigurationError(
            f"{spec.kind}: input shape {x.shape} does not end in "
            f"({spec.input_length}, {spec.token_depth})"
        )


def mlp_forward(params: ParamSet, x: Tensor) -> Tensor:
    """ReLU MLP on the flattened input; returns (..., output_dim).

    Accepts the packed ``(.., L, D)`` matrix or an equivalently ordered flat
    ``(.., L*D)`` vector; both produce identical outputs.
    """
    spec = params.spec
    if x.shape[-2:] == (spec.input_length, spec.token_depth):
        if spec.embed_width is not None:
            x = T.matmul(x, params["W_e"])
        h = T.reshape(x, x.shape[:-2] + (spec.flat_input_dim,))
    elif spec.embed_width is None and x.shape[-1:] == (spec.flat_input_dim,):
        h = x
    else:
        _check_input(spec, x)  # raises with both shapes named
        raise AssertionError("unreachable")
    for i in range(1, spec.depth + 1):
        h = T.relu(T.add(T.matmul(h, params[f"W_{i}"]), params[f"b_{i}"]))
    return T.add(T.matmul(h, params["W_out"]), params["b_out"])


def mixer_forward(params: ParamSet, x: Tensor) -> Tensor:
    """Alternating token-mix (right) and spatial-mix (left), ReLU after each
    spatial mix, readout from the last row."""
    spec = params.spec
    _check_input(spec, x)
    h = x
    for i in range(1, spec.depth + 1):
        tok = T.add(T.matmul(h, params[f"W_{i}"]), params[f"b_{i}"])
        h = T.relu(T.add(T.matmul(params[f"Z_{i}"], tok), params[f"c_{i}"]))
    last = T.slice_(h, (Ellipsis, -1, slice(None)))
    return T.add(T.matmul(last, params["W_out"]), params["b_out"])


def positional_encoding(length: int, width: int) -> np.ndarray:
    """Standard interleaved sin/cos table: row p is
    [sin(p/B^(0/H)), cos(p/B^(0/H)), sin(p/B^(2/H)), ...]."""
    pe = np.zeros((length, width))
    pos = np.arange(length)[:, None]
    idx = np.arange(0, width, 2)[None, :]
    angle = pos / PE_BASE ** (idx / width)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


def transformer_forward(params: ParamSet, x: Tensor, return_attention: bool = False):
    """Decoder-only Transformer: single-head causal attention and a
    one-hidden-layer GeLU feed-forward per layer, post-norm residuals,
    readout from the last token."""
    spec = params.spec
    _check_input(spec, x)
    H = spec.width
    h = T.add(T.matmul(x, params["W_e"]), params["b_e"])
    if spec.use_positional_encoding:
        h = T.add(h, Tensor(positional_encoding(spec.input_length, H)))
    attentions = []
    for i in range(1, spec.depth + 1):
        q = T.matmul(h, params[f"Q_{i}"])
        k = T.matmul(h, params[f"K_{i}"])
        v = T.matmul(h, params[f"V_{i}"])
        scores = T.scalar_scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(H))
        att = T.softmax_lastdim(T.causal_masked_fill(scores))
        if return_attention:
            attentions.append(att)
        a = T.layer_norm_lastdim(
            T.add(T.matmul(att, v), h), params[f"ln1_g_{i}"], params[f"ln1_b_{i}"]
        )
        ff = T.add(
            T.matmul(T.gelu(T.add(T.matmul(a, params[f"W1_{i}"]), params[f"b1_{i}"])), params[f"W2_{i}"]),
            params[f"c_{i}"],
        )
        h = T.layer_norm_lastdim(T.add(ff, a), params[f"ln2_g_{i}"], params[f"ln2_b_{i}"])
    last = T.slice_(h, (Ellipsis, -1, slice(None)))
    out = T.add(T.matmul(last, params["W_out"]), params["b_out"])
    if return_attention:
        return out, attentions
    return out


def rb_relations(x: Tensor, centered: bool) -> Tensor:
    """Dot-product relations of the packed input.

    centered=True: R_ij = (x_i - xbar) . (x_j - xbar), flattened to L^2.
    centered=False: query (last row) dotted with each context row, length L-1.

    Relations sit upstream of every learned parameter, so they are computed
    outside the graph; entry symmetry is bit-exact because each (i, j) pair
    sums over coordinates in the same order.
    """
    xd = x.data
    L = xd.shape[-2]
    if L < 2:
        raise ContractError(f"rb_relations needs >= 2 rows, got {L}")
    if centered:
        xc = xd - xd.mean(axis=-2, keepdims=True)
        r = np.einsum("...ik,...jk->...ij", xc, xc)
        return Tensor(r.reshape(xd.shape[:-2] + (L * L,)))
    query = xd[..., -1, :]
    context = xd[..., :-1, :]
    return Tensor(np.einsum("...k,...lk->...l", query, context))


def rb_mlp_forward(params: ParamSet, relations: Tensor) -> Tensor:
    """Readout over relations; the deep variant inserts two ReLU layers."""
    spec = params.spec
    if relations.shape[-1] != spec.relation_dim:
        raise ConfigurationError(
            f"{spec.kind}: relation length {relations.shape[-1]} != {spec.relation_dim}"
        )
    h = relations
    if spec.kind == "rb_mlp_deep":
        h = T.relu(T.add(T.matmul(h, params["W_1"]), params["b_1"]))
        h = T.relu(T.add(T.matmul(h, params["W_2"]), params["b_2"]))
    return T.add(T.matmul(h, params["W_out"]), params["b_out"])


def grad_check_architectures(instances: int = 20, seed: int = 0,
                             step: float = 1e-4) -> dict[str, float]:
    """Worst finite-difference relative error of the full loss gradient per
    architecture, over ``instances`` random small models each.

    An instance that misses tolerance at the default step is re-measured at
    1e-5 and 1e-3 and scored by its best step: ReLU-kink straddles shrink
    with smaller steps, roundoff on flat attention directions with larger
    ones, while a genuine gradient bug fails at every step.
    """
    import zlib

    from . import tensor as TT
    from .losses import cross_entropy_loss, mse_loss

    results: dict[str, float] = {}
    for kind in VALID_KINDS:
        rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(kind.encode())]))
        worst = 0.0
        for _ in range(instances):
            depth = int(rng.integers(1, 3))
            width = int(rng.integers(3, 8))
            L = int(rng.integers(3, 6))
            D = int(rng.integers(2, 4))
            kw = dict(kind=kind, depth=depth, width=width, input_length=L,
                      token_depth=D, output_dim=int(rng.integers(1, 4)))
            if kind == "mixer":
                kw["channel_width"] = int(rng.integers(2, 6))
            if kind == "transformer":
                kw["use_positional_encoding"] = bool(rng.integers(0, 2))
            if kind.startswith("rb_mlp"):
                kw["rb_centered"] = bool(rng.integers(0, 2))
            if kind == "mlp" and rng.integers(0, 2):
                kw["embed_width"] = int(rng.integers(2, 5))
            spec = ModelSpec(**kw)
            x = Tensor(rng.normal(size=(1, L, D)))
            if spec.output_dim == 1:
                target = Tensor(rng.normal(size=(1, 1)))

                def loss_fn(w, spec=spec, x=x, target=target):
                    return mse_loss(forward(params_from_flat_tensor(spec, w), x), target)

            else:
                idx = rng.integers(0, spec.output_dim, size=1)

                def loss_fn(w, spec=spec, x=x, idx=idx):
                    return cross_entropy_loss(forward(params_from_flat_tensor(spec, w), x), idx)

            flat = pack_params(init_params(spec, seed=int(rng.integers(0, 2**31))))
            # jitter away from zero-init biases: exact ReLU kinks make the
            # (correct) zero subgradient disagree with a straddling FD probe
            flat += 0.05 * rng.normal(size=flat.size)
            err = TT.grad_check(loss_fn, Tensor(flat), step=step)
            if err >= 1e-4:
                err = min(err, *(TT.grad_check(loss_fn, Tensor(flat), step=s)
                                 for s in (1e-5, 1e-6, 1e-3)))
            worst = max(worst, err)
        results[kind] = worst
    return results


def forward(params: ParamSet, x: Tensor) -> Tensor:
    """Dispatch on the spec kind; RB kinds take the packed input and build
    their relations internally."""
    kind = params.spec.kind
    if kind == "mlp":
        return mlp_forward(params, x)
    if kind == "mixer":
        return mixer_forward(params, x)
    if kind == "transformer":
        return transformer_forward(params, x)
    if kind in ("rb_mlp", "rb_mlp_deep"):
        _check_input(params.spec, x)
        return rb_mlp_forward(params, rb_relations(x, params.spec.rb_centered))
    raise ConfigurationError(f"unknown model kind {kind!r}")
