"""Seeded generators for the eight tasks, each emitting packed episodes.

Streams are counter-based: episodes are generated in fixed chunks of
:data:`CHUNK`, each chunk drawing from its own Philox stream keyed by
(spec.seed, task kind, stream tag, chunk index). Episode ``i`` therefore
never depends on how many episodes were requested or consumed before it,
and identical (spec, seed, count) calls are bit-identical.

Packing contracts (length x depth):
  icl_regression       (L+1) x (n+1)   rows (x_i, y_i), final row (x_q, 0)
  icl_classification   (2L+1) x n      interleaved x_i, y_i rows, then x_q
  mts                  (L+1) x n       context points then query
  sphere/line oddball  L x n
  simple tasks         (n/t) x t
  same_different       2 x |X|         one-hot symbol rows
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import ContractError, Tensor

CHUNK = 128

TASK_KINDS = (
    "icl_regression",
    "icl_classification",
    "mts",
    "sphere_oddball",
    "line_oddball",
    "simple_regression",
    "simple_classification",
    "same_different",
)

_CLASSIFICATION_KINDS = {
    "icl_classification",
    "mts",
    "sphere_oddball",
    "line_oddball",
    "simple_classification",
    "same_different",
}


@dataclass
class TaskSpec:
    """Task kind plus every distribution parameter and the stream seed.

    Only kind-relevant fields are read; :func:`task_defaults` fills in the
    per-task defaults used throughout the experiments.
    """

    kind: str
    seed: int = 0
    n: int = 8                      # input dimension
    context_length: int = 8         # L
    noise: float = 0.05             # sigma^2
    pool_size: Optional[int] = None  # k; None = unrestricted / infinite
    burstiness: int = 1             # B
    num_labels: int = 32            # C
    within_cluster: float = 0.1     # eps
    perturb_distance: float = 5.0   # d
    box_size: float = 10.0          # center box half-width
    num_symbols: int = 64           # |X|
    chunk_size: int = 1             # t (simple-task token size)
    radius: float = 1.0             # mts circle radius
    scrambled: bool = False         # mts presentation order

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.n < 1 or self.context_length < 1:
            raise ContractError("n and context_length must be >= 1")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")
        if self.kind == "icl_classification":
            if self.context_length % self.burstiness != 0:
                raise ContractError(
                    f"burstiness {self.burstiness} must divide L={self.context_length}"
                )
            if self.pool_size is not None and self.pool_size < self.context_length // self.burstiness:
                raise ContractError("need at least L/B clusters to fill the context")
        if self.kind in ("sphere_oddball", "line_oddball"):
            if self.context_length < 2:
                raise ContractError("oddball tasks need L >= 2")
            if self.perturb_distance < 0:
                raise ContractError("perturb distance must be >= 0")
        if self.kind == "mts":
            if self.context_length < 2:
                raise ContractError("mts needs L >= 2")
            if self.radius <= 0:
                raise ContractError("mts radius must be > 0")
        if self.kind in ("simple_regression", "simple_classification"):
            if self.n % self.chunk_size != 0:
                raise ContractError(f"chunk size {self.chunk_size} must divide n={self.n}")
        if self.kind == "same_different":
            if self.num_symbols < 4 or self.num_symbols % 2 != 0:
                raise ContractError("same_different needs an even symbol count >= 4")

    @property
    def input_shape(self) -> tuple[int, int]:
        L, n = self.context_length, self.n
        return {
            "icl_regression": (L + 1, n + 1),
            "icl_classification": (2 * L + 1, n),
            "mts": (L + 1, n),
            "sphere_oddball": (L, n),
            "line_oddball": (L, n),
            "simple_regression": (self.n // self.chunk_size, self.chunk_size),
            "simple_classification": (self.n // self.chunk_size, self.chunk_size),
            "same_different": (2, self.num_symbols),
        }[self.kind]

    @property
    def is_classification(self) -> bool:
        return self.kind in _CLASSIFICATION_KINDS

    @property
    def output_dim(self) -> int:
        """Logit count for classification tasks, 1 for regression."""
        return {
            "icl_regression": 1,
            "simple_regression": 1,
            "icl_classification": self.num_labels,
            "mts": self.context_length,
            "sphere_oddball": self.context_length,
            "line_oddball": self.context_length,
            "simple_classification": self.pool_size or 16,
            "same_different": 2,
        }[self.kind]


_TASK_DEFAULTS = {
    "icl_regression": dict(n=8, context_length=8, noise=0.05),
    "icl_classification": dict(n=8, context_length=8, burstiness=4, num_labels=32,
                               within_cluster=0.1, pool_size=2048),
    "mts": dict(n=2, context_length=5, radius=1.0),
    "sphere_oddball": dict(n=2, context_length=6, perturb_distance=5.0, box_size=10.0),
    "line_oddball": dict(n=2, context_length=6, perturb_distance=2.0),
    "simple_regression": dict(n=64, noise=0.05, chunk_size=1),
    "simple_classification": dict(n=64, pool_size=16, within_cluster=0.1, chunk_size=1),
    "same_different": dict(num_symbols=64),
}


def task_defaults(kind: str, **overrides) -> TaskSpec:
    """TaskSpec with this task's default parameterization."""
    if kind not in _TASK_DEFAULTS:
        raise ContractError(f"unknown task kind {kind!r}")
    fields = dict(_TASK_DEFAULTS[kind])
    fields.update(overrides)
    return TaskSpec(kind=kind, **fields)


@dataclass
class Episode:
    """One task instance: packed input, target, generator ground truth."""

    input: Tensor
    target: float | int
    meta: dict


@dataclass
class EpisodeBatch:
    """Stacked episodes with identical packing; the trainer's unit of work."""

    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def episode(self, i: int) -> Episode:
        meta = {k: v[i] for k, v in self.meta.items()}
        t = self.targets[i]
        target = int(t) if np.issubdtype(self.targets.dtype, np.integer) else float(t)
        return Episode(Tensor(self.inputs[i]), target, meta)

    def episodes(self) -> list[Episode]:
        return [self.episode(i) for i in range(len(self))]


def _rng(seed: int, *tags) -> np.random.Generator:
    key = [int(seed) & (2**63 - 1)]
    for t in tags:
        key.append(zlib.crc32(str(t).encode()) if isinstance(t, str) else int(t))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# fixed per-run entities
# ---------------------------------------------------------------------------

def sample_beta_pool(spec: TaskSpec) -> np.ndarray:
    """Finite pool of k regression weights, beta_i ~ N(0, I/n)."""
    if spec.pool_size is None or spec.pool_size < 1:
        raise ContractError("beta pool needs pool_size >= 1")
    rng = _rng(spec.seed, spec.kind, "pool")
    return rng.normal(scale=1.0 / np.sqrt(spec.n), size=(spec.pool_size, spec.n))


def sample_fixed_beta(spec: TaskSpec) -> np.ndarray:
    """Single weight vector, fixed for a simple-regression run."""
    rng = _rng(spec.seed, spec.kind, "fixed_beta")
    return rng.normal(scale=1.0 / np.sqrt(spec.n), size=spec.n)


def sample_fixed_centers(spec: TaskSpec) -> np.ndarray:
    """k cluster centers, fixed for a simple-classification run."""
    k = spec.pool_size or 16
    rng = _rng(spec.seed, spec.kind, "fixed_centers")
    return rng.normal(scale=1.0 / np.sqrt(spec.n), size=(k, spec.n))


def label_alphabet(spec: TaskSpec) -> np.ndarray:
    """The C label vectors alpha, fixed per (seed, kind)."""
    rng = _rng(spec.seed, spec.kind, "alphabet")
    return rng.normal(scale=1.0 / np.sqrt(spec.n), size=(spec.num_labels, spec.n))


@dataclass
class ClassMixture:
    """Fixed Gaussian mixture for ICL classification: centers, the
    cluster -> label assignment, and the C label vectors alpha."""

    centers: np.ndarray        # (k, n)
    cluster_labels: np.ndarray  # (k,) ints in [0, C)
    label_vectors: np.ndarray  # (C, n)


def sample_mixture(spec: TaskSpec) -> ClassMixture:
    """Mixture with balanced labels: clusters are shuffled, then cluster i
    takes label i mod C, so labels stay injective when k < C."""
    if spec.pool_size is None:
        raise ContractError("sample_mixture needs finite pool_size; infinite mode resamples per episode")
    k, C, n = spec.pool_size, spec.num_labels, spec.n
    rng = _rng(spec.seed, spec.kind, "mixture")
    centers = rng.normal(scale=1.0 / np.sqrt(n), size=(k, n))
    labels = rng.permutation(np.arange(k) % C) if k >= C else rng.permutation(C)[:k]
    return ClassMixture(centers, labels, label_alphabet(spec))


@dataclass
class SymbolSplit:
    train_half: np.ndarray
    test_half: np.ndarray


def split_symbols(spec: TaskSpec) -> SymbolSplit:
    rng = _rng(spec.seed, spec.kind, "symbol_split")
    perm = rng.permutation(spec.num_symbols)
    half = spec.num_symbols // 2
    return SymbolSplit(np.sort(perm[:half]), np.sort(perm[half:]))


# ---------------------------------------------------------------------------
# chunk generators (one Philox stream per chunk; fixed draw order)
# ---------------------------------------------------------------------------

def _distinct_rows(rng: np.random.Generator, m: int, take: int, limit: int) -> np.ndarray:
    """(m, take) integers in [0, limit), distinct within each row."""
    if take > limit:
        raise ContractError(f"cannot draw {take} distinct values from {limit}")
    out = rng.integers(0, limit, size=(m, take))
    while True:
        sorted_ = np.sort(out, axis=1)
        bad = (np.diff(sorted_, axis=1) == 0).any(axis=1) if take > 1 else np.zeros(m, bool)
        if not bad.any():
            return out
        out[bad] = rng.integers(0, limit, size=(int(bad.sum()), take))


def _chunk_icl_regression(spec, rng, m, pool):
    n, L = spec.n, spec.context_length
    if pool is not None:
        idx = rng.integers(0, pool.shape[0], size=m)
        beta = pool[idx]
    else:
        beta = rng.normal(scale=1.0 / np.sqrt(n), size=(m, n))
    x = rng.normal(size=(m, L + 1, n))
    y = np.einsum("mln,mn->ml", x, beta) + rng.normal(scale=np.sqrt(spec.noise), size=(m, L + 1))
    inputs = np.zeros((m, L + 1, n + 1))
    inputs[:, :, :n] = x
    inputs[:, :L, n] = y[:, :L]
    return inputs, y[:, L], {"beta": beta}


def _cluster_points(rng, centers, eps, n):
    """x = (mu + eps*eta) / sqrt(1 + eps^2), eta ~ N(0, I/n)."""
    eta = rng.normal(scale=1.0 / np.sqrt(n), size=centers.shape)
    return (centers + eps * eta) / np.sqrt(1.0 + eps * eps)


def _chunk_icl_classification(spec, rng, m, mixture, query_mode="in_context"):
    n, L, B, C = spec.n, spec.context_length, spec.burstiness, spec.num_labels
    ncc = L // B
    if mixture is None:
        # infinite-cluster mode: fresh centers and labels for every episode
        centers = rng.normal(scale=1.0 / np.sqrt(n), size=(m, ncc, n))
        ep_labels = _distinct_rows(rng, m, ncc, C)
        chosen = np.broadcast_to(np.arange(ncc), (m, ncc))
        label_of = lambda rows, cols: ep_labels[rows, cols]
        center_of = lambda rows, cols: centers[rows, cols]
    else:
        k = mixture.centers.shape[0]
        chosen = _distinct_rows(rng, m, ncc, k)
        label_of = lambda rows, cols: mixture.cluster_labels[chosen[rows, cols]]
        center_of = lambda rows, cols: mixture.centers[chosen[rows, cols]]

    slot = np.repeat(np.arange(ncc)[None, :], m, axis=0).repeat(B, axis=1)  # (m, L)
    slot = rng.permuted(slot, axis=1)
    rows = np.arange(m)[:, None]
    ctx_centers = center_of(rows, slot)                       # (m, L, n)
    ctx_labels = label_of(rows, slot)                         # (m, L)

    if query_mode == "in_context":
        q_slot = rng.integers(0, ncc, size=m)
        q_centers = center_of(np.arange(m), q_slot)
        q_labels = label_of(np.arange(m), q_slot)
        q_cluster = chosen[np.arange(m), q_slot]
    elif query_mode == "held_out":
        # IWL probe: the query's cluster never appears in the context
        k = mixture.centers.shape[0]
        if k <= ncc:
            raise ContractError("held-out query needs more clusters than the context holds")
        q_cluster = rng.integers(0, k, size=m)
        while True:
            clash = (q_cluster[:, None] == chosen).any(axis=1)
            if not clash.any():
                break
            q_cluster[clash] = rng.integers(0, k, size=int(clash.sum()))
        q_centers = mixture.centers[q_cluster]
        q_labels = mixture.cluster_labels[q_cluster]
    else:
        raise ContractError(f"unknown query mode {query_mode!r}")

    x_ctx = _cluster_points(rng, ctx_centers, spec.within_cluster, n)
    x_q = _cluster_points(rng, q_centers, spec.within_cluster, n)
    # the label alphabet stays fixed even when clusters resample per episode;
    # it is the only grounding of the C output indices
    alphas = label_alphabet(spec) if mixture is None else mixture.label_vectors

    inputs = np.zeros((m, 2 * L + 1, n))
    inputs[:, 0 : 2 * L : 2] = x_ctx
    inputs[:, 1 : 2 * L : 2] = alphas[ctx_labels]
    inputs[:, 2 * L] = x_q
    ctx_cluster = chosen[rows, slot] if mixture is not None else slot
    meta = {"context_clusters": ctx_cluster, "query_cluster": q_cluster, "context_labels": ctx_labels}
    return inputs, q_labels.astype(np.int64), meta


def _chunk_mts(spec, rng, m, radius, scrambled):
    L, n = spec.context_length, spec.n
    if n != 2:
        raise ContractError("mts is defined on the circle (n = 2)")
    theta0 = rng.uniform(0.0, 2 * np.pi, size=m)
    angles = theta0[:, None] + 2 * np.pi * np.arange(L)[None, :] / L
    context = radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    q_angle = rng.uniform(0.0, 2 * np.pi, size=m)
    query = radius * np.stack([np.cos(q_angle), np.sin(q_angle)], axis=-1)
    if scrambled:
        perm = rng.permuted(np.broadcast_to(np.arange(L), (m, L)), axis=1)
        context = context[np.arange(m)[:, None], perm]
    targets = np.argmax(np.einsum("mln,mn->ml", context, query), axis=1)
    inputs = np.concatenate([context, query[:, None, :]], axis=1)
    return inputs, targets.astype(np.int64), {}


def _chunk_sphere_oddball(spec, rng, m, d):
    L, n, box = spec.context_length, spec.n, spec.box_size
    mu = rng.uniform(-box, box, size=(m, n))
    x = mu[:, None, :] + rng.normal(size=(m, L, n))
    odd = rng.integers(0, L, size=m)
    direction = rng.normal(size=(m, n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    x[np.arange(m), odd] += d * direction
    return x, odd.astype(np.int64), {"center": mu, "direction": direction}


def _chunk_line_oddball(spec, rng, m, d):
    L, n = spec.context_length, spec.n
    # Haar-random orthogonal frame; points live in the first n-1 columns,
    # the oddball is displaced along the last one.
    gauss = rng.normal(size=(m, n, n))
    q, r = np.linalg.qr(gauss)
    q *= np.sign(np.einsum("mii->mi", r))[:, None, :]
    coords = rng.normal(size=(m, L, n - 1))
    x = np.einsum("mlk,mnk->mln", coords, q[:, :, : n - 1])
    odd = rng.integers(0, L, size=m)
    sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    perp = q[:, :, n - 1] * sign[:, None]
    x[np.arange(m), odd] += d * perp
    return x, odd.astype(np.int64), {"line_direction": q[:, :, 0], "perp_direction": perp}


def _chunk_simple_regression(spec, rng, m, beta):
    n, t = spec.n, spec.chunk_size
    x = rng.normal(size=(m, n))
    y = x @ beta + rng.normal(scale=np.sqrt(spec.noise), size=m)
    return x.reshape(m, n // t, t), y, {}


def _chunk_simple_classification(spec, rng, m, centers):
    n, t = spec.n, spec.chunk_size
    k = centers.shape[0]
    src = rng.integers(0, k, size=m)
    x = _cluster_points(rng, centers[src], spec.within_cluster, n)
    dists = np.linalg.norm(x[:, None, :] - centers[None, :, :], axis=2)
    targets = np.argmin(dists, axis=1)
    return x.reshape(m, n // t, t), targets.astype(np.int64), {"source_cluster": src}


def _chunk_same_different(spec, rng, m, half):
    size = spec.num_symbols
    lo = int(np.ceil(0.45 * m))
    hi = int(np.floor(0.55 * m))
    n_pos = int(rng.integers(lo, hi + 1))
    same = np.zeros(m, dtype=bool)
    same[:n_pos] = True
    same = rng.permuted(same)
    s1 = half[rng.integers(0, half.size, size=m)]
    s2 = half[rng.integers(0, half.size, size=m)]
    s2 = np.where(same, s1, s2)
    while True:
        bad = (~same) & (s1 == s2)
        if not bad.any():
            break
        s2[bad] = half[rng.integers(0, half.size, size=int(bad.sum()))]
    inputs = np.zeros((m, 2, size))
    inputs[np.arange(m), 0, s1] = 1.0
    inputs[np.arange(m), 1, s2] = 1.0
    return inputs, same.astype(np.int64), {"first_symbol": s1, "second_symbol": s2}


# ---------------------------------------------------------------------------
# stream assembly
# ---------------------------------------------------------------------------

def _make_chunk(spec: TaskSpec, fixed, rng, m: int, **opts):
    kind = spec.kind
    if kind == "icl_regression":
        return _chunk_icl_regression(spec, rng, m, fixed)
    if kind == "icl_classification":
        return _chunk_icl_classification(spec, rng, m, fixed, **opts)
    if kind == "mts":
        return _chunk_mts(spec, rng, m, opts.get("radius", spec.radius),
                          opts.get("scrambled", spec.scrambled))
    if kind == "sphere_oddball":
        return _chunk_sphere_oddball(spec, rng, m, opts.get("d", spec.perturb_distance))
    if kind == "line_oddball":
        return _chunk_line_oddball(spec, rng, m, opts.get("d", spec.perturb_distance))
    if kind == "simple_regression":
        return _chunk_simple_regression(spec, rng, m, fixed)
    if kind == "simple_classification":
        return _chunk_simple_classification(spec, rng, m, fixed)
    if kind == "same_different":
        return _chunk_same_different(spec, rng, m, fixed)
    raise ContractError(f"unknown task kind {kind!r}")


def default_fixed(spec: TaskSpec):
    """The per-run fixed entity each kind expects (None where stateless)."""
    kind = spec.kind
    if kind == "icl_regression":
        return sample_beta_pool(spec) if spec.pool_size is not None else None
    if kind == "icl_classification":
        return sample_mixture(spec) if spec.pool_size is not None else None
    if kind == "simple_regression":
        return sample_fixed_beta(spec)
    if kind == "simple_classification":
        return sample_fixed_centers(spec)
    if kind == "same_different":
        return split_symbols(spec).train_half
    return None


def generate(spec: TaskSpec, count: int, *, start: int = 0, stream: str = "main",
             fixed="auto", **opts) -> EpisodeBatch:
    """Episodes [start, start+count) of the named stream.

    ``fixed`` is the run-fixed entity (weight pool, mixture, ...); the
    default derives it deterministically from the spec seed.
    """
    spec.validate()
    if count < 1:
        raise ContractError("count must be >= 1")
    if isinstance(fixed, str) and fixed == "auto":
        fixed = default_fixed(spec)
    first = start // CHUNK
    last = (start + count - 1) // CHUNK
    inputs, targets, metas = [], [], []
    for ci in range(first, last + 1):
        rng = _rng(spec.seed, spec.kind, stream, ci)
        inp, tgt, meta = _make_chunk(spec, fixed, rng, CHUNK, **opts)
        lo = max(start - ci * CHUNK, 0)
        hi = min(start + count - ci * CHUNK, CHUNK)
        inputs.append(inp[lo:hi])
        targets.append(tgt[lo:hi])
        metas.append({k: v[lo:hi] for k, v in meta.items()})
    meta = {k: np.concatenate([m[k] for m in metas]) for k in metas[0]}
    return EpisodeBatch(np.concatenate(inputs), np.concatenate(targets), meta)


# ---------------------------------------------------------------------------
# spec-level generator API (Episode lists)
# ---------------------------------------------------------------------------

def gen_icl_regression(spec: TaskSpec, pool: Optional[np.ndarray] = None,
                       count: int = CHUNK) -> list[Episode]:
    if spec.pool_size is not None:
        if pool is None:
            pool = sample_beta_pool(spec)
        if len(pool) == 0:
            raise ContractError("finite mode needs a non-empty weight pool")
    return generate(spec, count, fixed=pool).episodes()


def gen_icl_classification(spec: TaskSpec, mixture: Optional[ClassMixture] = None,
                           count: int = CHUNK) -> list[Episode]:
    if spec.pool_size is not None and mixture is None:
        mixture = sample_mixture(spec)
    return generate(spec, count, fixed=mixture).episodes()


def gen_mts(spec: TaskSpec, radius: Optional[float] = None,
            scrambled: Optional[bool] = None, count: int = CHUNK) -> list[Episode]:
    opts = {}
    if radius is not None:
        opts["radius"] = radius
    if scrambled is not None:
        opts["scrambled"] = scrambled
    return generate(spec, count, **opts).episodes()


def gen_sphere_oddball(spec: TaskSpec, d: Optional[float] = None,
                       count: int = CHUNK) -> list[Episode]:
    opts = {"d": d} if d is not None else {}
    return generate(spec, count, **opts).episodes()


def gen_line_oddball(spec: TaskSpec, d: Optional[float] = None,
                     count: int = CHUNK) -> list[Episode]:
    opts = {"d": d} if d is not None else {}
    return generate(spec, count, **opts).episodes()


def gen_simple_regression(spec: TaskSpec, beta_fixed: Optional[np.ndarray] = None,
                          chunk_size: Optional[int] = None, count: int = CHUNK) -> list[Episode]:
    if chunk_size is not None:
        spec = replace(spec, chunk_size=chunk_size)
    if beta_fixed is None:
        beta_fixed = sample_fixed_beta(spec)
    return generate(spec, count, fixed=beta_fixed).episodes()


def gen_simple_classification(spec: TaskSpec, centers_fixed: Optional[np.ndarray] = None,
                              count: int = CHUNK) -> list[Episode]:
    if centers_fixed is None:
        centers_fixed = sample_fixed_centers(spec)
    return generate(spec, count, fixed=centers_fixed).episodes()


def gen_same_different(spec: TaskSpec, symbol_split: Optional[SymbolSplit] = None,
                       count: int = CHUNK, half: str = "train") -> list[Episode]:
    if symbol_split is None:
        symbol_split = split_symbols(spec)
    symbols = symbol_split.train_half if half == "train" else symbol_split.test_half
    return generate(spec, count, stream=half, fixed=symbols).episodes()


def _derangement(rng: np.random.Generator, size: int) -> np.ndarray:
    if size < 2:
        raise ContractError("derangement needs at least 2 labels")
    while True:
        perm = rng.permutation(size)
        if not np.any(perm == np.arange(size)):
            return perm


def make_classification_eval_sets(mixture: ClassMixture, spec: TaskSpec,
                                  count: int = 512) -> dict[str, list[Episode]]:
    """The three probe sets: IWL (query cluster held out of context), novel
    clusters (fresh mixture, same label alphabet), swapped labels (training
    mixture under a fixed label derangement)."""
    batches = make_classification_eval_batches(mixture, spec, count)
    return {name: batch.episodes() for name, batch in batches.items()}


def make_classification_eval_batches(mixture: ClassMixture, spec: TaskSpec,
                                     count: int = 512, eval_index: int = 0) -> dict[str, EpisodeBatch]:
    spec.validate()
    if mixture is None:
        raise ContractError("eval sets require the trained (finite) mixture")
    if spec.num_labels < 2:
        raise ContractError("label swapping needs C >= 2")

    iwl = generate(spec, count, stream=f"iwl_probe/{eval_index}", fixed=mixture,
                   query_mode="held_out")

    novel_rng = _rng(spec.seed, spec.kind, "novel_mixture", eval_index)
    k, n = mixture.centers.shape
    novel = ClassMixture(
        centers=novel_rng.normal(scale=1.0 / np.sqrt(n), size=(k, n)),
        cluster_labels=novel_rng.permutation(np.arange(k) % spec.num_labels)
        if k >= spec.num_labels else novel_rng.permutation(spec.num_labels)[:k],
        label_vectors=mixture.label_vectors,
    )
    novel_batch = generate(spec, count, stream=f"novel_clusters/{eval_index}", fixed=novel)

    swap_rng = _rng(spec.seed, spec.kind, "label_swap")
    perm = _derangement(swap_rng, spec.num_labels)
    swapped = ClassMixture(
        centers=mixture.centers,
        cluster_labels=perm[mixture.cluster_labels],
        label_vectors=mixture.label_vectors,
    )
    swapped_batch = generate(spec, count, stream=f"swapped_labels/{eval_index}", fixed=swapped)

    return {"iwl_probe": iwl, "novel_clusters": novel_batch, "swapped_labels": swapped_batch}
