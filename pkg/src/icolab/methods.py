"""Few-shot adaptation methods over a frozen transformer.

Two families share one optimization loop:

* context tuning ("ct-prompt", "ct-kv" and the parameter-efficient
  "ct-v" / "ct-prefix" variants) initializes the trainable context from the
  demonstration pairs themselves and refines it with leave-one-out masking
  and token dropout;
* classical prompt/prefix tuning ("prompt-tuning", "prefix-tuning")
  optimizes a fresh m-token context with no pair provenance, so
  leave-one-out masking does not apply to it.

Test-time training ("ttt") instead updates low-rank adapters on literal
leave-one-out permutations of the demonstrations, and "ttt+ct-kv" runs
context tuning on top of the adapted model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .model import (
    AdapterSet,
    AttentionMask,
    Context,
    KVPrefix,
    ModelConfig,
    ModelWeights,
    SoftPrompt,
    capture_kv,
    context_parts,
    context_segment_map,
    lora_param_count,
    lora_parameters,
    make_lora_adapters,
    sequence_nll,
)
from .optim import Adam
from .rng import RngStream
from .tensor import (
    ContractViolation,
    GradientTape,
    NonFiniteError,
    Tensor,
    add,
    gelu,
    index_select,
    matmul,
    reshape,
    transpose,
)

log = logging.getLogger(__name__)

__all__ = [
    "DemonstrationSet",
    "AdaptConfig",
    "AdaptResult",
    "FisherEstimate",
    "METHOD_DEFAULTS",
    "CONTEXT_METHODS",
    "ALL_METHODS",
    "init_ct_prompt",
    "init_ct_kv",
    "init_baseline",
    "loo_mask",
    "token_dropout",
    "adapt_context",
    "adapt_ttt",
    "compose_ttt_ctkv",
    "fisher_estimate",
    "make_ct_v",
    "make_ct_prefix",
    "count_trainable_params",
    "census_trainable_params",
    "MLPPrefixParameterization",
]

CONTEXT_METHODS = ("ct-prompt", "ct-kv", "ct-v", "ct-prefix", "prompt-tuning", "prefix-tuning")
ALL_METHODS = CONTEXT_METHODS + ("icl", "ttt", "ttt+ct-kv")

MLP_HIDDEN = 512
CT_PREFIX_NOISE_STD = 0.02


@dataclass
class DemonstrationSet:
    """Ordered demonstration pairs; their concatenation is the context."""

    pairs: list[tuple[np.ndarray, np.ndarray]]
    separator: Optional[int] = None

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise ContractViolation("DemonstrationSet: need at least one pair")
        norm = []
        for x, y in self.pairs:
            x = np.asarray(x, dtype=int)
            y = np.asarray(y, dtype=int)
            if y.size == 0:
                raise ContractViolation("DemonstrationSet: empty target in a pair")
            norm.append((x, y))
        self.pairs = norm

    @property
    def k(self) -> int:
        return len(self.pairs)

    def pair_tokens(self, i: int) -> np.ndarray:
        """Tokens of pair i (1-based) as rendered inside the context."""
        x, y = self.pairs[i - 1]
        chunks = [x, y]
        if self.separator is not None:
            chunks.append(np.array([self.separator]))
        return np.concatenate(chunks)

    def context_tokens(self) -> np.ndarray:
        return np.concatenate([self.pair_tokens(i) for i in range(1, self.k + 1)])

    def segment_map(self) -> np.ndarray:
        """Pair index per context token; a separator belongs to the pair before it."""
        return np.concatenate([
            np.full(self.pair_tokens(i).size, i, dtype=int) for i in range(1, self.k + 1)
        ])

    def subset(self, indices: Sequence[int]) -> "DemonstrationSet":
        return DemonstrationSet([self.pairs[j] for j in indices], separator=self.separator)


@dataclass
class AdaptConfig:
    """Knobs for one adaptation run; `rng` feeds every stochastic choice."""

    method: str
    learning_rate: float = 1e-3
    iterations: int = 40
    p_drop: float = 0.0
    leave_one_out: bool = True
    init_scheme: Optional[str] = None
    m: int = 32
    lora_rank: int = 8
    batch_policy: str = "full"
    score_reduction: str = "mean"
    rng: Optional[RngStream] = None

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ContractViolation(f"unknown method {self.method!r}")
        if self.init_scheme is None:
            self.init_scheme = ("random-token"
                                if self.method in ("prompt-tuning", "prefix-tuning")
                                else "demo-tokens")
        if not (0.0 <= self.p_drop < 1.0):
            raise ContractViolation(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.iterations < 0:
            raise ContractViolation("iterations must be >= 0")
        if self.iterations > 0 and self.learning_rate <= 0:
            raise ContractViolation("learning rate must be positive when iterations > 0")

    def stream(self, name: str) -> RngStream:
        if self.rng is None:
            raise ContractViolation("AdaptConfig.rng is required for stochastic steps")
        return self.rng.split(name)


# Desk-scale per-method defaults (learning rate, iterations, dropout, masking).
METHOD_DEFAULTS: dict[str, dict] = {
    "icl": dict(learning_rate=1e-3, iterations=0, p_drop=0.0, leave_one_out=False),
    "ct-prompt": dict(learning_rate=1e-3, iterations=40, p_drop=0.05, leave_one_out=True),
    "ct-kv": dict(learning_rate=1e-3, iterations=40, p_drop=0.05, leave_one_out=True),
    "ct-v": dict(learning_rate=1e-3, iterations=40, p_drop=0.05, leave_one_out=True),
    "ct-prefix": dict(learning_rate=5e-2, iterations=40, p_drop=0.05, leave_one_out=True),
    "prompt-tuning": dict(learning_rate=3e-3, iterations=60, p_drop=0.0,
                          leave_one_out=False, init_scheme="random-token", m=32),
    "prefix-tuning": dict(learning_rate=3e-3, iterations=60, p_drop=0.0,
                          leave_one_out=False, init_scheme="random-token", m=32),
    "ttt": dict(learning_rate=1e-4, iterations=120, p_drop=0.0, leave_one_out=False,
                lora_rank=8),
    "ttt+ct-kv": dict(learning_rate=3e-4, iterations=10, p_drop=0.05, leave_one_out=True),
}


def default_config(method: str, **overrides) -> AdaptConfig:
    base = dict(METHOD_DEFAULTS.get(method, {}))
    base.update(overrides)
    return AdaptConfig(method=method, **base)


@dataclass
class MLPPrefixParameterization:
    """Prefix re-parameterized as seed rows pushed through a two-layer network.

    Every optimization step re-materializes the per-layer key/value rows from
    the trainable seed and network weights.
    """

    seed: Tensor        # (m, d_model)
    w_in: Tensor        # (d_model, hidden)
    w_out: Tensor       # (hidden, 2 * n_layers * d_model)
    n_layers: int
    n_heads: int
    d_head: int
    segment_map: np.ndarray = field(default=None)
    position_base: np.ndarray = field(default=None)

    def __post_init__(self):
        m = self.seed.shape[0]
        if self.segment_map is None:
            self.segment_map = np.zeros(m, dtype=int)
        if self.position_base is None:
            self.position_base = np.arange(m)

    @property
    def m(self) -> int:
        return self.seed.shape[0]

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in (self.seed, self.w_in, self.w_out) if t.requires_grad]

    def materialize(self) -> KVPrefix:
        m = self.m
        d = self.n_heads * self.d_head
        hidden = matmul(gelu(matmul(self.seed, self.w_in)), self.w_out)
        # (m, L, 2, H, dh) -> (L, 2, H, m, dh)
        stacked = transpose(reshape(hidden, (m, self.n_layers, 2, self.n_heads, self.d_head)),
                            (1, 2, 3, 0, 4))
        keys, values = [], []
        for layer in range(self.n_layers):
            block = reshape(index_select(stacked, np.array([layer]), 0),
                            (2, self.n_heads, m, self.d_head))
            keys.append(reshape(index_select(block, np.array([0]), 0),
                                (self.n_heads, m, self.d_head)))
            values.append(reshape(index_select(block, np.array([1]), 0),
                                  (self.n_heads, m, self.d_head)))
        return KVPrefix(keys=keys, values=values,
                        segment_map=self.segment_map, position_base=self.position_base)


ContextRepresentation = Union[SoftPrompt, KVPrefix, list, MLPPrefixParameterization]


def context_trainables(context: ContextRepresentation) -> list[Tensor]:
    if isinstance(context, MLPPrefixParameterization):
        return context.trainable_tensors()
    _, parts = context_parts(context)
    out: list[Tensor] = []
    for p in parts:
        out.extend(p.trainable_tensors())
    return out


def census_trainable_params(context: Optional[ContextRepresentation] = None,
                            adapters: Optional[AdapterSet] = None) -> int:
    """Live count of gradient-carrying parameters for a method instance."""
    total = 0
    if context is not None:
        total += sum(t.size for t in context_trainables(context))
    if adapters is not None:
        total += sum(t.size for t in lora_parameters(adapters) if t.requires_grad)
    return total


# ---------------------------------------------------------------------------
# Initialization


def init_ct_prompt(weights: ModelWeights, config: ModelConfig,
                   demos: DemonstrationSet) -> SoftPrompt:
    """Soft prompt equal to the embedding rows of the demonstration context."""
    tokens = demos.context_tokens()
    if tokens.size > config.max_seq_len:
        raise ContractViolation(
            f"context of {tokens.size} tokens exceeds max_seq_len {config.max_seq_len}")
    return SoftPrompt(
        matrix=Tensor(weights.embedding.data[tokens].copy(), requires_grad=True),
        segment_map=demos.segment_map(),
        position_base=np.arange(tokens.size),
    )


def init_ct_kv(weights: ModelWeights, config: ModelConfig, demos: DemonstrationSet,
               adapters: Optional[AdapterSet] = None) -> KVPrefix:
    """Trainable per-layer key/value prefix captured from the demonstration context."""
    tokens = demos.context_tokens()
    if tokens.size > config.max_seq_len:
        raise ContractViolation(
            f"context of {tokens.size} tokens exceeds max_seq_len {config.max_seq_len}")
    prefix = capture_kv(weights, config, tokens, adapters=adapters,
                        segment_map=demos.segment_map())
    prefix.set_trainable(True, True)
    return prefix


def init_baseline(weights: ModelWeights, config: ModelConfig, kind: str, scheme: str,
                  m: int, rng: RngStream) -> ContextRepresentation:
    """Fresh m-token context with no pair provenance.

    Schemes: "random-token" samples rows of the embedding table (prompts use
    the rows directly; prefixes capture the model's keys/values on the
    sampled tokens), "uniform" draws every entry from U[-0.5, 0.5], and
    "mlp" (prefix only) builds the two-layer reparameterization.
    """
    if m <= 0:
        raise ContractViolation("init_baseline: m must be positive")
    if kind not in ("prompt", "prefix"):
        raise ContractViolation(f"init_baseline: unknown kind {kind!r}")
    if scheme == "mlp" and kind != "prefix":
        raise ContractViolation("init_baseline: mlp scheme applies to prefixes only")
    d = config.d_model
    zeros = np.zeros(m, dtype=int)
    positions = np.arange(m)

    if kind == "prompt":
        if scheme == "random-token":
            ids = rng.integers(0, config.vocab_size, size=m)
            matrix = weights.embedding.data[ids].copy()
        elif scheme == "uniform":
            matrix = rng.uniform(-0.5, 0.5, size=(m, d))
        else:
            raise ContractViolation(f"init_baseline: unknown scheme {scheme!r}")
        return SoftPrompt(Tensor(matrix, requires_grad=True), zeros, positions)

    if scheme == "random-token":
        ids = rng.integers(0, config.vocab_size, size=m)
        prefix = capture_kv(weights, config, ids)
        prefix.set_trainable(True, True)
        return prefix
    if scheme == "uniform":
        shape = (config.n_heads, m, config.d_head)
        return KVPrefix(
            keys=[Tensor(rng.uniform(-0.5, 0.5, size=shape), requires_grad=True)
                  for _ in range(config.n_layers)],
            values=[Tensor(rng.uniform(-0.5, 0.5, size=shape), requires_grad=True)
                    for _ in range(config.n_layers)],
            segment_map=zeros, position_base=positions)
    if scheme == "mlp":
        return MLPPrefixParameterization(
            seed=Tensor(rng.normal(0.0, 0.02, size=(m, d)), requires_grad=True),
            w_in=Tensor(rng.normal(0.0, 0.02, size=(d, MLP_HIDDEN)), requires_grad=True),
            w_out=Tensor(rng.normal(0.0, 0.02, size=(MLP_HIDDEN, 2 * config.n_layers * d)),
                         requires_grad=True),
            n_layers=config.n_layers, n_heads=config.n_heads, d_head=config.d_head)
    raise ContractViolation(f"init_baseline: unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Masks


def _segment_map_of(context: ContextRepresentation) -> np.ndarray:
    if isinstance(context, MLPPrefixParameterization):
        return np.asarray(context.segment_map)
    return context_segment_map(context)


def _base_mask_of(context: ContextRepresentation, n_tokens: int) -> AttentionMask:
    if isinstance(context, MLPPrefixParameterization):
        return AttentionMask.for_kv_prefix(context.m, n_tokens)
    return AttentionMask.for_context(context, n_tokens)


def loo_mask(context: ContextRepresentation, i: int, n_tokens: int,
             allow_single_pair: bool = False) -> AttentionMask:
    """Visibility mask hiding every prefix token of demonstration pair i."""
    segment = _segment_map_of(context)
    k = int(segment.max()) if segment.size else 0
    if not (1 <= i <= k):
        raise ContractViolation(f"loo_mask: pair index {i} out of range 1..{k}")
    if k == 1 and not allow_single_pair:
        raise ContractViolation(
            "loo_mask: masking the only pair leaves an empty effective context; "
            "disable leave-one-out for single-pair tasks")
    return _base_mask_of(context, n_tokens).hide_prefix(np.flatnonzero(segment == i))


def token_dropout(mask: AttentionMask, p_drop: float, rng: RngStream) -> AttentionMask:
    """Independently hide each currently visible prefix token with probability p_drop."""
    if not (0.0 <= p_drop < 1.0):
        raise ContractViolation(f"token_dropout: p_drop must be in [0, 1), got {p_drop}")
    if p_drop == 0.0:
        return mask
    candidates = mask.visible_prefix_tokens()
    if candidates.size == 0:
        return mask
    drops = candidates[rng.uniform(size=candidates.size) < p_drop]
    if drops.size == 0:
        return mask
    return mask.hide_prefix(drops)


def _step_mask(context, i: int, n_tokens: int, use_loo: bool,
               p_drop: float, rng: Optional[RngStream]) -> AttentionMask:
    if use_loo:
        segment = _segment_map_of(context)
        base = _base_mask_of(context, n_tokens).hide_prefix(np.flatnonzero(segment == i))
    else:
        base = _base_mask_of(context, n_tokens)
    if p_drop > 0.0:
        base = token_dropout(base, p_drop, rng)
    return base


# ---------------------------------------------------------------------------
# Adaptation loops


@dataclass
class AdaptResult:
    method: str
    context: Optional[ContextRepresentation]
    adapters: Optional[AdapterSet]
    loss_trace: list[float]
    wall_time: float
    trainable_params: int
    flags: dict = field(default_factory=dict)


def _build_context(weights, config, demos, acfg) -> ContextRepresentation:
    method = acfg.method
    if method == "ct-prompt":
        return init_ct_prompt(weights, config, demos)
    if method == "ct-kv":
        return init_ct_kv(weights, config, demos)
    if method == "ct-v":
        return make_ct_v(init_ct_kv(weights, config, demos))
    if method == "ct-prefix":
        base = init_ct_kv(weights, config, demos)
        base.set_trainable(False, False)
        fresh = make_ct_prefix(base, acfg.m, acfg.stream("ct-prefix-init"))
        return [base, fresh]
    if method == "prompt-tuning":
        return init_baseline(weights, config, "prompt", acfg.init_scheme, acfg.m,
                             acfg.stream("baseline-init"))
    if method == "prefix-tuning":
        return init_baseline(weights, config, "prefix", acfg.init_scheme, acfg.m,
                             acfg.stream("baseline-init"))
    raise ContractViolation(f"_build_context: {method!r} is not a context method")


def adapt_context(weights: ModelWeights, config: ModelConfig, demos: DemonstrationSet,
                  acfg: AdaptConfig, adapters: Optional[AdapterSet] = None,
                  context: Optional[ContextRepresentation] = None) -> AdaptResult:
    """Optimize a context representation on the summed per-pair loss.

    Each step accumulates, over every pair i, the negative log-likelihood of
    y_i given [context; x_i] with pair i's own prefix tokens masked out
    (when the context has pair provenance and masking is enabled) and the
    per-step dropout mask applied. Model weights receive no updates.
    """
    if acfg.method not in CONTEXT_METHODS:
        raise ContractViolation(f"adapt_context: {acfg.method!r} is not a context method")
    start = time.perf_counter()
    if context is None:
        context = _build_context(weights, config, demos, acfg)

    has_provenance = _segment_map_of(context).max(initial=0) > 0
    use_loo = acfg.leave_one_out and has_provenance
    if acfg.leave_one_out and has_provenance and demos.k == 1:
        raise ContractViolation(
            "adapt_context: leave-one-out with a single pair leaves an empty "
            "effective context; disable it explicitly for k=1")

    trainables = context_trainables(context)
    n_params = census_trainable_params(context=context)
    trace: list[float] = []

    if acfg.iterations > 0:
        if not trainables:
            raise ContractViolation("adapt_context: context has no trainable tensors")
        opt = Adam(trainables, acfg.learning_rate, acfg.iterations)
        drop_rng = acfg.stream("token-dropout") if acfg.p_drop > 0 else None
        for t in range(acfg.iterations):
            try:
                with GradientTape() as tape:
                    total = None
                    materialized = (context.materialize()
                                    if isinstance(context, MLPPrefixParameterization) else None)
                    fwd_context = materialized if materialized is not None else context
                    for i in range(1, demos.k + 1):
                        x_i, y_i = demos.pairs[i - 1]
                        n_tok = x_i.size + y_i.size
                        mask = _step_mask(fwd_context, i, n_tok, use_loo,
                                          acfg.p_drop, drop_rng)
                        loss, _ = sequence_nll(weights, config, fwd_context, x_i, y_i,
                                               adapters=adapters, mask=mask)
                        total = loss if total is None else add(total, loss)
                tape.backward(total)
                opt.step()
                opt.zero_grad()
            except NonFiniteError as err:
                raise NonFiniteError(f"adapt_context: diverged at iteration {t}: {err}")
            trace.append(float(total.data))

    return AdaptResult(
        method=acfg.method, context=context, adapters=adapters, loss_trace=trace,
        wall_time=time.perf_counter() - start, trainable_params=n_params,
    )


def adapt_ttt(weights: ModelWeights, config: ModelConfig, demos: DemonstrationSet,
              acfg: AdaptConfig) -> AdaptResult:
    """Fit low-rank adapters on leave-one-out permutations of the demonstrations.

    Each step draws a pair i and a fresh permutation of the remaining pairs,
    rendered as literal tokens before x_i; only the adapter factors train.
    Inference afterward conditions on the full demonstration context.
    """
    if acfg.method != "ttt":
        raise ContractViolation("adapt_ttt: config.method must be 'ttt'")
    start = time.perf_counter()
    adapters = make_lora_adapters(config, acfg.lora_rank, acfg.stream("lora-init"))
    params = lora_parameters(adapters)
    n_params = lora_param_count(adapters)
    flags = {}
    if demos.k == 1:
        log.warning("adapt_ttt: single demonstration pair; training with empty context")
        flags["zero_context_finetune"] = True

    trace: list[float] = []
    if acfg.iterations > 0:
        opt = Adam(params, acfg.learning_rate, acfg.iterations)
        sample_rng = acfg.stream("ttt-sampling")
        for t in range(acfg.iterations):
            i = int(sample_rng.integers(1, demos.k + 1))
            others = [j for j in range(demos.k) if j != i - 1]
            perm = [others[p] for p in sample_rng.permutation(len(others))] if others else []
            x_i, y_i = demos.pairs[i - 1]
            if perm:
                ctx_tokens = demos.subset(perm).context_tokens()
                inp = np.concatenate([ctx_tokens, x_i])
            else:
                inp = x_i
            try:
                with GradientTape() as tape:
                    loss, _ = sequence_nll(weights, config, None, inp, y_i,
                                           adapters=adapters)
                tape.backward(loss)
                opt.step()
                opt.zero_grad()
            except NonFiniteError as err:
                raise NonFiniteError(f"adapt_ttt: diverged at iteration {t}: {err}")
            trace.append(float(loss.data))

    return AdaptResult(
        method="ttt", context=None, adapters=adapters, loss_trace=trace,
        wall_time=time.perf_counter() - start, trainable_params=n_params, flags=flags,
    )


def compose_ttt_ctkv(weights: ModelWeights, config: ModelConfig, demos: DemonstrationSet,
                     ttt_cfg: AdaptConfig, ct_cfg: AdaptConfig) -> AdaptResult:
    """TTT first, then context tuning of a prefix captured from the adapted model."""
    ttt_result = adapt_ttt(weights, config, demos, ttt_cfg)
    prefix = init_ct_kv(weights, config, demos, adapters=ttt_result.adapters)
    ct_like = replace(ct_cfg, method="ct-kv")
    ct_result = adapt_context(weights, config, demos, ct_like,
                              adapters=ttt_result.adapters, context=prefix)
    return AdaptResult(
        method="ttt+ct-kv",
        context=ct_result.context,
        adapters=ttt_result.adapters,
        loss_trace=ttt_result.loss_trace + ct_result.loss_trace,
        wall_time=ttt_result.wall_time + ct_result.wall_time,
        trainable_params=ttt_result.trainable_params + ct_result.trainable_params,
        flags={**ttt_result.flags, **ct_result.flags},
    )


# ---------------------------------------------------------------------------
# Parameter-importance analysis and parameter-efficient variants


@dataclass
class FisherEstimate:
    f_k: float
    f_v: float
    per_layer_k: list[float]
    per_layer_v: list[float]


def fisher_estimate(weights: ModelWeights, config: ModelConfig, context: KVPrefix,
                    demos: DemonstrationSet, adapters: Optional[AdapterSet] = None,
                    use_loo: bool = False) -> FisherEstimate:
    """Mean squared log-likelihood gradient of the prefix over the k pairs.

    Computed at the raw initialization: no dropout, and no leave-one-out
    unless `use_loo` is set.
    """
    if demos.k == 0:
        raise ContractViolation("fisher_estimate: empty demonstration set")
    if not isinstance(context, KVPrefix):
        raise ContractViolation("fisher_estimate: context must be a KVPrefix")
    acc_k = [np.zeros_like(t.data) for t in context.keys]
    acc_v = [np.zeros_like(t.data) for t in context.values]
    for i in range(1, demos.k + 1):
        x_i, y_i = demos.pairs[i - 1]
        mask = None
        if use_loo:
            mask = loo_mask(context, i, x_i.size + y_i.size, allow_single_pair=True)
        with GradientTape() as tape:
            loss, _ = sequence_nll(weights, config, context, x_i, y_i,
                                   adapters=adapters, mask=mask)
        tape.backward(loss)
        for li in range(context.n_layers):
            if context.keys[li].grad is not None:
                acc_k[li] += context.keys[li].grad ** 2
            if context.values[li].grad is not None:
                acc_v[li] += context.values[li].grad ** 2
    per_layer_k = [float(a.mean()) / demos.k for a in acc_k]
    per_layer_v = [float(a.mean()) / demos.k for a in acc_v]
    return FisherEstimate(
        f_k=float(np.mean([a.mean() for a in acc_k]) / demos.k),
        f_v=float(np.mean([a.mean() for a in acc_v]) / demos.k),
        per_layer_k=per_layer_k,
        per_layer_v=per_layer_v,
    )


def make_ct_v(context: KVPrefix) -> KVPrefix:
    """Freeze the prefix keys, leaving only the values trainable."""
    context.set_trainable(keys=False, values=True)
    return context


def make_ct_prefix(context: KVPrefix, m: int, rng: RngStream,
                   noise_std: float = CT_PREFIX_NOISE_STD) -> KVPrefix:
    """New m-token trainable prefix at the token-mean of the captured one.

    The fresh tokens sit right after the frozen prefix positions; the model
    conditions on [frozen capture; trainable prefix].
    """
    if m < 1:
        raise ContractViolation("make_ct_prefix: m must be >= 1")
    start = int(context.position_base.max()) + 1 if context.position_base.size else 0
    keys, values = [], []
    for li in range(context.n_layers):
        k_mean = context.keys[li].data.mean(axis=1, keepdims=True)
        v_mean = context.values[li].data.mean(axis=1, keepdims=True)
        shape = (k_mean.shape[0], m, k_mean.shape[2])
        keys.append(Tensor(np.broadcast_to(k_mean, shape)
                           + rng.normal(0.0, noise_std, size=shape), requires_grad=True))
        values.append(Tensor(np.broadcast_to(v_mean, shape)
                             + rng.normal(0.0, noise_std, size=shape), requires_grad=True))
    return KVPrefix(keys=keys, values=values,
                    segment_map=np.zeros(m, dtype=int),
                    position_base=start + np.arange(m))


# ---------------------------------------------------------------------------
# Trainable-parameter accounting


def count_trainable_params(method: str, config: ModelConfig,
                           demos: Optional[DemonstrationSet] = None,
                           m: Optional[int] = None,
                           lora_rank: Optional[int] = None,
                           lora_targets: int = 4) -> int:
    """Closed-form trainable-parameter count for each method tag."""
    d, n_layers = config.d_model, config.n_layers
    n_ctx = demos.context_tokens().size if demos is not None else None

    def need_ctx():
        if n_ctx is None:
            raise ContractViolation(f"count_trainable_params: {method} needs demos")
        return n_ctx

    def need_m():
        if m is None:
            raise ContractViolation(f"count_trainable_params: {method} needs m")
        return m

    def ttt_count():
        if lora_rank is None:
            raise ContractViolation("count_trainable_params: ttt needs lora_rank")
        return lora_targets * n_layers * lora_rank * (d + d)

    if method == "icl":
        return 0
    if method == "prompt-tuning":
        return need_m() * d
    if method == "ct-prompt":
        return need_ctx() * d
    if method == "prefix-tuning":
        return 2 * n_layers * need_m() * d
    if method == "ct-kv":
        return 2 * n_layers * need_ctx() * d
    if method == "ct-v":
        return n_layers * need_ctx() * d
    if method == "ct-prefix":
        return 2 * n_layers * need_m() * d
    if method == "ttt":
        return ttt_count()
    if method == "ttt+ct-kv":
        return ttt_count() + 2 * n_layers * need_ctx() * d
    raise ContractViolation(f"count_trainable_params: unknown method {method!r}")
