"""Decoder-only transformer with injectable context and boolean attention masks.

The attention stack accepts three kinds of external context:

* nothing: a vanilla causal forward over the token sequence;
* a soft prompt: trainable embedding rows prepended to the embedded input,
  which generate queries, keys and values like real tokens;
* one or more key/value prefixes: trainable per-layer key and value rows
  prepended to each layer's attention lists, which generate no queries.

Rotary positions are applied when queries and keys are computed. Prefix
tokens permanently carry the positions at which they were encoded
(`position_base`); the token sequence is positioned after the prefix, and
masking a token never re-indexes the survivors. Masked positions receive a
large finite negative score, which underflows to exactly zero attention
weight after softmax, so masking a token is numerically equivalent to
deleting its key/value rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .rng import RngStream
from .tensor import (
    ContractViolation,
    Tensor,
    add,
    concat,
    cross_entropy,
    embedding_lookup,
    gelu,
    index_select,
    masked_fill,
    matmul,
    mul,
    reshape,
    rmsnorm,
    rope,
    scale,
    softmax,
    sum_all,
    transpose,
)

__all__ = [
    "ModelConfig",
    "LayerWeights",
    "ModelWeights",
    "SoftPrompt",
    "KVPrefix",
    "AttentionMask",
    "LoRAAdapter",
    "AttnCounter",
    "init_weights",
    "make_lora_adapters",
    "lora_param_count",
    "forward_lm",
    "forward_lm_batch",
    "capture_kv",
    "greedy_decode",
    "score_options",
    "sequence_nll",
]

FFN_EXPANSION = 4
LORA_TARGETS = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    max_seq_len: int
    positional: str = "rotary"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractViolation(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.positional != "rotary":
            raise ContractViolation(f"unknown positional scheme {self.positional!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq_len": self.max_seq_len,
            "positional": self.positional,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w1: Tensor
    w2: Tensor


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    unembedding: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for name in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2"):
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "final_norm", self.final_norm
        yield "unembedding", self.unembedding

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}


def init_weights(config: ModelConfig, rng: RngStream, std: float = 0.02) -> ModelWeights:
    """Fresh weights, residual output projections scaled down by sqrt(2L)."""
    d = config.d_model
    out_std = std / math.sqrt(2 * config.n_layers)

    def mat(rows, cols, s):
        return Tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad=False)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            attn_norm=Tensor(np.ones(d), requires_grad=False),
            wq=mat(d, d, std), wk=mat(d, d, std), wv=mat(d, d, std),
            wo=mat(d, d, out_std),
            ffn_norm=Tensor(np.ones(d), requires_grad=False),
            w1=mat(d, FFN_EXPANSION * d, std),
            w2=mat(FFN_EXPANSION * d, d, out_std),
        ))
    return ModelWeights(
        config=config,
        embedding=mat(config.vocab_size, d, std),
        layers=layers,
        final_norm=Tensor(np.ones(d), requires_grad=False),
        unembedding=mat(d, config.vocab_size, std),
    )


# ---------------------------------------------------------------------------
# Context representations


@dataclass
class KVPrefix:
    """Per-layer key/value rows prepended to attention, one row set per token.

    `keys[j]` and `values[j]` are (n_heads, m, d_head). `segment_map` ties
    each of the m tokens to the demonstration pair it came from (0 for
    tokens with no pair provenance, such as separators or synthetic rows);
    `position_base` records the rotary positions baked into the keys.
    """

    keys: list[Tensor]
    values: list[Tensor]
    segment_map: np.ndarray
    position_base: np.ndarray

    def __post_init__(self):
        m = self.m
        if any(k.shape[1] != m for k in self.keys) or any(v.shape[1] != m for v in self.values):
            raise ContractViolation("KVPrefix: all layers must share the token count")
        if len(self.segment_map) != m or len(self.position_base) != m:
            raise ContractViolation("KVPrefix: segment_map/position_base length mismatch")

    @property
    def m(self) -> int:
        return self.keys[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.keys + self.values if t.requires_grad]

    def set_trainable(self, keys: bool, values: bool) -> None:
        for t in self.keys:
            t.requires_grad = keys
        for t in self.values:
            t.requires_grad = values

    def subset(self, keep_idx: np.ndarray) -> "KVPrefix":
        """Prefix restricted to `keep_idx` tokens; gradients flow back to this one."""
        keep_idx = np.asarray(keep_idx)
        return KVPrefix(
            keys=[index_select(k, keep_idx, axis=1) for k in self.keys],
            values=[index_select(v, keep_idx, axis=1) for v in self.values],
            segment_map=self.segment_map[keep_idx],
            position_base=self.position_base[keep_idx],
        )

    def copy(self) -> "KVPrefix":
        return KVPrefix(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            segment_map=self.segment_map.copy(),
            position_base=self.position_base.copy(),
        )


@dataclass
class SoftPrompt:
    """Trainable embedding rows prepended to the model input."""

    matrix: Tensor
    segment_map: np.ndarray
    position_base: np.ndarray

    def __post_init__(self):
        if len(self.segment_map) != self.m or len(self.position_base) != self.m:
            raise ContractViolation("SoftPrompt: segment_map/position_base length mismatch")

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def trainable_tensors(self) -> list[Tensor]:
        return [self.matrix] if self.matrix.requires_grad else []

    def subset(self, keep_idx: np.ndarray) -> "SoftPrompt":
        keep_idx = np.asarray(keep_idx)
        return SoftPrompt(
            matrix=index_select(self.matrix, keep_idx, axis=0),
            segment_map=self.segment_map[keep_idx],
            position_base=self.position_base[keep_idx],
        )

    def copy(self) -> "SoftPrompt":
        return SoftPrompt(self.matrix.copy(), self.segment_map.copy(), self.position_base.copy())


Context = Union[SoftPrompt, KVPrefix, Sequence[KVPrefix], None]


def context_parts(context: Context) -> tuple[str, list]:
    """Normalize a context into ("none"|"prompt"|"kv", parts)."""
    if context is None:
        return "none", []
    if isinstance(context, SoftPrompt):
        return "prompt", [context]
    if isinstance(context, KVPrefix):
        return "kv", [context]
    parts = list(context)
    if not parts or not all(isinstance(p, KVPrefix) for p in parts):
        raise ContractViolation("context must be a SoftPrompt, KVPrefix, or list of KVPrefix")
    return "kv", parts


def context_segment_map(context: Context) -> np.ndarray:
    _, parts = context_parts(context)
    if not parts:
        return np.zeros(0, dtype=int)
    return np.concatenate([np.asarray(p.segment_map) for p in parts])


def context_token_count(context: Context) -> int:
    kind, parts = context_parts(context)
    return sum(p.m for p in parts)


# ---------------------------------------------------------------------------
# Attention masks


class AttentionMask:
    """Boolean visibility of key columns per query row.

    Rows are query positions; columns are prefix tokens (first `n_prefix`)
    followed by the token sequence. Causality over the token sequence is
    built in. Hiding a prefix token clears its column for every row; when
    prefix tokens are themselves query rows (soft prompts), a hidden
    token's own diagonal entry is kept so its softmax row stays defined.
    Its output is never read by any surviving position.
    """

    def __init__(self, visible: np.ndarray, n_prefix: int, prefix_rows: bool):
        self.visible = np.asarray(visible, dtype=bool)
        self.n_prefix = int(n_prefix)
        self.prefix_rows = bool(prefix_rows)
        self._hidden = np.zeros(self.n_prefix, dtype=bool)

    @staticmethod
    def full_causal(n_tokens: int) -> "AttentionMask":
        return AttentionMask(np.tril(np.ones((n_tokens, n_tokens), dtype=bool)), 0, False)

    @staticmethod
    def for_kv_prefix(n_prefix: int, n_tokens: int) -> "AttentionMask":
        vis = np.zeros((n_tokens, n_prefix + n_tokens), dtype=bool)
        vis[:, :n_prefix] = True
        vis[:, n_prefix:] = np.tril(np.ones((n_tokens, n_tokens), dtype=bool))
        return AttentionMask(vis, n_prefix, False)

    @staticmethod
    def for_soft_prompt(n_prefix: int, n_tokens: int) -> "AttentionMask":
        total = n_prefix + n_tokens
        return AttentionMask(np.tril(np.ones((total, total), dtype=bool)), n_prefix, True)

    @staticmethod
    def for_context(context: Context, n_tokens: int) -> "AttentionMask":
        kind, parts = context_parts(context)
        if kind == "none":
            return AttentionMask.full_causal(n_tokens)
        m = sum(p.m for p in parts)
        if kind == "prompt":
            return AttentionMask.for_soft_prompt(m, n_tokens)
        return AttentionMask.for_kv_prefix(m, n_tokens)

    @property
    def n_queries(self) -> int:
        return self.visible.shape[0]

    @property
    def n_keys(self) -> int:
        return self.visible.shape[1]

    def hidden_prefix_tokens(self) -> np.ndarray:
        return np.flatnonzero(self._hidden)

    def visible_prefix_tokens(self) -> np.ndarray:
        return np.flatnonzero(~self._hidden)

    def hide_prefix(self, indices) -> "AttentionMask":
        """New mask with the given prefix tokens invisible to every other position."""
        indices = np.atleast_1d(np.asarray(indices, dtype=int))
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_prefix):
            raise ContractViolation(
                f"hide_prefix: index out of range [0, {self.n_prefix})")
        out = AttentionMask(self.visible.copy(), self.n_prefix, self.prefix_rows)
        out._hidden = self._hidden.copy()
        out._hidden[indices] = True
        out.visible[:, indices] = False
        if self.prefix_rows:
            out.visible[indices, indices] = True
        return out

    def blocked(self) -> np.ndarray:
        return ~self.visible


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoRAAdapter:
    """Low-rank residual on one projection: effective W = W + scaling * (A^T B^T)."""

    a: Tensor  # (rank, d_in)
    b: Tensor  # (d_out, rank)
    scaling: float = 1.0

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def param_count(self) -> int:
        return self.a.size + self.b.size


AdapterSet = dict  # (layer_index, projection_name) -> LoRAAdapter


def make_lora_adapters(config: ModelConfig, rank: int, rng: RngStream,
                       targets: Sequence[str] = LORA_TARGETS,
                       scaling: float = 1.0) -> AdapterSet:
    """Adapters on the attention projections of every layer; B starts at zero."""
    d = config.d_model
    if rank >= d:
        raise ContractViolation(f"LoRA rank {rank} must be < projection dim {d}")
    if rank < 1:
        raise ContractViolation("LoRA rank must be >= 1")
    adapters: AdapterSet = {}
    for layer in range(config.n_layers):
        for name in targets:
            adapters[(layer, name)] = LoRAAdapter(
                a=Tensor(rng.normal(0.0, 0.02, size=(rank, d)), requires_grad=True),
                b=Tensor(np.zeros((d, rank)), requires_grad=True),
                scaling=scaling,
            )
    return adapters


def lora_param_count(adapters: AdapterSet) -> int:
    return sum(ad.param_count() for ad in adapters.values())


def lora_parameters(adapters: AdapterSet) -> list[Tensor]:
    params = []
    for key in sorted(adapters.keys()):
        ad = adapters[key]
        params.extend([ad.a, ad.b])
    return params


def _project(h: Tensor, w: Tensor, adapter: Optional[LoRAAdapter]) -> Tensor:
    y = matmul(h, w)
    if adapter is not None:
        low = matmul(h, transpose(adapter.a, (1, 0)))
        up = matmul(low, transpose(adapter.b, (1, 0)))
        y = add(y, scale(up, adapter.scaling))
    return y


# ---------------------------------------------------------------------------
# Forward passes


class AttnCounter:
    """Exact query-count x key-count tallies per (layer, head)."""

    def __init__(self):
        self.counts: dict[tuple[int, int], int] = {}

    def record(self, layer: int, n_heads: int, q_len: int, k_len: int) -> None:
        for h in range(n_heads):
            key = (layer, h)
            self.counts[key] = self.counts.get(key, 0) + q_len * k_len

    def per_head_values(self) -> set[int]:
        return set(self.counts.values())

    def total(self) -> int:
        return sum(self.counts.values())

    def reset(self) -> None:
        self.counts.clear()


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    s = x.shape[0]
    return transpose(reshape(x, (s, n_heads, d_head)), (1, 0, 2))


def _merge_heads(x: Tensor, d_model: int) -> Tensor:
    s = x.shape[1]
    return reshape(transpose(x, (1, 0, 2)), (s, d_model))


def forward_lm(weights: ModelWeights, config: ModelConfig, tokens,
               context: Context = None, mask: Optional[AttentionMask] = None,
               adapters: Optional[AdapterSet] = None, positions=None,
               counters: Optional[AttnCounter] = None,
               capture: Optional[list] = None) -> Tensor:
    """Next-token logits, one row per token of `tokens`.

    With a KV prefix, the prefix rows join every layer's key/value lists
    without generating queries; with a soft prompt, the prompt rows are
    prepended to the embedded input and participate fully. `positions`
    overrides the default placement of the token sequence (which starts
    right after the highest prefix position). When `capture` is a list it
    receives one (keys, values) pair per layer for the token sequence.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ContractViolation("forward_lm: tokens must be a nonempty 1-d array")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ContractViolation("forward_lm: token id out of vocabulary")

    kind, parts = context_parts(context)
    n_tok = tokens.size
    if positions is None:
        start = 0
        for p in parts:
            if p.position_base.size:
                start = max(start, int(p.position_base.max()) + 1)
        positions = start + np.arange(n_tok)
    else:
        positions = np.asarray(positions)
        if positions.shape != (n_tok,):
            raise ContractViolation("forward_lm: positions must match token count")

    max_pos = int(positions.max())
    for p in parts:
        if p.position_base.size:
            max_pos = max(max_pos, int(p.position_base.max()))
    if max_pos >= config.max_seq_len:
        raise ContractViolation(
            f"forward_lm: position {max_pos} exceeds max_seq_len {config.max_seq_len}")

    if mask is None:
        mask = AttentionMask.for_context(context, n_tok)

    x = embedding_lookup(weights.embedding, tokens)
    row_positions = positions
    prompt_rows = 0
    if kind == "prompt":
        prompt = parts[0]
        x = concat([prompt.matrix, x], axis=0)
        row_positions = np.concatenate([np.asarray(prompt.position_base), positions])
        prompt_rows = prompt.m
        if mask.n_prefix != prompt.m or not mask.prefix_rows:
            raise ContractViolation("forward_lm: mask does not match soft-prompt layout")
    elif kind == "kv":
        m = sum(p.m for p in parts)
        if mask.n_prefix != m or mask.prefix_rows:
            raise ContractViolation("forward_lm: mask does not match kv-prefix layout")

    n_rows = x.shape[0]
    n_keys = n_rows + (sum(p.m for p in parts) if kind == "kv" else 0)
    if mask.visible.shape != (n_rows, n_keys):
        raise ContractViolation(
            f"forward_lm: mask shape {mask.visible.shape} != ({n_rows}, {n_keys})")

    blocked = mask.blocked()
    h_count, d_head = config.n_heads, config.d_head
    inv_sqrt = 1.0 / math.sqrt(d_head)

    for li, lw in enumerate(weights.layers):
        def ad(name):
            return adapters.get((li, name)) if adapters else None

        h = rmsnorm(x, lw.attn_norm)
        q = rope(_split_heads(_project(h, lw.wq, ad("wq")), h_count, d_head), row_positions)
        k_new = rope(_split_heads(_project(h, lw.wk, ad("wk")), h_count, d_head), row_positions)
        v_new = _split_heads(_project(h, lw.wv, ad("wv")), h_count, d_head)
        if capture is not None:
            capture.append((k_new, v_new))

        if kind == "kv":
            k_full = concat([p.keys[li] for p in parts] + [k_new], axis=1)
            v_full = concat([p.values[li] for p in parts] + [v_new], axis=1)
        else:
            k_full, v_full = k_new, v_new

        if counters is not None:
            counters.record(li, h_count, q.shape[1], k_full.shape[1])

        scores = scale(matmul(q, transpose(k_full, (0, 2, 1))), inv_sqrt)
        scores = masked_fill(scores, blocked)
        attn = softmax(scores)
        ctx = _merge_heads(matmul(attn, v_full), config.d_model)
        x = add(x, _project(ctx, lw.wo, ad("wo")))

        h2 = rmsnorm(x, lw.ffn_norm)
        x = add(x, matmul(gelu(matmul(h2, lw.w1)), lw.w2))

    x = rmsnorm(x, weights.final_norm)
    logits = matmul(x, weights.unembedding)
    if prompt_rows:
        logits = index_select(logits, prompt_rows + np.arange(n_tok), axis=0)
    return logits


def forward_lm_batch(weights: ModelWeights, config: ModelConfig, tokens,
                     adapters: Optional[AdapterSet] = None) -> Tensor:
    """Plain causal forward over a (batch, time) token matrix; no context support."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.size == 0:
        raise ContractViolation("forward_lm_batch: tokens must be a nonempty 2-d array")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ContractViolation("forward_lm_batch: token id out of vocabulary")
    bsz, n_tok = tokens.shape
    if n_tok > config.max_seq_len:
        raise ContractViolation("forward_lm_batch: sequence exceeds max_seq_len")
    positions = np.arange(n_tok)
    blocked = ~np.tril(np.ones((n_tok, n_tok), dtype=bool))
    h_count, d_head = config.n_heads, config.d_head
    inv_sqrt = 1.0 / math.sqrt(d_head)

    x = embedding_lookup(weights.embedding, tokens)
    for li, lw in enumerate(weights.layers):
        def ad(name):
            return adapters.get((li, name)) if adapters else None

        h = rmsnorm(x, lw.attn_norm)

        def heads(t):
            return transpose(reshape(t, (bsz, n_tok, h_count, d_head)), (0, 2, 1, 3))

        q = rope(heads(_project(h, lw.wq, ad("wq"))), positions)
        k = rope(heads(_project(h, lw.wk, ad("wk"))), positions)
        v = heads(_project(h, lw.wv, ad("wv")))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), inv_sqrt)
        attn = softmax(masked_fill(scores, blocked))
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (bsz, n_tok, config.d_model))
        x = add(x, _project(ctx, lw.wo, ad("wo")))
        h2 = rmsnorm(x, lw.ffn_norm)
        x = add(x, matmul(gelu(matmul(h2, lw.w1)), lw.w2))

    x = rmsnorm(x, weights.final_norm)
    return matmul(x, weights.unembedding)


def capture_kv(weights: ModelWeights, config: ModelConfig, tokens,
               adapters: Optional[AdapterSet] = None,
               segment_map=None) -> KVPrefix:
    """Per-layer post-rotary keys and values of a causal pass over `tokens`.

    The returned prefix holds fresh leaf tensors (not trainable yet) whose
    `position_base` is 0..len(tokens)-1, so conditioning on it reproduces
    plain in-context inference exactly.
    """
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ContractViolation("capture_kv: empty context")
    captured: list = []
    forward_lm(weights, config, tokens, adapters=adapters, capture=captured)
    if segment_map is None:
        segment_map = np.zeros(tokens.size, dtype=int)
    segment_map = np.asarray(segment_map, dtype=int)
    if segment_map.shape != (tokens.size,):
        raise ContractViolation("capture_kv: segment_map length mismatch")
    return KVPrefix(
        keys=[Tensor(k.data.copy(), requires_grad=False) for k, _ in captured],
        values=[Tensor(v.data.copy(), requires_grad=False) for _, v in captured],
        segment_map=segment_map,
        position_base=np.arange(tokens.size),
    )


def greedy_decode(weights: ModelWeights, config: ModelConfig, context: Context,
                  x_q, max_new: int, stop_token: int,
                  adapters: Optional[AdapterSet] = None) -> np.ndarray:
    """Argmax decoding from [context; x_q]; ties break toward the lowest token id.

    Returns the generated tokens, including the stop token when emitted.
    """
    if max_new < 1:
        raise ContractViolation("greedy_decode: max_new must be >= 1")
    seq = list(np.asarray(x_q))
    generated: list[int] = []
    mask = None
    for _ in range(max_new):
        tok = np.asarray(seq, dtype=int)
        mask = AttentionMask.for_context(context, tok.size)
        logits = forward_lm(weights, config, tok, context=context, mask=mask,
                            adapters=adapters)
        nxt = int(np.argmax(logits.data[-1]))
        generated.append(nxt)
        seq.append(nxt)
        if nxt == stop_token:
            break
    return np.asarray(generated, dtype=int)


def sequence_nll(weights: ModelWeights, config: ModelConfig, context: Context,
                 x_q, continuation, adapters: Optional[AdapterSet] = None,
                 mask: Optional[AttentionMask] = None,
                 positions=None, counters: Optional[AttnCounter] = None) -> tuple[Tensor, int]:
    """Summed negative log-likelihood of `continuation` given [context; x_q].

    Returns (scalar tensor, number of scored tokens). The forward runs over
    [x_q; continuation] and scores only the continuation positions.
    """
    x_q = np.asarray(x_q, dtype=int)
    continuation = np.asarray(continuation, dtype=int)
    if x_q.size == 0:
        raise ContractViolation("sequence_nll: empty input")
    if continuation.size == 0:
        raise ContractViolation("sequence_nll: empty continuation")
    tok = np.concatenate([x_q, continuation])
    logits = forward_lm(weights, config, tok, context=context, mask=mask,
                        adapters=adapters, positions=positions, counters=counters)
    rows = x_q.size - 1 + np.arange(continuation.size)
    picked = index_select(logits, rows, axis=0)
    nll = cross_entropy(picked, continuation)
    return sum_all(nll), continuation.size


def score_options(weights: ModelWeights, config: ModelConfig, context: Context,
                  x_q, options: Sequence, adapters: Optional[AdapterSet] = None,
                  reduction: str = "mean") -> tuple[int, list[float]]:
    """Pick the option whose tokens have the lowest continuation loss.

    `reduction` is "mean" (length-normalized, the default) or "sum"; ties
    resolve to the first option.
    """
    if len(options) < 2:
        raise ContractViolation("score_options: need at least two options")
    if reduction not in ("mean", "sum"):
        raise ContractViolation(f"score_options: unknown reduction {reduction!r}")
    losses = []
    for opt in options:
        opt = np.asarray(opt, dtype=int)
        if opt.size == 0:
            raise ContractViolation("score_options: empty option sequence")
        total, count = sequence_nll(weights, config, context, x_q, opt, adapters=adapters)
        value = float(total.data)
        losses.append(value / count if reduction == "mean" else value)
    return int(np.argmin(losses)), losses
