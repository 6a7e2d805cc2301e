"""Context injection: captured KV prefixes, soft prompts, masking as deletion.

Run:  python3 demos/02_transformer_and_prefixes.py
"""

import numpy as np

from icolab.model import (AttentionMask, ModelConfig, SoftPrompt, capture_kv,
                          forward_lm, init_weights)
from icolab.rng import RngStream
from icolab.tensor import Tensor

cfg = ModelConfig(vocab_size=32, d_model=32, n_layers=3, n_heads=4, max_seq_len=128)
weights = init_weights(cfg, RngStream(7).split("w"))

context = np.array([4, 9, 2, 17, 5, 11])
query = np.array([3, 8])

print("== a captured KV prefix reproduces in-context inference ==")
full = forward_lm(weights, cfg, np.concatenate([context, query]))
prefix = capture_kv(weights, cfg, context)
via_prefix = forward_lm(weights, cfg, query, context=prefix)
gap = np.max(np.abs(via_prefix.data - full.data[len(context):]))
print(f"max |logit difference| vs one long forward: {gap:.2e}")

print("\n== a soft prompt of embedding rows is exact ==")
prompt = SoftPrompt(matrix=Tensor(weights.embedding.data[context].copy()),
                    segment_map=np.zeros(len(context), dtype=int),
                    position_base=np.arange(len(context)))
via_prompt = forward_lm(weights, cfg, query, context=prompt)
print(f"max |logit difference|: {np.max(np.abs(via_prompt.data - full.data[len(context):])):.2e}")

print("\n== masking a prefix token equals deleting its rows ==")
hide = np.array([1, 4])
keep = np.setdiff1d(np.arange(len(context)), hide)
mask = AttentionMask.for_kv_prefix(len(context), len(query)).hide_prefix(hide)
masked = forward_lm(weights, cfg, query, context=prefix, mask=mask,
                    positions=len(context) + np.arange(len(query)))
deleted = forward_lm(weights, cfg, query, context=prefix.subset(keep),
                     positions=len(context) + np.arange(len(query)))
print(f"masked-vs-deleted max |logit difference|: "
      f"{np.max(np.abs(masked.data - deleted.data)):.2e}")
print("(surviving tokens keep their rotary positions, so nothing re-indexes)")

print("\n== hiding everything equals having no context ==")
all_hidden = AttentionMask.for_kv_prefix(len(context), len(query)).hide_prefix(
    np.arange(len(context)))
bare = forward_lm(weights, cfg, query, positions=len(context) + np.arange(len(query)))
hidden = forward_lm(weights, cfg, query, context=prefix, mask=all_hidden)
print(f"max |logit difference|: {np.max(np.abs(hidden.data - bare.data)):.2e}")
