"""icolab: a desk-scale lab for gradient-based few-shot context adaptation.

A small decoder-only transformer with tape-based reverse-mode autodiff,
trainable soft prompts and key/value prefixes initialized from in-context
demonstrations, test-time training with low-rank adapters, synthetic task
families with exact ground truth, and a benchmark separating the linear
and quadratic attention-cost regimes of the adaptation methods.
"""

from .rng import RngStream
from .tensor import (
    ContractViolation,
    GradientTape,
    NonFiniteError,
    Tensor,
    tensor,
)
from .optim import Adam, cosine_lr
from .gradcheck import finite_diff_check
from .model import (
    AttentionMask,
    AttnCounter,
    KVPrefix,
    LoRAAdapter,
    ModelConfig,
    ModelWeights,
    SoftPrompt,
    capture_kv,
    forward_lm,
    forward_lm_batch,
    greedy_decode,
    init_weights,
    make_lora_adapters,
    score_options,
)

__version__ = "0.1.0"
