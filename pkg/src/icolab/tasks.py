"""Synthetic few-shot task families with exact, recomputable ground truth.

Four families stand in for natural-language benchmarks at desk scale:

* token-mapping: a hidden bijection over a symbol subset; an input is a
  short symbol sequence and the answer is the image of its final symbol.
  Queries are new symbol combinations whose final symbols the
  demonstrations cover, so they are pair-disjoint from the demos yet
  exactly solvable by lookup. Multiple choice.
* modular-affine: y = (a*x + b) mod M over value tokens; query values never
  appear among the demonstrations, so the rule itself must be inferred.
  Multiple choice.
* sequence-transform: reverse / rotate-by-r / duplicate-last applied to
  short symbol sequences. Generation.
* mini-grid: small color grids under recolor / reflect / crop transforms,
  serialized row by row. Generation.

Every hidden rule hashes into one of two disjoint pools ("train"/"eval");
meta-pretraining draws only train-pool rules and evaluation only eval-pool
rules, which makes train/eval rule disjointness a structural guarantee
rather than a bookkeeping one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .methods import DemonstrationSet
from .model import ModelConfig, ModelWeights, forward_lm_batch, init_weights, score_options
from .optim import Adam
from .rng import RngStream
from .tensor import ContractViolation, GradientTape, cross_entropy, mean_all, reshape

__all__ = [
    "TaskVocab",
    "TaskFamilyConfig",
    "Query",
    "TaskInstance",
    "FAMILIES",
    "family_config",
    "family_protocol",
    "rule_pool",
    "sample_rule",
    "instantiate_task",
    "gen_task",
    "rule_oracle",
    "options_for_pair",
    "assert_rule_pools_disjoint",
    "render_training_sequence",
    "meta_pretrain",
    "measure_icl_accuracy",
    "tasks_to_jsonl",
    "tasks_from_jsonl",
]

FAMILIES = ("token-mapping", "modular-affine", "sequence-transform", "mini-grid")

GRID_COLORS = 6  # color 0 is background


@dataclass(frozen=True)
class TaskVocab:
    """Disjoint token-id blocks: specials, input symbols, output symbols."""

    n_input_symbols: int = 24
    n_output_symbols: int = 24

    PAD = 0
    SEP = 1
    STOP = 2

    @property
    def vocab_size(self) -> int:
        return 3 + self.n_input_symbols + self.n_output_symbols

    def input_id(self, j) -> np.ndarray:
        j = np.asarray(j)
        if np.any(j < 0) or np.any(j >= self.n_input_symbols):
            raise ContractViolation("input symbol index out of range")
        return 3 + j

    def output_id(self, j) -> np.ndarray:
        j = np.asarray(j)
        if np.any(j < 0) or np.any(j >= self.n_output_symbols):
            raise ContractViolation("output symbol index out of range")
        return 3 + self.n_input_symbols + j

    def input_index(self, token) -> np.ndarray:
        token = np.asarray(token)
        j = token - 3
        if np.any(j < 0) or np.any(j >= self.n_input_symbols):
            raise ContractViolation("token is not an input symbol")
        return j

    def output_index(self, token) -> np.ndarray:
        token = np.asarray(token)
        j = token - 3 - self.n_input_symbols
        if np.any(j < 0) or np.any(j >= self.n_output_symbols):
            raise ContractViolation("token is not an output symbol")
        return j


DEFAULT_VOCAB = TaskVocab()


@dataclass
class TaskFamilyConfig:
    family: str
    k: int
    vocab: TaskVocab = field(default_factory=TaskVocab)
    n_queries: int = 4
    n_options: int = 4          # multiple-choice families only
    # token-mapping
    n_symbols: int = 8
    x_len: int = 2
    # modular-affine
    modulus: int = 16
    # sequence-transform
    seq_len_choices: tuple = (4, 5)
    # mini-grid
    grid_rows: tuple = (2, 3)
    grid_cols: tuple = (3, 4)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown task family {self.family!r}")
        if self.k < 1:
            raise ContractViolation("k must be >= 1")


# Mirrors the demonstration-count regimes of the benchmarks each family
# stands in for: 16 for the multiple-choice families, 10 for sequence
# transforms, small k for grids.
DEFAULT_K = {"token-mapping": 16, "modular-affine": 16,
             "sequence-transform": 10, "mini-grid": 3}


def family_config(family: str, k: Optional[int] = None, **kwargs) -> TaskFamilyConfig:
    return TaskFamilyConfig(family=family, k=k if k is not None else DEFAULT_K[family],
                            **kwargs)


def family_protocol(family: str) -> str:
    return "multiple-choice" if family in ("token-mapping", "modular-affine") else "generation"


@dataclass
class Query:
    x: np.ndarray
    y: np.ndarray
    options: Optional[list] = None  # list of token arrays; y is options[answer_index]
    answer_index: Optional[int] = None


@dataclass
class TaskInstance:
    family: str
    rule: dict
    demos: DemonstrationSet
    queries: list
    vocab: TaskVocab
    alphabet_size: int
    task_id: str = ""


# ---------------------------------------------------------------------------
# Rule pools


def canonical_rule(rule: dict) -> str:
    return json.dumps(rule, sort_keys=True, separators=(",", ":"))


def rule_pool(rule: dict) -> str:
    digest = hashlib.sha256(canonical_rule(rule).encode()).digest()
    return "train" if digest[0] % 2 == 0 else "eval"


def assert_rule_pools_disjoint(train_rules, eval_rules) -> None:
    train_set = {canonical_rule(r) for r in train_rules}
    eval_set = {canonical_rule(r) for r in eval_rules}
    overlap = train_set & eval_set
    if overlap:
        raise ContractViolation(
            f"rule-pool overlap detected: {len(overlap)} rule(s) shared between "
            "meta-pretraining and evaluation")


def _draw_rule(cfg: TaskFamilyConfig, rng: RngStream) -> dict:
    fam = cfg.family
    if fam == "token-mapping":
        symbols = np.sort(rng.choice(cfg.vocab.n_input_symbols, size=cfg.n_symbols,
                                     replace=False))
        images = rng.permutation(
            rng.choice(cfg.vocab.n_output_symbols, size=cfg.n_symbols, replace=False))
        return {"family": fam, "symbols": symbols.tolist(), "images": images.tolist()}
    if fam == "modular-affine":
        return {"family": fam, "a": int(rng.integers(1, cfg.modulus)),
                "b": int(rng.integers(0, cfg.modulus)), "modulus": cfg.modulus}
    if fam == "sequence-transform":
        kind = ["reverse", "rotate", "duplicate-last"][int(rng.integers(0, 3))]
        rule = {"family": fam, "transform": kind}
        if kind == "rotate":
            rule["r"] = int(rng.integers(1, 4))
        return rule
    if fam == "mini-grid":
        kind = ["recolor", "reflect", "crop"][int(rng.integers(0, 3))]
        rule = {"family": fam, "transform": kind}
        if kind == "recolor":
            palette = 1 + rng.permutation(GRID_COLORS - 1)  # background stays 0
            rule["palette"] = [0] + palette.tolist()
        elif kind == "reflect":
            rule["axis"] = ["h", "v"][int(rng.integers(0, 2))]
        return rule
    raise ContractViolation(f"unknown family {fam!r}")


def sample_rule(cfg: TaskFamilyConfig, rng: RngStream, pool: str = "eval",
                max_tries: int = 2000) -> dict:
    """Draw a hidden rule whose hash lands in the requested pool."""
    if pool not in ("train", "eval"):
        raise ContractViolation(f"unknown rule pool {pool!r}")
    for _ in range(max_tries):
        rule = _draw_rule(cfg, rng)
        if rule_pool(rule) == pool:
            return rule
    raise ContractViolation(
        f"could not draw a {pool!r}-pool rule for {cfg.family} in {max_tries} tries")


# ---------------------------------------------------------------------------
# Rule application (the ground-truth interpreter)


def _grid_to_tokens(grid: np.ndarray, encode) -> np.ndarray:
    rows = [encode(row) for row in grid]
    out = []
    for i, row in enumerate(rows):
        if i:
            out.append(encode(np.array([GRID_COLORS]))[0:1])  # row break symbol
        out.append(row)
    return np.concatenate(out)


def _tokens_to_grid(tokens: np.ndarray, decode) -> np.ndarray:
    values = decode(tokens)
    breaks = np.flatnonzero(values == GRID_COLORS)
    rows = np.split(values, breaks)
    rows = [rows[0]] + [r[1:] for r in rows[1:]]
    widths = {r.size for r in rows}
    if len(widths) != 1 or 0 in widths:
        raise ContractViolation("malformed grid serialization")
    return np.stack(rows)


def rule_oracle(task: TaskInstance, x: np.ndarray) -> np.ndarray:
    """Apply the task's hidden rule to an input token sequence."""
    rule, vocab = task.rule, task.vocab
    fam = rule["family"]
    x = np.asarray(x)
    if fam == "token-mapping":
        table = dict(zip(rule["symbols"], rule["images"]))
        idx = vocab.input_index(x)
        last = int(idx[-1])
        if last not in table:
            raise ContractViolation("input symbol outside the bijection's domain")
        return vocab.output_id(np.array([table[last]]))
    if fam == "modular-affine":
        if x.size != 1:
            raise ContractViolation("modular-affine inputs are single value tokens")
        v = int(vocab.input_index(x)[0])
        if v >= rule["modulus"]:
            raise ContractViolation("value outside the modulus range")
        return vocab.output_id(np.array([(rule["a"] * v + rule["b"]) % rule["modulus"]]))
    if fam == "sequence-transform":
        idx = vocab.input_index(x)
        kind = rule["transform"]
        if kind == "reverse":
            out = idx[::-1]
        elif kind == "rotate":
            r = rule["r"] % idx.size
            out = np.concatenate([idx[r:], idx[:r]])
        elif kind == "duplicate-last":
            out = np.concatenate([idx, idx[-1:]])
        else:
            raise ContractViolation(f"unknown transform {kind!r}")
        return vocab.output_id(out)
    if fam == "mini-grid":
        grid = _tokens_to_grid(x, vocab.input_index)
        kind = rule["transform"]
        if kind == "recolor":
            palette = np.asarray(rule["palette"])
            out = palette[grid]
        elif kind == "reflect":
            out = grid[:, ::-1] if rule["axis"] == "h" else grid[::-1, :]
        elif kind == "crop":
            filled = np.argwhere(grid != 0)
            if filled.size == 0:
                raise ContractViolation("crop input has no marked region")
            (r0, c0), (r1, c1) = filled.min(axis=0), filled.max(axis=0)
            out = grid[r0:r1 + 1, c0:c1 + 1]
        else:
            raise ContractViolation(f"unknown transform {kind!r}")
        return _grid_to_tokens(out, vocab.output_id)
    raise ContractViolation(f"unknown family {fam!r}")


# ---------------------------------------------------------------------------
# Task instantiation


def _mapping_inputs(cfg: TaskFamilyConfig, rng: RngStream, n_needed: int) -> list:
    """Distinct ordered symbol tuples; the first n_symbols demos put every
    symbol in the final (answered) slot once."""
    n_sym = cfg.n_symbols
    all_pairs = n_sym * (n_sym - 1)
    if n_needed > all_pairs:
        raise ContractViolation(
            f"k exceeds the number of distinct available inputs ({all_pairs})")
    chosen: list[tuple] = []
    seen = set()
    for last in rng.permutation(n_sym):
        first = int(rng.integers(0, n_sym - 1))
        if first >= last:
            first += 1
        pair = (first, int(last))
        chosen.append(pair)
        seen.add(pair)
    while len(chosen) < n_needed:
        a, b = rng.choice(n_sym, size=2, replace=False)
        pair = (int(a), int(b))
        if pair not in seen:
            chosen.append(pair)
            seen.add(pair)
    return chosen[:n_needed]


def _distractor_sampler(rule: dict, vocab: TaskVocab, y_len: int, rng: RngStream):
    fam = rule["family"]
    if fam == "token-mapping":
        images = np.asarray(rule["images"])
        return lambda: vocab.output_id(images[rng.choice(images.size, size=y_len,
                                                         replace=False)])
    if fam == "modular-affine":
        modulus = rule["modulus"]
        return lambda: vocab.output_id(np.array([int(rng.integers(0, modulus))]))
    raise ContractViolation(f"{fam} has no multiple-choice protocol")


def options_for_pair(task: TaskInstance, x: np.ndarray, y: np.ndarray, rng: RngStream,
                     n_options: int = 4):
    """Answer options for an arbitrary (x, y) pair of a multiple-choice task."""
    if family_protocol(task.family) != "multiple-choice":
        return None, None
    sampler = _distractor_sampler(task.rule, task.vocab, y.size, rng)
    return _mc_options(np.asarray(y), sampler, n_options, rng)


def _mc_options(true_y: np.ndarray, sampler, n_options: int, rng: RngStream,
                max_tries: int = 200) -> tuple[list, int]:
    """True answer plus distinct distractors, shuffled; returns (options, answer_index)."""
    options = [true_y]
    keys = {true_y.tobytes()}
    tries = 0
    while len(options) < n_options and tries < max_tries:
        cand = sampler()
        tries += 1
        if cand.tobytes() not in keys:
            options.append(cand)
            keys.add(cand.tobytes())
    if len(options) < n_options:
        raise ContractViolation("could not sample enough distinct distractors")
    order = rng.permutation(len(options))
    answer = int(np.flatnonzero(order == 0)[0])
    return [options[j] for j in order], answer


def instantiate_task(cfg: TaskFamilyConfig, rule: dict, rng: RngStream,
                     task_id: str = "") -> TaskInstance:
    """Sample demonstrations and queries for a fixed hidden rule."""
    vocab = cfg.vocab
    fam = cfg.family
    shell = TaskInstance(family=fam, rule=rule, demos=None, queries=[], vocab=vocab,
                         alphabet_size=0, task_id=task_id)

    if fam == "token-mapping":
        symbols = np.asarray(rule["symbols"])
        inputs = _mapping_inputs(cfg, rng, cfg.k + cfg.n_queries)
        images = np.asarray(rule["images"])

        def x_tokens(pair):
            return vocab.input_id(symbols[list(pair)])

        pairs = [(x_tokens(p), None) for p in inputs]
        demos_x = [p[0] for p in pairs[:cfg.k]]
        query_x = [p[0] for p in pairs[cfg.k:]]
        demos = [(x, rule_oracle(shell, x)) for x in demos_x]
        shell.alphabet_size = cfg.n_symbols

        distractor = _distractor_sampler(rule, vocab, 1, rng)
        queries = []
        for x in query_x:
            y = rule_oracle(shell, x)
            options, answer = _mc_options(y, distractor, cfg.n_options, rng)
            queries.append(Query(x=x, y=y, options=options, answer_index=answer))

    elif fam == "modular-affine":
        modulus = rule["modulus"]
        if cfg.n_queries >= modulus:
            raise ContractViolation("n_queries must be smaller than the modulus")
        values = rng.permutation(modulus)
        query_vals = values[:cfg.n_queries]
        demo_vals = rng.choice(values[cfg.n_queries:], size=cfg.k, replace=True)
        demos = []
        for v in demo_vals:
            x = vocab.input_id(np.array([v]))
            demos.append((x, rule_oracle(shell, x)))
        shell.alphabet_size = modulus

        distractor = _distractor_sampler(rule, vocab, 1, rng)
        queries = []
        for v in query_vals:
            x = vocab.input_id(np.array([v]))
            y = rule_oracle(shell, x)
            options, answer = _mc_options(y, distractor, cfg.n_options, rng)
            queries.append(Query(x=x, y=y, options=options, answer_index=answer))

    elif fam == "sequence-transform":
        length = int(rng.choice(np.asarray(cfg.seq_len_choices)))
        n_sym = vocab.n_input_symbols

        def draw_seq():
            return vocab.input_id(rng.choice(n_sym, size=length, replace=False))

        seen = set()
        xs = []
        while len(xs) < cfg.k + cfg.n_queries:
            x = draw_seq()
            key = x.tobytes()
            if key not in seen:
                seen.add(key)
                xs.append(x)
        demos = [(x, rule_oracle(shell, x)) for x in xs[:cfg.k]]
        queries = [Query(x=x, y=rule_oracle(shell, x)) for x in xs[cfg.k:]]
        shell.alphabet_size = n_sym

    elif fam == "mini-grid":
        rows = int(rng.choice(np.asarray(cfg.grid_rows)))
        cols = int(rng.choice(np.asarray(cfg.grid_cols)))
        kind = rule["transform"]

        def draw_grid():
            if kind == "crop":
                grid = np.zeros((rows, cols), dtype=int)
                h = int(rng.integers(1, rows))
                w = int(rng.integers(1, cols))
                r0 = int(rng.integers(0, rows - h + 1))
                c0 = int(rng.integers(0, cols - w + 1))
                grid[r0:r0 + h, c0:c0 + w] = rng.integers(
                    1, GRID_COLORS, size=(h, w))
                return grid
            return rng.integers(0, GRID_COLORS, size=(rows, cols))

        seen = set()
        xs = []
        while len(xs) < cfg.k + cfg.n_queries:
            x = _grid_to_tokens(draw_grid(), vocab.input_id)
            key = x.tobytes()
            if key not in seen:
                seen.add(key)
                xs.append(x)
        demos = [(x, rule_oracle(shell, x)) for x in xs[:cfg.k]]
        queries = [Query(x=x, y=rule_oracle(shell, x)) for x in xs[cfg.k:]]
        shell.alphabet_size = GRID_COLORS

    else:
        raise ContractViolation(f"unknown family {fam!r}")

    shell.demos = DemonstrationSet(demos, separator=vocab.SEP)
    shell.queries = queries
    return shell


def gen_task(cfg: TaskFamilyConfig, rng: RngStream, pool: str = "eval",
             task_id: str = "") -> TaskInstance:
    rule = sample_rule(cfg, rng.split("rule"), pool=pool)
    return instantiate_task(cfg, rule, rng.split("sample"), task_id=task_id)


# ---------------------------------------------------------------------------
# Meta-pretraining


def render_training_sequence(task: TaskInstance, query: Query) -> np.ndarray:
    """[C; x_q; y_q; STOP] as one token array."""
    return np.concatenate([task.demos.context_tokens(), query.x, query.y,
                           [task.vocab.STOP]])


DEFAULT_FAMILY_MIX = {"token-mapping": 0.4, "modular-affine": 0.2,
                      "sequence-transform": 0.2, "mini-grid": 0.2}


def meta_pretrain(model_config: ModelConfig, family_mix: Optional[dict], steps: int,
                  rng: RngStream, batch_size: int = 16, lr: float = 1e-3,
                  vocab: Optional[TaskVocab] = None, k_by_family: Optional[dict] = None,
                  gate_tasks: int = 20, progress_every: int = 0,
                  p_copy_query: float = 0.25) -> tuple[ModelWeights, dict]:
    """Train fresh weights on train-pool tasks until they carry ICL ability.

    Each step samples one family, one batch of same-shape tasks from the
    training rule pool, and takes an Adam step on the next-token loss over
    [C; x_q; y_q; STOP]. With probability `p_copy_query` a sequence re-asks
    one of its own demonstration pairs instead of a fresh query, which
    speeds up formation of the in-context lookup circuit. Returns the
    weights (frozen) plus a report with the loss trace and held-out
    eval-pool ICL accuracy on token-mapping tasks.
    """
    vocab = vocab or TaskVocab()
    mix = dict(family_mix or DEFAULT_FAMILY_MIX)
    families = sorted(mix)
    probs = np.array([mix[f] for f in families], dtype=float)
    probs = probs / probs.sum()

    weights = init_weights(model_config, rng.split("init"))
    weights.set_trainable(True)
    params = weights.parameters()
    opt = Adam(params, lr0=lr, total_steps=max(steps, 1))

    sample_stream = rng.split("tasks")
    cum_probs = np.cumsum(probs)
    trace = []
    for step in range(steps):
        fam = families[int(np.searchsorted(cum_probs, sample_stream.uniform()))]
        cfg = family_config(fam, k=(k_by_family or {}).get(fam), vocab=vocab)
        batch_stream = sample_stream.split(f"step{step}")
        shared_rule = None
        if fam in ("sequence-transform", "mini-grid"):
            shared_rule = sample_rule(cfg, batch_stream.split("rule"), pool="train")
        rows = []
        for b in range(batch_size):
            item = batch_stream.split(f"item{b}")
            rule = shared_rule if shared_rule is not None else sample_rule(
                cfg, item.split("rule"), pool="train")
            if rule_pool(rule) != "train":
                raise ContractViolation("rule-pool overlap detected during pretraining")
            task = instantiate_task(cfg, rule, item.split("sample"))
            if item.uniform() < p_copy_query:
                x, y = task.demos.pairs[int(item.uniform() * task.demos.k)]
                q = Query(x=x, y=y)
            else:
                q = task.queries[int(item.uniform() * len(task.queries))]
            rows.append(render_training_sequence(task, q))
        width = {r.size for r in rows}
        if len(width) != 1:
            raise ContractViolation("pretraining batch has unequal sequence lengths")
        batch = np.stack(rows)

        with GradientTape() as tape:
            logits = forward_lm_batch(weights, model_config, batch[:, :-1])
            flat = reshape(logits, (-1, model_config.vocab_size))
            loss = mean_all(cross_entropy(flat, batch[:, 1:].reshape(-1)))
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
        trace.append(float(loss.data))
        if progress_every and (step + 1) % progress_every == 0:
            print(f"meta-pretrain step {step + 1}/{steps} loss {trace[-1]:.4f}")

    weights.set_trainable(False)
    report = {"steps": steps, "loss_trace": trace,
              "final_loss": trace[-1] if trace else None}
    if gate_tasks > 0:
        gate_cfg = family_config("token-mapping", vocab=vocab)
        acc = measure_icl_accuracy(weights, model_config, gate_cfg, gate_tasks,
                                   rng.split("gate"), pool="eval")
        report["gate_family"] = "token-mapping"
        report["gate_icl_accuracy"] = acc
        report["gate_chance"] = 1.0 / gate_cfg.n_options
    return weights, report


def measure_icl_accuracy(weights: ModelWeights, model_config: ModelConfig,
                         cfg: TaskFamilyConfig, n_tasks: int, rng: RngStream,
                         pool: str = "eval") -> float:
    """Mean multiple-choice accuracy of plain in-context inference."""
    if family_protocol(cfg.family) != "multiple-choice":
        raise ContractViolation("measure_icl_accuracy expects a multiple-choice family")
    correct = total = 0
    for t in range(n_tasks):
        task = gen_task(cfg, rng.split(f"task{t}"), pool=pool)
        ctx = task.demos.context_tokens()
        for q in task.queries:
            x_full = np.concatenate([ctx, q.x])
            choice, _ = score_options(weights, model_config, None, x_full, q.options)
            correct += int(choice == q.answer_index)
            total += 1
    return correct / total


# ---------------------------------------------------------------------------
# Serialization


def _task_record(task: TaskInstance) -> dict:
    return {
        "task_id": task.task_id,
        "family": task.family,
        "rule": task.rule,
        "alphabet_size": task.alphabet_size,
        "vocab": {"n_input_symbols": task.vocab.n_input_symbols,
                  "n_output_symbols": task.vocab.n_output_symbols},
        "separator": task.demos.separator,
        "demos": [[x.tolist(), y.tolist()] for x, y in task.demos.pairs],
        "queries": [{
            "x": q.x.tolist(), "y": q.y.tolist(),
            "options": [o.tolist() for o in q.options] if q.options is not None else None,
            "answer_index": q.answer_index,
        } for q in task.queries],
    }


def tasks_to_jsonl(tasks, path) -> None:
    with open(path, "w") as fh:
        for task in tasks:
            fh.write(json.dumps(_task_record(task), sort_keys=True,
                                separators=(",", ":")) + "\n")


def tasks_from_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            vocab = TaskVocab(**rec["vocab"])
            demos = DemonstrationSet(
                [(np.array(x), np.array(y)) for x, y in rec["demos"]],
                separator=rec["separator"])
            queries = [Query(
                x=np.array(q["x"]), y=np.array(q["y"]),
                options=[np.array(o) for o in q["options"]] if q["options"] else None,
                answer_index=q["answer_index"],
            ) for q in rec["queries"]]
            out.append(TaskInstance(
                family=rec["family"], rule=rec["rule"], demos=demos, queries=queries,
                vocab=vocab, alphabet_size=rec["alphabet_size"], task_id=rec["task_id"]))
    return out
