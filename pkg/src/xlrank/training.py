"""Training loops: masked-language-model and pointwise ranking objectives
over a selectable subset of parameters.

One engine drives everything.  A ``TrainableSelection`` names which flat-θ
coordinates and which standalone tensors (adapter projections) may move;
every other parameter is bit-identical before and after training.  The
same engine therefore covers full fine-tuning (all coordinates), adapter
training (adapter tensors plus the scoring head), and sparse-mask phases
(an explicit coordinate support).

Checkpoint selection: the loop validates every ``eval_interval`` steps and
restores the best checkpoint at the end — by held-out masked-LM loss for
language training, by a caller-supplied metric (typically MAP) for ranking.
Batch order is a pure function of the config seed.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Encoder
from .errors import ConfigError, ContractError
from .sftm import extract_mask, select_support
from .tokenizer import MASK as MASK_ID
from .tokenizer import N_SPECIALS, pad_batch

MASK_PROB = 0.15          # fraction of maskable tokens per batch
MASK_AS_MASK = 0.80       # of those: replaced by [MASK]
MASK_AS_RANDOM = 0.10     # ... replaced by a random word (rest unchanged)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    total_steps: int = 2000
    warmup_steps: int = 200
    eval_interval: int = 200
    seed: int = 0
    max_seq_len: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps={self.warmup_steps} exceeds total_steps={self.total_steps}"
            )


@dataclass(frozen=True)
class RankingExample:
    query_id: str
    doc_id: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label}")


class WarmupSchedule:
    """Linear warm-up to the base rate, constant afterwards."""

    def __init__(self, base_lr: float, warmup_steps: int):
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps

    def lr_at(self, step: int) -> float:
        """Effective rate at 1-based step t: lr·t/warmup while t <= warmup."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        return self.base_lr


class Adam:
    """Adam with bias correction; per-group first/second moment state."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def begin_step(self):
        self.t += 1

    def delta(self, key, grad: np.ndarray) -> np.ndarray:
        """Update step (to subtract, pre-learning-rate) for one group."""
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(grad)
            self.v[key] = np.zeros_like(grad)
        v = self.v[key]
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.m[key], self.v[key] = m, v
        mhat = m / (1.0 - self.beta1 ** self.t)
        vhat = v / (1.0 - self.beta2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps)


class TrainableSelection:
    """Which parameters may move: flat-θ coordinates and/or extra tensors."""

    def __init__(self, theta_support: np.ndarray = None, tensors=()):
        if theta_support is None:
            theta_support = np.array([], dtype=np.int64)
        self.theta_support = np.asarray(theta_support, dtype=np.int64)
        if len(self.theta_support) and (np.diff(self.theta_support) <= 0).any():
            raise ContractError("theta support must be sorted and unique")
        self.tensors = list(tensors)


def select_all(store) -> TrainableSelection:
    return TrainableSelection(np.arange(store.dim, dtype=np.int64))


def select_theta(support) -> TrainableSelection:
    return TrainableSelection(np.asarray(support, dtype=np.int64))


def select_modules(tensors, store=None, with_head=False) -> TrainableSelection:
    """Adapter-style selection: standalone tensors, optionally the scoring head."""
    support = None
    if with_head:
        if store is None:
            raise ContractError("with_head requires the parameter store")
        support = store.indices_of(["head.w", "head.b"])
    return TrainableSelection(support, tensors)


def encoder_eligible_indices(store) -> np.ndarray:
    """Mask-eligible coordinates: everything except the scoring head."""
    names = [n for n in store.names() if not n.startswith("head.")]
    return store.indices_of(names)


@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    best_step: int = None
    best_metric: float = None
    final_metric: float = None


def write_log(path, records) -> None:
    """Line-delimited JSON training log."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---- engine ------------------------------------------------------------


def _run(encoder: Encoder, selection: TrainableSelection, config: TrainConfig,
         batch_fn, validate_fn=None, higher_better=True) -> TrainResult:
    store = encoder.params
    schedule = WarmupSchedule(config.learning_rate, config.warmup_steps)
    opt = Adam()
    rng = np.random.default_rng(config.seed)
    support = selection.theta_support
    result = TrainResult()
    best = None  # (metric, theta copy, extra tensor copies)

    def snapshot():
        return store.flatten(), [t.data.copy() for t in selection.tensors]

    def validate(step):
        nonlocal best
        metric = validate_fn()
        rec_val = float(metric)
        better = best is None or (
            rec_val > best[0] if higher_better else rec_val < best[0]
        )
        if better:
            best = (rec_val, *snapshot())
            result.best_step = step
            result.best_metric = rec_val
        result.final_metric = rec_val
        return rec_val

    for step in range(1, config.total_steps + 1):
        loss_fn = batch_fn(rng)
        store.clear_grads()
        for t in selection.tensors:
            t.grad = None
        with T.Tape() as tape:
            loss = loss_fn()
            tape.backward(loss)
        lr = schedule.lr_at(step)
        opt.begin_step()
        if len(support):
            grad = store.grad_vector()[support]
            store.theta[support] = store.theta[support] - lr * opt.delta("theta", grad)
        for j, t in enumerate(selection.tensors):
            t.data -= lr * opt.delta(f"tensor{j}", t.grad)
        rec = {"step": step, "loss": float(loss.data), "lr": lr}
        if validate_fn is not None and (
            step % config.eval_interval == 0 or step == config.total_steps
        ):
            rec["val"] = validate(step)
        result.records.append(rec)

    if best is not None:
        _, theta_best, extra_best = best
        store.theta[:] = theta_best
        for t, data in zip(selection.tensors, extra_best):
            t.data[:] = data
    return result


# ---- masked-language-model objective -----------------------------------


def _mask_batch(ids, mask, vocab_size, rng):
    """Apply the 15% / 80-10-10 masking policy; returns (inputs, flat
    positions, target ids).  At least one position is always masked."""
    maskable = (ids >= N_SPECIALS) & (mask > 0)
    selected = (rng.random(ids.shape) < MASK_PROB) & maskable
    if not selected.any():
        flat = np.flatnonzero(maskable.ravel())
        if len(flat) == 0:
            raise ContractError("batch contains no maskable tokens")
        selected.ravel()[flat[0]] = True
    positions = np.flatnonzero(selected.ravel())
    targets = ids.ravel()[positions].copy()
    inputs = ids.copy()
    roll = rng.random(len(positions))
    flat_in = inputs.ravel()
    as_mask = roll < MASK_AS_MASK
    as_rand = (roll >= MASK_AS_MASK) & (roll < MASK_AS_MASK + MASK_AS_RANDOM)
    flat_in[positions[as_mask]] = MASK_ID
    flat_in[positions[as_rand]] = rng.integers(
        N_SPECIALS, vocab_size, size=int(as_rand.sum())
    )
    return inputs, positions, targets


def _mlm_batch_fn(encoder: Encoder, texts, config: TrainConfig, plugins):
    tok = encoder.tokenizer

    def batch_fn(rng):
        idx = rng.integers(0, len(texts), size=config.batch_size)
        seqs = [tok.encode_single(texts[i], config.max_seq_len) for i in idx]
        ids, seg, msk = pad_batch(seqs)
        inputs, positions, targets = _mask_batch(ids, msk, tok.vocab_size, rng)
        return lambda: encoder.mlm_loss(inputs, seg, msk, positions, targets, plugins)

    return batch_fn


def mlm_eval(encoder: Encoder, texts, config: TrainConfig, plugins=None,
             n_batches: int = 4, seed_offset: int = 7_919):
    """Deterministic held-out masked-LM (loss, accuracy) on fixed batches."""
    if not texts:
        raise ContractError("held-out text set is empty")
    tok = encoder.tokenizer
    rng = np.random.default_rng(config.seed + seed_offset)
    losses, hits, total = [], 0, 0
    for _ in range(n_batches):
        idx = rng.integers(0, len(texts), size=config.batch_size)
        seqs = [tok.encode_single(texts[i], config.max_seq_len) for i in idx]
        ids, seg, msk = pad_batch(seqs)
        inputs, positions, targets = _mask_batch(ids, msk, tok.vocab_size, rng)
        loss = encoder.mlm_loss(inputs, seg, msk, positions, targets, plugins)
        losses.append(float(loss.data))
        b, t = ids.shape
        h = encoder.encode_ids(inputs, seg, msk, plugins)
        if plugins is not None:
            h = plugins.pre_mlm(h)
        flat = T.reshape(h, (b * t, encoder.config.hidden))
        logits = encoder._mlm_head(T.embedding(flat, positions))
        hits += int((np.argmax(logits.data, axis=1) == targets).sum())
        total += len(targets)
    return float(np.mean(losses)), hits / total


def train_mlm(texts, encoder: Encoder, selection: TrainableSelection,
              config: TrainConfig, plugins=None, heldout=None) -> TrainResult:
    """Masked-LM training over the selected parameters.

    With ``heldout`` texts, checkpoints are selected by held-out MLM loss
    (lower is better) and the best one is restored at the end.
    """
    texts = list(texts)
    if not texts:
        raise ContractError("training corpus is empty")
    validate_fn = None
    if heldout:
        heldout = list(heldout)
        validate_fn = lambda: mlm_eval(encoder, heldout, config, plugins)[0]
    return _run(
        encoder, selection, config,
        _mlm_batch_fn(encoder, texts, config, plugins),
        validate_fn, higher_better=False,
    )


# ---- ranking objective -------------------------------------------------


def build_ranking_examples(qrels: dict, rankings: dict, depth: int = 100):
    """Pointwise examples: relevant docs positive, top-``depth`` retrieved
    non-relevant docs negative.  Deterministic order (sorted query id)."""
    examples = []
    for qid in sorted(qrels):
        relevant = qrels[qid]
        if not relevant or qid not in rankings:
            continue
        for did in sorted(relevant):
            examples.append(RankingExample(qid, did, 1))
        for did in list(rankings[qid])[:depth]:
            if did not in relevant:
                examples.append(RankingExample(qid, did, 0))
    return examples


def _ranking_batch_fn(encoder: Encoder, examples, queries: dict, docs: dict,
                      config: TrainConfig, plugins):
    tok = encoder.tokenizer
    pos = [e for e in examples if e.label == 1]
    neg = [e for e in examples if e.label == 0]
    if not pos or not neg:
        raise ContractError("ranking training needs both labels present")
    n_pos = max(1, config.batch_size // 2)
    n_neg = max(1, config.batch_size - n_pos)

    def batch_fn(rng):
        chosen = [pos[i] for i in rng.integers(0, len(pos), size=n_pos)]
        chosen += [neg[i] for i in rng.integers(0, len(neg), size=n_neg)]
        seqs = [
            tok.encode_pair(queries[e.query_id], docs[e.doc_id], config.max_seq_len)
            for e in chosen
        ]
        ids, seg, msk = pad_batch(seqs)
        labels = np.array([e.label for e in chosen], dtype=np.float64)
        return lambda: T.bce(encoder.ce_logits(ids, seg, msk, plugins), labels)

    return batch_fn


def train_ranking(examples, encoder: Encoder, selection: TrainableSelection,
                  config: TrainConfig, queries: dict, docs: dict,
                  plugins=None, validator=None) -> TrainResult:
    """Pointwise binary cross-entropy on relevance logits, 1:1 sampling.

    ``validator`` is a zero-argument callable returning a quality metric
    (typically MAP, higher better); the best checkpoint is restored.
    """
    examples = list(examples)
    if not examples:
        raise ContractError("ranking training set is empty")
    return _run(
        encoder, selection, config,
        _ranking_batch_fn(encoder, examples, queries, docs, config, plugins),
        validator, higher_better=True,
    )


def train_full(examples, encoder: Encoder, config: TrainConfig,
               queries: dict, docs: dict, validator=None) -> TrainResult:
    """Full fine-tune baseline: ranking training with every θ coordinate."""
    return train_ranking(
        examples, encoder, select_all(encoder.params), config,
        queries, docs, plugins=None, validator=validator,
    )


# ---- two-phase sparse-mask learning ------------------------------------


def phase2_train(encoder: Encoder, theta_base: np.ndarray, support: np.ndarray,
                 config: TrainConfig, objective: str, *, texts=None,
                 examples=None, queries=None, docs=None, plugins=None,
                 validator=None, heldout=None) -> np.ndarray:
    """Restart from ``theta_base`` and train only ``support`` coordinates.

    Every coordinate outside the support is bit-identical to theta_base in
    the returned vector.
    """
    encoder.params.unflatten(theta_base)
    selection = select_theta(support)
    if objective == "mlm":
        train_mlm(texts, encoder, selection, config, plugins, heldout)
    elif objective == "ranking":
        train_ranking(examples, encoder, selection, config, queries, docs,
                      plugins, validator)
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    return encoder.params.flatten()


def learn_mask(encoder: Encoder, k: int, config1: TrainConfig,
               config2: TrainConfig, objective: str, role: str, tag: str, *,
               texts=None, examples=None, queries=None, docs=None,
               plugins=None, validator=None, heldout=None,
               train_head: bool = False):
    """Two-phase mask learning relative to the encoder's current parameters.

    Phase 1 fine-tunes everything; the top-K moved coordinates (among the
    mask-eligible set — the scoring head is excluded) become the support.
    Phase 2 restarts from the base and trains that support, plus the head
    when ``train_head`` (the head ships with the mask, outside the budget).

    Returns (mask, head_arrays_or_None, phase2_result_theta).
    """
    store = encoder.params
    theta_base = store.flatten()
    eligible = encoder_eligible_indices(store)
    head_idx = store.indices_of(["head.w", "head.b"])

    kwargs = dict(texts=texts, examples=examples, queries=queries, docs=docs,
                  plugins=plugins, validator=validator, heldout=heldout)
    theta1 = phase2_train(encoder, theta_base, np.arange(store.dim),
                          config1, objective, **kwargs)
    support = select_support(theta_base, theta1, k, eligible)

    phase2_support = np.union1d(support, head_idx) if train_head else support
    theta2 = phase2_train(encoder, theta_base, phase2_support,
                          config2, objective, **kwargs)

    mask = extract_mask(theta2, theta_base, support, k=k, role=role, tag=tag)
    head = None
    if train_head:
        head = {
            "w": store["head.w"].data.copy(),
            "b": store["head.b"].data.copy(),
        }
    return mask, head, theta2
