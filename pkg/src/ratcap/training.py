"""Cross-entropy pre-training and self-critical fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import CorpusSplit
from .decoding import beam_search, greedy_search
from .metrics import IdfTable, cider_d, corpus_eval
from .model import CaptionModel, load_checkpoint, save_checkpoint
from .retrieval import Datastore, RetrievalConfig, RetrievalError, retrieve_captions
from .tokenizer import BOS, PAD, Tokenizer

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass
class TrainConfig:
    warmup_steps: int = 200
    batch_size: int = 8
    grad_accum_steps: int = 1
    xe_steps: int = 1000
    scst_steps: int = 200
    lr_scale: float = 1.0
    scst_lr: float = 5e-6
    scst_beam: int = 5
    scst_batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    val_every: int = 200
    patience: int = 10
    val_beam: int = 1

    def __post_init__(self):
        for name in ("warmup_steps", "batch_size", "grad_accum_steps", "scst_batch_size", "val_every", "patience", "val_beam"):
            if getattr(self, name) < 1:
                raise nx.ConfigError(f"{name} must be >= 1")
        for name in ("xe_steps", "scst_steps"):
            if getattr(self, name) < 0:
                raise nx.ConfigError(f"{name} must be >= 0")
        if self.scst_beam < 2:
            raise nx.ConfigError("scst_beam must be >= 2 for a mean baseline")
        if self.lr_scale <= 0 or self.scst_lr <= 0 or self.clip_norm <= 0:
            raise nx.ConfigError("learning rates and clip norm must be positive")


def lr_schedule(step: int, d: int, warmup: int, scale: float = 1.0) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d**-0.5 * min(step**-0.5, step * warmup**-1.5)


def xe_loss(logits: nx.Tensor, target: Sequence[int]) -> nx.Tensor:
    """Mean NLL of ``target[1:]`` given logits rows ``0 .. len(target)-2``; PAD excluded."""
    target = np.asarray(target, dtype=np.int64)
    n = len(target) - 1
    if n < 1 or logits.shape[0] < n:
        raise ValueError(f"need {n} logit rows for a target of length {len(target)}, got {logits.shape[0]}")
    nxt = target[1:]
    rows = np.flatnonzero(nxt != PAD)
    if rows.size == 0:
        raise ValueError("all target positions are padding")
    lp = nx.log_softmax(logits[rows] if rows.size < logits.shape[0] else logits, axis=-1)
    return nx.tmean(nx.pick(lp, nxt[rows])) * -1.0


# -- optimizer ---------------------------------------------------------------------
class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        nx.zero_grads(p for _, p in self.params)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


@dataclass
class TrainState:
    """Everything needed to resume: step, optimizer moments, RNG state, counters."""

    step: int = 0
    stage: str = "xe"
    rng_state: dict = field(default_factory=dict)
    stats: dict = field(default_factory=lambda: {"empty_memory": 0, "degenerate_beams": 0, "retrieval_failures": 0})

    @classmethod
    def fresh(cls, seed: int) -> "TrainState":
        return cls(rng_state=np.random.default_rng(seed).bit_generator.state)

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g

    def save(self, path, opt: Adam) -> None:
        meta = {"step": self.step, "stage": self.stage, "rng_state": self.rng_state, "stats": self.stats, "adam_t": opt.t}
        arrays = {f"m/{n}": a for n, a in opt.m.items()} | {f"v/{n}": a for n, a in opt.v.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path, opt: Adam) -> "TrainState":
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes())
            for n in opt.m:
                opt.m[n][...] = z[f"m/{n}"]
                opt.v[n][...] = z[f"v/{n}"]
        opt.t = meta["adam_t"]
        return cls(meta["step"], meta["stage"], meta["rng_state"], meta["stats"])


# -- data ------------------------------------------------------------------------------
@dataclass
class Example:
    image_id: str
    grid: np.ndarray
    targets: list[list[int]]  # tokenized ground-truth captions
    references: list[str]
    memory: list[list[int]]  # tokenized retrieved captions
    memory_images: list[str]


class MemoryProvider:
    """Retrieves and tokenizes memory captions for an image."""

    def __init__(self, tokenizer: Tokenizer, store: Datastore | None, index, cfg: RetrievalConfig, max_len: int):
        self.tokenizer, self.store, self.index, self.cfg, self.max_len = tokenizer, store, index, cfg, max_len
        self.failures = 0

    def __call__(self, grid, exclude_id: str | None = None) -> tuple[list[list[int]], list[str]]:
        if self.store is None:
            return [], []
        try:
            got = retrieve_captions(grid, self.store, self.index, self.cfg, exclude_id=exclude_id)
        except RetrievalError as e:
            log.warning("retrieval failed (%s); using empty memory", e)
            self.failures += 1
            return [], []
        return [self.tokenizer.encode(c, self.max_len) for c in got.captions], list(got.image_ids)


def prepare_examples(split: CorpusSplit, tokenizer: Tokenizer, memory: MemoryProvider, exclude_self: bool) -> list[Example]:
    """Tokenize captions and retrieve memory once per image (retrieval is fixed during training)."""
    out = []
    for it in split:
        mem, mem_ids = memory(it.grid, it.image_id if exclude_self else None)
        if exclude_self and it.image_id in mem_ids:
            raise AssertionError(f"own image {it.image_id} retrieved into its memory")
        targets = [tokenizer.encode(c, memory.max_len) for c in it.captions]
        out.append(Example(it.image_id, it.grid, targets, list(it.captions), mem, mem_ids))
    return out


# -- steps -----------------------------------------------------------------------------
def sample_xe_batch(rng: np.random.Generator, train: Sequence[Example], cfg: TrainConfig):
    """Draw distinct images and one random reference each, split into micro-batches."""
    per_step = cfg.batch_size * cfg.grad_accum_steps
    idx = rng.choice(len(train), size=min(per_step, len(train)), replace=False)
    items = []
    for i in idx:
        ex = train[i]
        items.append((ex.grid, ex.targets[int(rng.integers(len(ex.targets)))], ex.memory))
    return [items[j : j + cfg.batch_size] for j in range(0, len(items), cfg.batch_size)]


def xe_train_step(model: CaptionModel, opt: Adam, micro_batches, lr: float, clip_norm: float | None = 1.0) -> float:
    """One optimizer update from gradient-accumulated micro-batches.

    ``micro_batches`` is a list of lists of ``(grid, target_ids, memory_ids)``.
    Each item's loss is scaled by ``1 / (items per micro-batch * micro-batches)``
    so accumulation matches a single larger batch.
    """
    opt.zero_grad()
    n_micro = len(micro_batches)
    total = 0.0
    for batch in micro_batches:
        scale = 1.0 / (len(batch) * n_micro)
        for grid, target, memory in batch:
            loss = xe_loss(model.forward(grid, target[:-1], memory), target) * scale
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalAbort(f"non-finite XE loss {value}")
            loss.backward()
            total += value
    if clip_norm is not None:
        clip_grad_norm(model.parameters(), clip_norm)
    opt.step(lr)
    return total


def sequence_logprob(model: CaptionModel, enc, mem, tokens: Sequence[int]) -> nx.Tensor:
    """Sum of full-vocabulary token log-probabilities of ``tokens`` (BOS excluded) under teacher forcing."""
    seq = [BOS] + list(tokens)
    lp = nx.log_softmax(model.decoder_forward(seq[:-1], enc, mem), axis=-1)
    return nx.tsum(nx.pick(lp, np.asarray(seq[1:])))


def scst_loss(model: CaptionModel, grid, memory, beam_size: int, reward_fn: Callable[[list[int]], float]):
    """Self-critical loss for one image with the mean-of-beam baseline.

    Returns ``(loss or None, rewards, advantages)``; ``None`` when every
    advantage is zero (the gradient would be exactly zero).
    """
    max_new = model.cfg.max_len - 1
    hyps = beam_search(model.start(grid, memory), model.advance, beam_size, max_new)
    rewards = np.array([reward_fn(h.tokens) for h in hyps], dtype=np.float64)
    # equal rewards must give exactly zero advantage; the float mean need not equal them
    adv = np.zeros_like(rewards) if np.all(rewards == rewards[0]) else rewards - rewards.mean()
    if not np.any(adv):
        return None, rewards, adv
    enc = model.encode_image(grid)
    mem = model.encode_memory(memory)
    loss = None
    for h, a in zip(hyps, adv):
        if a == 0.0:
            continue
        term = sequence_logprob(model, enc, mem, h.tokens) * (-a / len(hyps))
        loss = term if loss is None else loss + term
    return loss, rewards, adv


def scst_step(model: CaptionModel, opt: Adam, batch, lr: float, beam_size: int, reward_fns, state: TrainState | None = None, clip_norm: float | None = 1.0) -> float:
    """One fixed-lr SCST update over ``batch`` (list of ``(grid, memory)``); returns mean reward."""
    opt.zero_grad()
    rewards = []
    any_grad = False
    for (grid, memory), reward_fn in zip(batch, reward_fns):
        loss, r, _ = scst_loss(model, grid, memory, beam_size, reward_fn)
        rewards.append(r.mean())
        if loss is None:
            if state is not None:
                state.stats["degenerate_beams"] += 1
            continue
        loss = loss * (1.0 / len(batch))
        if not math.isfinite(loss.item()):
            raise NumericalAbort(f"non-finite SCST loss {loss.item()}")
        loss.backward()
        any_grad = True
    if any_grad:
        if clip_norm is not None:
            clip_grad_norm(model.parameters(), clip_norm)
        opt.step(lr)
    return float(np.mean(rewards))


def cider_reward(tokenizer: Tokenizer, references: Sequence[str], idf: IdfTable) -> Callable[[list[int]], float]:
    def reward(tokens: list[int]) -> float:
        return cider_d(tokenizer.decode(tokens), references, idf)

    return reward


# -- validation ------------------------------------------------------------------------
def generate(model: CaptionModel, tokenizer: Tokenizer, examples: Sequence[Example], beam: int = 1) -> dict[str, str]:
    out = {}
    max_new = model.cfg.max_len - 1
    for ex in examples:
        state = model.start(ex.grid, ex.memory)
        if beam == 1:
            tokens = greedy_search(state, model.advance, max_new).tokens
        else:
            tokens = beam_search(state, model.advance, beam, max_new)[0].tokens
        out[ex.image_id] = tokenizer.decode(tokens)
    return out


def evaluate(model: CaptionModel, tokenizer: Tokenizer, examples: Sequence[Example], beam: int = 1) -> dict[str, float]:
    preds = generate(model, tokenizer, examples, beam)
    return corpus_eval(preds, {ex.image_id: ex.references for ex in examples})


def validation_xe(model: CaptionModel, examples: Sequence[Example]) -> float:
    """Mean teacher-forced XE over every (image, caption) pair."""
    total, n = 0.0, 0
    with nx.no_grad():
        for ex in examples:
            enc = model.encode_image(ex.grid)
            mem = model.encode_memory(ex.memory)
            for t in ex.targets:
                total += xe_loss(model.decoder_forward(t[:-1], enc, mem), t).item()
                n += 1
    return total / n


# -- pipeline ----------------------------------------------------------------------------
@dataclass
class PipelineResult:
    checkpoint: Path
    xe_metrics: dict  # best XE-stage validation
    xe_last: dict  # validation at the end of the XE stage
    scst_metrics: dict | None
    final_metrics: dict
    best_metrics: dict
    val_xe: float
    stats: dict
    seconds: float


def train_pipeline(
    model: CaptionModel,
    tokenizer: Tokenizer,
    train: Sequence[Example],
    val: Sequence[Example],
    idf_train: IdfTable,
    cfg: TrainConfig,
    out_dir,
    log_name: str = "train_log.jsonl",
) -> PipelineResult:
    """XE then SCST with periodic greedy validation; keeps the best-CIDEr checkpoint.

    ``train`` examples must carry memory retrieved with self-exclusion.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "best.ckpt"
    t0 = time.perf_counter()
    opt = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    state = TrainState.fresh(cfg.seed)
    rng = state.rng()
    best = {"CIDEr-D": -1.0}
    logf = open(out_dir / log_name, "w")

    def record(**kw):
        kw.update(alpha=model.gate_values(), wallclock=round(time.perf_counter() - t0, 3))
        logf.write(json.dumps(kw) + "\n")
        logf.flush()

    def validate(stage):
        nonlocal best
        scores = evaluate(model, tokenizer, val, cfg.val_beam)
        record(step=state.step, stage=stage, validation=scores)
        if scores["CIDEr-D"] > best["CIDEr-D"]:
            best = dict(scores)
            save_checkpoint(model, ckpt, extra={"step": state.step, "stage": stage, "metrics": scores})
        return scores

    events_before = model.empty_memory_events
    stale = 0
    best_xe = -1.0
    xe_last: dict = {}
    try:
        state.stage = "xe"
        for _ in range(cfg.xe_steps):
            state.step += 1
            micro = sample_xe_batch(rng, train, cfg)
            lr = lr_schedule(state.step, model.cfg.d, cfg.warmup_steps, cfg.lr_scale)
            loss = xe_train_step(model, opt, micro, lr, cfg.clip_norm)
            record(step=state.step, stage="xe", loss=loss, lr=lr)
            if state.step % cfg.val_every == 0 or state.step == cfg.xe_steps:
                scores = xe_last = validate("xe")
                if scores["CIDEr-D"] > best_xe:
                    best_xe, stale = scores["CIDEr-D"], 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
        if not cfg.xe_steps:
            xe_last = validate("xe")
        xe_metrics = dict(best)
        if cfg.scst_steps:
            # fine-tune from the best XE weights with a fresh optimizer
            if ckpt.exists():
                best_model, _ = load_checkpoint(ckpt)
                model.load_state_dict(best_model.state_dict())
            opt = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.eps)
            state.stage = "scst"
            for s in range(cfg.scst_steps):
                state.step += 1
                idx = rng.choice(len(train), size=min(cfg.scst_batch_size, len(train)), replace=False)
                batch = [(train[i].grid, train[i].memory) for i in idx]
                fns = [cider_reward(tokenizer, train[i].references, idf_train) for i in idx]
                reward = scst_step(model, opt, batch, cfg.scst_lr, cfg.scst_beam, fns, state, cfg.clip_norm)
                record(step=state.step, stage="scst", reward=reward, lr=cfg.scst_lr)
                if (s + 1) % cfg.val_every == 0 or s + 1 == cfg.scst_steps:
                    scst_metrics = validate("scst")
        else:
            scst_metrics = None
        final = evaluate(model, tokenizer, val, cfg.val_beam)
    finally:
        logf.close()
    state.stats["empty_memory"] = model.empty_memory_events - events_before
    best_model, _ = load_checkpoint(ckpt)
    return PipelineResult(
        checkpoint=ckpt,
        xe_metrics=xe_metrics,
        xe_last=xe_last,
        scst_metrics=scst_metrics,
        final_metrics=final,
        best_metrics=best,
        val_xe=validation_xe(best_model, val),
        stats=dict(state.stats),
        seconds=time.perf_counter() - t0,
    )
