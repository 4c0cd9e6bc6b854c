"""Training loop: combined objective, AdamW, LR schedule, metrics and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, save_checkpoint
from .data import BatchStream, Vocab, build_vocab, encode_sequence, mask_batch
from .model import ModelConfig, ParameterStore, encode, init_parameters, mlm_logits
from .objective import GuidanceConfig, combined_loss, mlm_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "mlm_loss", "ag_loss", "alpha", "lr", "tokens_per_sec")
EVAL_SEED = 1234


class TrainingDivergedError(RuntimeError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    guidance: GuidanceConfig | None = None
    lr: float = 1e-4
    warmup: int = 0
    steps: int = 20000
    batch_size: int = 32
    mask_prob: float = 0.15
    seed: int = 0
    out_dir: str | None = None
    ag_enabled: bool = True
    bert_style_mask: bool = False
    clip_norm: float | None = None
    checkpoint_every: int | None = None
    record_throughput: bool = False
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < self.warmup:
            raise ValueError("total steps must be at least the warmup steps")
        if self.guidance is None:
            self.guidance = GuidanceConfig.for_heads(self.model.heads, decay_horizon=self.steps)
        self.guidance.validate(self.model.heads)

    @property
    def checkpoint_interval(self) -> int:
        if self.checkpoint_every is not None:
            return self.checkpoint_every
        return max(1, self.steps // 10)

    def echo(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("model", "guidance")}
        d["betas"] = list(self.betas)
        return d


@dataclass
class StepRecord:
    step: int
    mlm_loss: float
    ag_loss: float
    alpha: float
    lr: float
    tokens_per_sec: float = 0.0

    def csv_row(self) -> list[str]:
        return [str(self.step)] + [f"{v:.6f}" for v in
                                   (self.mlm_loss, self.ag_loss, self.alpha, self.lr, self.tokens_per_sec)]

    def key(self) -> tuple:
        """Everything except the wall-clock throughput."""
        return (self.step, self.mlm_loss, self.ag_loss, self.alpha, self.lr)


@dataclass
class TrainMetrics:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("metric steps must be strictly increasing")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def average_mlm(self) -> float:
        return float(self.column("mlm_loss").mean())

    def running_mean(self, name: str, window: int) -> np.ndarray:
        x = self.column(name)
        c = np.cumsum(np.insert(x, 0, 0.0))
        out = np.empty_like(x)
        for i in range(len(x)):
            lo = max(0, i + 1 - window)
            out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return out

    def __len__(self) -> int:
        return len(self.records)


def read_metrics_csv(path) -> TrainMetrics:
    m = TrainMetrics()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        for row in reader:
            m.append(StepRecord(int(row[0]), *map(float, row[1:])))
    return m


# optimisation --------------------------------------------------------------


def lr_at(t: int, warmup: int, total: int, peak: float) -> float:
    """Linear ramp to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if t < 0:
        raise ValueError("step must be non-negative")
    if warmup > 0 and t < warmup:
        return peak * t / warmup
    if total <= warmup:
        return peak if t < total else 0.0
    return peak * max(0.0, (total - t) / (total - warmup))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-6,
    weight_decay: float = 0.01,
) -> None:
    """Bias-corrected Adam with decoupled weight decay, updating in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient for {name} at optimizer step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= (lr * update).astype(p.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(factor)
    return norm


# training ------------------------------------------------------------------


def _rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x3A5C])


def _metrics_writer(path: Path, keep: Sequence[StepRecord]):
    fh = open(path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for rec in keep:
        writer.writerow(rec.csv_row())
    fh.flush()
    return fh, writer


def train(
    config: TrainConfig,
    corpus: Sequence[str],
    *,
    vocab: Vocab | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    prior_metrics: TrainMetrics | None = None,
) -> tuple[Checkpoint, TrainMetrics]:
    """Optimise the combined objective for ``config.steps`` steps.

    ``stop_after`` ends the run early at that global step while keeping every
    schedule tied to ``config.steps``; the returned checkpoint can be passed as
    ``resume`` to continue.  With ``config.out_dir`` set, ``metrics.csv`` is
    written row by row, ``latest.agckpt`` every checkpoint interval and
    ``final.agckpt`` at the end.
    """
    if resume is not None:
        vocab = Vocab(resume.vocab)
    elif vocab is None:
        vocab = build_vocab(corpus, config.model.vocab_size)
    model_cfg = dataclasses.replace(config.model, vocab_size=len(vocab))
    if resume is not None and resume.model != model_cfg:
        raise CompatibilityError("resume checkpoint was trained with a different model config")

    guidance = config.guidance
    ag_active = config.ag_enabled and bool(guidance.assignment)
    stream = BatchStream(corpus, vocab, model_cfg.max_len, config.batch_size, config.seed)
    delim, period = vocab.delim_ids, vocab.period_id
    rng = _rng_for(config.seed)
    end = config.steps if stop_after is None else min(stop_after, config.steps)

    if resume is None:
        store = init_parameters(model_cfg, config.seed)
        adam = AdamState.zeros(store.arrays())
        start = 0
    else:
        store = resume.parameter_store()
        adam = AdamState({k: v.copy() for k, v in resume.adam_m.items()},
                         {k: v.copy() for k, v in resume.adam_v.items()}, resume.step)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start = resume.step
    params = store.arrays()

    metrics = TrainMetrics()
    for rec in (prior_metrics.records if prior_metrics else []):
        if rec.step < start:
            metrics.append(rec)

    out = Path(config.out_dir) if config.out_dir else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.txt")
        fh, writer = _metrics_writer(out / "metrics.csv", metrics.records)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            model=model_cfg, guidance=guidance, vocab=list(vocab.tokens),
            params={k: v.copy() for k, v in params.items()},
            adam_m={k: v.copy() for k, v in adam.m.items()},
            adam_v={k: v.copy() for k, v in adam.v.items()},
            step=step, rng_state=rng.bit_generator.state, train=config.echo(),
        )

    dropout_rng = rng if model_cfg.attn_dropout > 0 else None
    tokens = config.batch_size * model_cfg.max_len
    try:
        for t in range(start, end):
            tic = time.perf_counter()
            ids, lens = stream.batch(t)
            batch = mask_batch(ids, lens, config.mask_prob, rng,
                               bert_style=config.bert_style_mask, vocab_size=len(vocab))
            for p in store.values():
                p.grad = None
            lr = lr_at(t, config.warmup, config.steps, config.lr)
            try:
                hidden, trace = encode(store, batch, capture_attention=ag_active, rng=dropout_rng)
                logits = mlm_logits(store, hidden, batch.flat_positions())
                terms = combined_loss(logits, trace if ag_active else None, batch, guidance, t, delim, period)
                ad.backward(terms.total)
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(f"step {t}: {exc}") from None
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in store.items()}
            if config.clip_norm:
                clip_grad_norm(grads, config.clip_norm)
            adam_step(params, grads, adam, lr, *config.betas, config.eps, config.weight_decay)
            elapsed = time.perf_counter() - tic
            rec = StepRecord(t, terms.mlm.item(), terms.ag.item(), terms.alpha, lr,
                             tokens / elapsed if config.record_throughput and elapsed > 0 else 0.0)
            metrics.append(rec)
            if writer is not None:
                writer.writerow(rec.csv_row())
                fh.flush()
            done = t + 1
            if out is not None and done < end and done % config.checkpoint_interval == 0:
                save_checkpoint(snapshot(done), out / "latest.agckpt")
            if t % 100 == 0:
                log.info("step %d mlm %.4f ag %.4f alpha %.3f", t, rec.mlm_loss, rec.ag_loss, rec.alpha)
    finally:
        if fh is not None:
            fh.close()

    ckpt = snapshot(end)
    if out is not None:
        save_checkpoint(ckpt, out / ("final.agckpt" if end == config.steps else "latest.agckpt"))
    return ckpt, metrics


# evaluation ----------------------------------------------------------------


def evaluate_mlm(
    checkpoint: Checkpoint,
    corpus: Sequence[str],
    seed: int = EVAL_SEED,
    vocab: Vocab | None = None,
    batch_size: int = 32,
    mask_prob: float = 0.15,
) -> float:
    """Mean masked cross-entropy over ``corpus`` under a fixed masking seed."""
    ckpt_vocab = Vocab(checkpoint.vocab)
    if len(ckpt_vocab) != checkpoint.model.vocab_size:
        raise CompatibilityError("checkpoint vocabulary does not match its model config")
    if vocab is not None and vocab != ckpt_vocab:
        raise CompatibilityError("vocabulary differs from the one stored in the checkpoint")
    lines = list(corpus)
    if not lines:
        raise ValueError("evaluation corpus is empty")
    store = checkpoint.parameter_store()
    n = checkpoint.model.max_len
    rng = np.random.default_rng(seed)
    enc = [encode_sequence(line, ckpt_vocab, n) for line in lines]
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(enc), batch_size):
            chunk = enc[i : i + batch_size]
            batch = mask_batch(np.stack([e[0] for e in chunk]), [e[1] for e in chunk], mask_prob, rng)
            if batch.num_masked == 0:
                continue
            hidden, _ = encode(store, batch)
            loss = mlm_loss(mlm_logits(store, hidden, batch.flat_positions()), batch)
            total += loss.item() * batch.num_masked
            count += batch.num_masked
    if count == 0:
        raise ValueError("evaluation corpus has no maskable tokens")
    return total / count
