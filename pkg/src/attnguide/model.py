"""Post-LN bidirectional Transformer encoder with a tied MLM output layer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor
from .data import MaskedBatch


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 128
    max_len: int = 64
    vocab_size: int = 8192
    attn_dropout: float = 0.0

    def __post_init__(self):
        for name in ("layers", "heads", "hidden", "max_len", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError("attention dropout must lie in [0, 1)")

    @property
    def ffn(self) -> int:
        return 4 * self.hidden

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden, cfg.ffn
    shapes = {
        "embed.tokens": (cfg.vocab_size, d),
        "embed.positions": (cfg.max_len, d),
        "embed.ln.gain": (d,),
        "embed.ln.bias": (d,),
    }
    for k in range(cfg.layers):
        p = f"layer{k}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "attn.ln.gain"] = (d,)
        shapes[p + "attn.ln.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, f)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (f, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ffn.ln.gain"] = (d,)
        shapes[p + "ffn.ln.bias"] = (d,)
    shapes["mlm.bias"] = (cfg.vocab_size,)
    return shapes


class ParameterStore:
    """Named parameter tensors for one model."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names disagree with config: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(self.config, {
            k: Tensor(t.data.astype(dtype), requires_grad=True) for k, t in self.tensors.items()
        })

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.config, {
            k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()
        })

    @property
    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ParameterStore":
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Weights ~ N(0, 0.02) truncated at two sigma, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = truncnorm.rvs(-2.0, 2.0, scale=0.02, size=shape, random_state=rng)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ParameterStore(config, tensors)


@dataclass
class AttentionTrace:
    """Post-softmax attention per layer, each ``b x h x n x n`` (pre-dropout)."""

    layers: list[Tensor]

    @property
    def shape(self) -> tuple[int, ...]:
        """``layers x heads x batch x n x n``."""
        b, h, n, _ = self.layers[0].shape
        return (len(self.layers), h, b, n, n)

    def array(self) -> np.ndarray:
        """Stacked copy in ``layers x heads x batch x n x n`` order."""
        return np.stack([t.data.transpose(1, 0, 2, 3) for t in self.layers])

    def head(self, layer: int, head: int, seq: int) -> np.ndarray:
        return self.layers[layer].data[seq, head]


def _split_heads(x: Tensor, b: int, n: int, h: int, dk: int) -> Tensor:
    return x.reshape(b, n, h, dk).transpose(0, 2, 1, 3)


def encode(
    params: ParameterStore,
    batch: MaskedBatch,
    capture_attention: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionTrace | None]:
    """Run the encoder; attention dropout is active only when ``rng`` is given."""
    cfg = params.config
    ids = np.asarray(batch.input_ids)
    b, n = ids.shape
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError(f"token id outside vocabulary of size {cfg.vocab_size}")
    h, dk = cfg.heads, cfg.head_dim
    key_mask = batch.key_mask()[:, None, None, :]
    scale = 1.0 / math.sqrt(dk)

    x = ad.embedding(params["embed.tokens"], ids)
    pos = ad.embedding(params["embed.positions"], np.arange(n))
    x = ad.layer_norm(x + pos, params["embed.ln.gain"], params["embed.ln.bias"])

    captured = []
    for k in range(cfg.layers):
        p = f"layer{k}."
        q = _split_heads(ad.linear(x, params[p + "attn.q.weight"], params[p + "attn.q.bias"]), b, n, h, dk)
        kk = _split_heads(ad.linear(x, params[p + "attn.k.weight"], params[p + "attn.k.bias"]), b, n, h, dk)
        v = _split_heads(ad.linear(x, params[p + "attn.v.weight"], params[p + "attn.v.bias"]), b, n, h, dk)
        scores = ad.matmul(q, kk.transpose(0, 1, 3, 2)) * scale
        probs = ad.softmax_rows(scores, key_mask)
        if capture_attention:
            captured.append(probs)
        attn = ad.dropout(probs, cfg.attn_dropout, rng)
        ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, cfg.hidden)
        out = ad.linear(ctx, params[p + "attn.o.weight"], params[p + "attn.o.bias"])
        x = ad.layer_norm(x + out, params[p + "attn.ln.gain"], params[p + "attn.ln.bias"])
        ff = ad.gelu(ad.linear(x, params[p + "ffn.in.weight"], params[p + "ffn.in.bias"]))
        ff = ad.linear(ff, params[p + "ffn.out.weight"], params[p + "ffn.out.bias"])
        x = ad.layer_norm(x + ff, params[p + "ffn.ln.gain"], params[p + "ffn.ln.bias"])

    return x, (AttentionTrace(captured) if capture_attention else None)


def mlm_logits(params: ParameterStore, hidden: Tensor, positions: np.ndarray | None = None) -> Tensor:
    """Vocabulary logits through the transposed token-embedding matrix.

    With ``positions`` (indices into the flattened token axis) only those rows
    are projected, giving a ``len(positions) x V`` result; otherwise the result
    is ``b x n x V``.
    """
    if positions is not None:
        hidden = ad.take_rows(hidden, positions)
    return ad.linear(hidden, params["embed.tokens"].T, params["mlm.bias"])
