"""Closed-vocabulary tokenizer, prompt types, text encoder and decoder.

Text is whitespace-tokenized against a small fixed vocabulary generated
with the synthetic corpus, so detokenize(tokenize(t)) == t holds exactly
for any in-vocabulary string. Decoding is greedy and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataFormatError, DimensionError, LexicalError, UsageError
from .nn import (DecoderBlock, LayerNormBlock, LinearLayer, ParamRegistry,
                 positional_encoding)
from .tensor import Tensor

PAD, BOS, EOS, MASK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<mask>")

DETECTION_TEMPLATE = "This image is for the detection of {disease} of cells."
VQA_PREFIX = "Q:"
MLM_PREFIX = "mask:"


class Vocabulary:
    """Bijective token <-> id map with fixed reserved ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise ConfigurationError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("vocabulary contains duplicate tokens")
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "Vocabulary":
        seen = dict.fromkeys(w for w in words if w not in RESERVED)
        return cls(list(RESERVED) + list(seen))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise LexicalError(f"token not in vocabulary: {token!r}") from None

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if len(tokens) < len(RESERVED):
            raise DataFormatError(f"{path}: vocabulary file too short")
        return cls(tokens)


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    """BOS + whitespace-split ids + EOS; unknown words raise LexicalError."""
    ids = [BOS]
    for word in text.split():
        ids.append(vocab.id_of(word))
    ids.append(EOS)
    return ids


def detokenize(vocab: Vocabulary, ids: Sequence[int]) -> str:
    words = [vocab.token_of(i) for i in ids if i not in (PAD, BOS, EOS)]
    return " ".join(words)


@dataclass(frozen=True)
class TaskPrompt:
    """Text side of one sample; kind routes the forward pass."""

    kind: str                      # det | seg | vqa | mlm | cls
    text: str
    disease: Optional[str] = None

    def __post_init__(self):
        if self.kind in ("det", "seg"):
            expected = DETECTION_TEMPLATE.format(disease=self.disease)
            if self.text != expected:
                raise UsageError(f"{self.kind} prompt must read {expected!r}")
        elif self.kind == "vqa":
            if not self.text.startswith(VQA_PREFIX):
                raise UsageError(f"VQA prompt must start with {VQA_PREFIX!r}")
        elif self.kind == "mlm":
            if not self.text.startswith(MLM_PREFIX):
                raise UsageError(f"MLM prompt must start with {MLM_PREFIX!r}")
        elif self.kind == "cls":
            if self.text:
                raise UsageError("classification carries no text prompt")
        else:
            raise UsageError(f"unknown prompt kind: {self.kind}")


@dataclass
class TextEmbeddings:
    tokens: Tensor  # (L_t, N)


class TextEncoder:
    """Embedding lookup + sinusoid positions + self-attention layers."""

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 vocab_size: int, dim: int, heads: int, layers: int, mlp_ratio: int = 2):
        from .nn import TransformerBlock

        self.dim = dim
        self.embed = reg.register("text_encoder.embed",
                                  rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)))
        self.blocks = [
            TransformerBlock(reg, f"text_encoder.layer{i}", dim, heads, dim * mlp_ratio, rng)
            for i in range(layers)
        ]

    def __call__(self, vocab: Vocabulary, prompt: TaskPrompt) -> TextEmbeddings:
        if prompt.kind == "cls":
            raise UsageError("classification bypasses the text path")
        ids = tokenize(vocab, prompt.text)
        x = T.gather_rows(self.embed, ids) + positional_encoding("sinusoidal-1d", len(ids), self.dim)
        for block in self.blocks:
            x = block(x)
        return TextEmbeddings(tokens=x)


def causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = -1e30
    return mask


class TextDecoder:
    """Autoregressive generator over fused multimodal tokens."""

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 vocab_size: int, dim: int, heads: int, layers: int, mlp_ratio: int = 2):
        self.dim = dim
        self.vocab_size = vocab_size
        self.embed = reg.register("text_decoder.embed",
                                  rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)))
        self.layers = [
            DecoderBlock(reg, f"text_decoder.layer{i}", dim, heads, dim * mlp_ratio, rng)
            for i in range(layers)
        ]
        self.final_norm = LayerNormBlock(reg, "text_decoder.final_norm", dim)
        self.out = LinearLayer(reg, "text_decoder.out", dim, vocab_size, rng)

    def forward(self, ids: Sequence[int], fused: Tensor) -> Tensor:
        """Teacher-forced logits, one row per input position."""
        ids = list(ids)
        x = T.gather_rows(self.embed, ids) + positional_encoding("sinusoidal-1d", len(ids), self.dim)
        mask = causal_mask(len(ids))
        for layer in self.layers:
            x = layer(x, fused, self_mask=mask)
        return self.out(self.final_norm(x))

    def generate(self, fused: Tensor, prefix_ids: Sequence[int], max_len: int):
        """Greedy continuation after the prefix; returns (ids, truncated)."""
        if max_len < 1:
            raise UsageError("max_len must be >= 1")
        seq = list(prefix_ids)
        generated: list[int] = []
        for _ in range(max_len):
            logits = self.forward(seq, fused).data
            nxt = int(np.argmax(logits[-1]))
            if nxt == EOS:
                return generated, False
            generated.append(nxt)
            seq.append(nxt)
        return generated, True


def text_loss(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over non-PAD target positions."""
    targets = np.asarray(targets, dtype=np.intp)
    t, v = logits.shape
    if t != targets.size:
        raise DimensionError(f"logits rows {t} do not match target length {targets.size}")
    keep = np.flatnonzero(targets != PAD)
    if keep.size == 0:
        return Tensor(0.0)
    log_probs = T.log_softmax(logits, axis=-1)
    flat = T.reshape(log_probs, (t * v, 1))
    picked = T.gather_rows(flat, keep * v + targets[keep])
    return -picked.mean()
