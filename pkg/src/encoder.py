"""
Toy sentence encoder: hashed token embeddings, a stack of per-token nonlinear
layers and a pooling step that turns token vectors into one sentence vector.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, TypeAlias

import numpy as np

from autodiff.base import Module
from autodiff.layers import Dense, Embedding
from autodiff.tensor import ACTIVATIONS, Tensor, l2_normalize, matmul, reshape
from custom_types import TokenIds
from errors import ConfigError, ContractError, EmptyInputError

logger = logging.getLogger(__name__)

POOLINGS = ("mean", "last_token")

SentenceVector: TypeAlias = Tensor


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 4096
    lowercase: bool = True

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2, got {self.vocab_size}")


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    num_layers: int = 3
    hidden_dim: int = 64
    pooling: str = "mean"
    activation: str = "tanh"
    trainable_layers: int = 1
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ConfigError(f"encoder dimensions must be positive, got {self.embed_dim}/{self.hidden_dim}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}, expected one of {POOLINGS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        if self.trainable_layers < 1:
            raise ConfigError(f"trainable_layers must be at least 1, got {self.trainable_layers}")

    @property
    def output_dim(self) -> int:
        return self.hidden_dim if self.num_layers else self.embed_dim


def _bucket(token: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


@lru_cache(maxsize=65536)
def tokenize(text: str, cfg: TokenizerConfig) -> TokenIds:
    """Whitespace split, optional lower-casing, then hash each token into ``vocab_size`` buckets."""
    if cfg.lowercase:
        text = text.lower()
    return tuple(_bucket(token, cfg.vocab_size) for token in text.split())


class Encoder(Module):
    def __init__(
        self,
        cfg: EncoderConfig,
        tokenizer: TokenizerConfig,
        rng: np.random.Generator,
        name: str = "encoder",
    ) -> None:
        super().__init__(name)
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.embedding = self.add_module(Embedding(f"{name}.embedding", tokenizer.vocab_size, cfg.embed_dim, rng))
        self.layers: list[Dense] = []
        width = cfg.embed_dim
        for depth in range(1, cfg.num_layers + 1):
            layer = Dense(f"{name}.layer{depth}", width, cfg.hidden_dim, cfg.activation, rng)
            self.layers.append(self.add_module(layer))
            width = cfg.hidden_dim

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def encode_batch(self, token_lists: Sequence[TokenIds]) -> Tensor:
        """Encode several token lists at once into an ``[n x output_dim]`` tensor."""
        if not token_lists:
            raise EmptyInputError("no sentences to encode")
        lengths = [len(tokens) for tokens in token_lists]
        if min(lengths) == 0:
            raise EmptyInputError(f"sentence {lengths.index(0)} has no tokens")

        flat = [token for tokens in token_lists for token in tokens]
        hidden = self.embedding.lookup(flat)
        for layer in self.layers:
            hidden = layer(hidden)
        return matmul(Tensor(self._pooling_matrix(lengths)), hidden)

    def _pooling_matrix(self, lengths: list[int]) -> np.ndarray:
        pooling = np.zeros((len(lengths), sum(lengths)))
        start = 0
        for row, length in enumerate(lengths):
            if self.cfg.pooling == "mean":
                pooling[row, start : start + length] = 1.0 / length
            else:
                pooling[row, start + length - 1] = 1.0
            start += length
        return pooling

    def encode(self, tokens: TokenIds) -> SentenceVector:
        return reshape(self.encode_batch([tokens]), (self.output_dim,))

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        return self.encode_batch([tokenize(text, self.tokenizer) for text in texts])

    def features(self, texts: Sequence[str]) -> Tensor:
        """Sentence vectors as consumed by downstream heads (unit norm when configured)."""
        vectors = self.encode_texts(texts)
        return l2_normalize(vectors) if self.cfg.normalize else vectors


def encode(tokens: TokenIds, encoder: Encoder) -> SentenceVector:
    return encoder.encode(tokens)


def freeze_all_but_last(encoder: Encoder, trainable: int = 1) -> None:
    """
    Freeze the embedding table and every layer except the last ``trainable``
    ones, which are unfrozen.
    """
    if not encoder.layers:
        raise ContractError("cannot keep the last layer trainable: the encoder has no layers")
    if not 1 <= trainable <= len(encoder.layers):
        raise ContractError(f"trainable must lie in [1, {len(encoder.layers)}], got {trainable}")
    encoder.freeze()
    for layer in encoder.layers[-trainable:]:
        layer.unfreeze()
    logger.debug(
        "Froze %s except %s",
        encoder.name,
        ", ".join(layer.name for layer in encoder.layers[-trainable:]),
    )


def freeze_all(module: Module) -> None:
    module.freeze()
