"""
Online/target network pair for non-contrastive training.

The online side carries encoder, projector and predictor and is trained by
gradient descent. The target side carries only encoder and projector, never
receives gradient, and follows the online weights by an exponential moving
average after every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from autodiff.base import Module, Parameter
from autodiff.layers import MLP
from autodiff.optim import OptimizerState, sgd_step
from autodiff.tensor import ACTIVATIONS, Tensor, stop_gradient
from data import LabeledSentence
from encoder import Encoder, SentenceVector
from errors import CollapseError, ConfigError, ContractError, DegenerateVectorError
from losses import byol_loss
from pairing import PairBatch

logger = logging.getLogger(__name__)

TAP_POINTS = ("projector", "encoder")


@dataclass(frozen=True)
class ByolConfig:
    projector_hidden: int = 64
    projector_out: int = 32
    predictor_hidden: int = 64
    delta: float = 0.99
    learning_rate: float = 0.05
    epochs: int = 15
    activation: str = "relu"
    tap: str = "projector"
    stop_gradient: bool = True
    use_predictor: bool = True

    def __post_init__(self) -> None:
        if min(self.projector_hidden, self.projector_out, self.predictor_hidden) <= 0:
            raise ConfigError("projector and predictor sizes must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must lie in [0, 1], got {self.delta}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.tap not in TAP_POINTS:
            raise ConfigError(f"unknown tap point {self.tap!r}, expected one of {TAP_POINTS}")


class OnlineNetwork(Module):
    def __init__(self, encoder: Encoder, cfg: ByolConfig, rng: np.random.Generator, name: str = "online") -> None:
        super().__init__(name)
        self.encoder = self.add_module(encoder)
        self.projector = self.add_module(
            MLP(f"{name}.projector", encoder.output_dim, cfg.projector_hidden, cfg.projector_out, cfg.activation, rng)
        )
        self.predictor = self.add_module(
            MLP(f"{name}.predictor", cfg.projector_out, cfg.predictor_hidden, cfg.projector_out, cfg.activation, rng)
        )

    def project(self, texts: Sequence[str]) -> Tensor:
        return self.projector(self.encoder.features(texts))

    def predict(self, texts: Sequence[str], use_predictor: bool = True) -> Tensor:
        projection = self.project(texts)
        return self.predictor(projection) if use_predictor else projection


class TargetNetwork(Module):
    """Encoder and projector only; there is no predictor on this side."""

    def __init__(self, encoder: Encoder, projector: MLP, name: str = "target") -> None:
        super().__init__(name)
        self.encoder = self.add_module(encoder)
        self.projector = self.add_module(projector)

    def project(self, texts: Sequence[str]) -> Tensor:
        return self.projector(self.encoder.features(texts))


class NetworkPair:
    """
    The online network (params theta) and its EMA target (params xi).

    Target parameters are always frozen, so no optimizer ever updates them.
    """

    def __init__(self, online: OnlineNetwork, target: TargetNetwork, cfg: ByolConfig) -> None:
        self.online = online
        self.target = target
        self.cfg = cfg
        self.delta = cfg.delta
        self.target.freeze()
        self._matched = _match_parameters(online, target)

    def predict_online(self, samples: Sequence[LabeledSentence]) -> Tensor:
        return self.online.predict([s.text for s in samples], self.cfg.use_predictor)

    def project_target(self, samples: Sequence[LabeledSentence]) -> Tensor:
        texts = [s.text for s in samples]
        if not self.cfg.stop_gradient:
            # ablation: the target branch is the online network itself, gradient included
            return self.online.project(texts)
        return stop_gradient(self.target.project(texts))

    def parameters(self) -> list[Parameter]:
        return self.online.parameters() + self.target.parameters()

    def matched_parameters(self) -> list[tuple[Parameter, Parameter]]:
        """(online, target) parameter pairs in registration order."""
        return list(self._matched)

    def freeze(self) -> None:
        self.online.freeze()
        self.target.freeze()


def _suffix(parameter: Parameter, module: Module) -> str:
    return parameter.name[len(module.name) + 1 :]


def _match_parameters(online: OnlineNetwork, target: TargetNetwork) -> list[tuple[Parameter, Parameter]]:
    online_by_suffix = {_suffix(p, online): p for p in online.parameters()}
    pairs = []
    for target_param in target.parameters():
        online_param = online_by_suffix.get(_suffix(target_param, target))
        if online_param is None:
            raise ContractError(f"target parameter {target_param.name!r} has no online counterpart")
        if online_param.shape != target_param.shape:
            raise ContractError(
                f"shape mismatch between {online_param.name} {online_param.shape} "
                f"and {target_param.name} {target_param.shape}"
            )
        pairs.append((online_param, target_param))
    return pairs


def copy_parameters(source: Module, destination: Module) -> None:
    """Copy values and frozen flags between structurally identical modules."""
    source_params = source.parameters()
    destination_params = destination.parameters()
    if len(source_params) != len(destination_params):
        raise ContractError(
            f"{source.name} has {len(source_params)} parameters, {destination.name} has {len(destination_params)}"
        )
    for src, dst in zip(source_params, destination_params):
        if _suffix(src, source) != _suffix(dst, destination) or src.shape != dst.shape:
            raise ContractError(f"cannot copy {src.name} {src.shape} into {dst.name} {dst.shape}")
        dst.data[...] = src.data
        dst.frozen = src.frozen


def build_pair(online_encoder: Encoder, cfg: ByolConfig, rng: np.random.Generator) -> NetworkPair:
    """
    Wrap an encoder named ``online.encoder`` into a pair.

    The target encoder and projector start as exact copies of the online ones.
    Without ``use_predictor`` the predictor is frozen, since no loss reaches it.
    """
    target_encoder = Encoder(online_encoder.cfg, online_encoder.tokenizer, rng, name="target.encoder")
    copy_parameters(online_encoder, target_encoder)

    online = OnlineNetwork(online_encoder, cfg, rng)
    if not cfg.use_predictor:
        online.predictor.freeze()
    target_projector = MLP(
        "target.projector", online_encoder.output_dim, cfg.projector_hidden, cfg.projector_out, cfg.activation, rng
    )
    copy_parameters(online.projector, target_projector)
    return NetworkPair(online, TargetNetwork(target_encoder, target_projector), cfg)


def init_pair(encoder: Encoder, cfg: ByolConfig, seed: int) -> NetworkPair:
    """
    Build the pair around a stage-1 encoder.

    Both sides get their own encoder copy (frozen flags carried over on the
    online side); the predictor is freshly initialised from ``seed``.
    """
    rng = np.random.default_rng(seed)
    online_encoder = Encoder(encoder.cfg, encoder.tokenizer, rng, name="online.encoder")
    copy_parameters(encoder, online_encoder)
    return build_pair(online_encoder, cfg, rng)


def ema_update(pair: NetworkPair) -> None:
    """
    ``xi <- delta * xi + (1 - delta) * theta`` for every matched parameter,
    evaluated as ``xi + (1 - delta) * (theta - xi)`` so that ``xi == theta`` is
    left exactly in place.
    """
    delta = pair.delta
    for online_param, target_param in pair.matched_parameters():
        if delta == 1.0:
            continue
        if delta == 0.0:
            target_param.data[...] = online_param.data
            continue
        target_param.data[...] += (1.0 - delta) * (online_param.data - target_param.data)


def train_step(pair: NetworkPair, batch: PairBatch, state: OptimizerState) -> float:
    """
    One non-contrastive update: mean loss over the batch's positive pairs,
    backward into the online side only, an optimizer step, then the EMA update.
    Returns the loss measured before the step.
    """
    try:
        loss = byol_loss(batch.batch_a, batch.batch_b, pair)
    except DegenerateVectorError as exc:
        pair.online.zero_grad()
        raise CollapseError(f"degenerate representation during non-contrastive step: {exc}") from exc

    value = loss.item()
    if loss.requires_grad:
        loss.backward()
    sgd_step(pair.online.parameters(), state)
    ema_update(pair)
    return value


def represent(pair: NetworkPair, samples: Sequence[LabeledSentence]) -> SentenceVector:
    """
    Representation handed to the downstream classifier: the online projector
    output (before the predictor), or the encoder output when ``tap`` says so.
    """
    texts = [s.text for s in samples]
    if pair.cfg.tap == "encoder":
        return stop_gradient(pair.online.encoder.features(texts))
    return stop_gradient(pair.online.project(texts))
